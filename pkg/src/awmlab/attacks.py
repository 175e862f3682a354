"""Trigger construction and training-set poisoning."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checkpoint
from .data import LabeledDataset
from .errors import DimensionError, PlanError

ALL_TO_ONE = "all_to_one"
ALL_TO_ALL = "all_to_all"

# target classes per attack when used single-target
DEFAULT_TARGETS = {"badnets-square": 8, "sq": 2, "wm": 2, "l0inv": 0, "l2inv": 0, "blend": 0}


@dataclass
class TriggerSpec:
    name: str
    pattern: np.ndarray
    support_mask: np.ndarray
    blend_alpha: float = 1.0

    def __post_init__(self):
        self.pattern = np.asarray(self.pattern, dtype=np.float32)
        self.support_mask = np.asarray(self.support_mask, dtype=bool)
        if not 0.0 <= self.blend_alpha <= 1.0:
            raise ValueError(f"blend_alpha must lie in [0, 1], got {self.blend_alpha}")
        if self.pattern.shape != self.support_mask.shape:
            raise DimensionError(f"pattern {self.pattern.shape} and support {self.support_mask.shape} differ")

    @property
    def shape(self):
        return self.pattern.shape

    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        pat, sup = f"{self.name}.pattern.ckpt", f"{self.name}.support.ckpt"
        checkpoint.save(directory / pat, {"pattern": self.pattern})
        checkpoint.save(directory / sup, {"support": self.support_mask.astype(np.float32)})
        path = directory / f"{self.name}.trigger.json"
        path.write_text(json.dumps({"name": self.name, "blend_alpha": self.blend_alpha,
                                    "pattern_file": pat, "support_file": sup}, indent=2))
        return path

    @classmethod
    def load(cls, path):
        path = Path(path)
        meta = json.loads(path.read_text())
        pattern = next(iter(checkpoint.load(path.parent / meta["pattern_file"]).values()))
        support = next(iter(checkpoint.load(path.parent / meta["support_file"]).values()))
        return cls(meta["name"], pattern, support > 0.5, float(meta["blend_alpha"]))


def make_trigger(name, image_shape, seed=1234) -> TriggerSpec:
    """Build one of the built-in triggers for images of shape (C, H, W)."""
    c, h, w = image_shape
    rng = np.random.default_rng(seed)
    support = np.zeros(image_shape, dtype=bool)
    pattern = np.zeros(image_shape, dtype=np.float32)
    if name == "badnets-square":
        support[:, h - 3:, w - 3:] = True
        pattern[:] = 1.0
        alpha = 1.0
    elif name == "sq":
        support[:, h - 4:, :4] = True
        yy, xx = np.mgrid[0:h, 0:w]
        pattern[:] = ((yy + xx) % 2 == 0)
        alpha = 1.0
    elif name == "wm":
        support[:] = True
        yy, xx = np.mgrid[0:h, 0:w]
        pattern[:] = (((yy + 2 * xx) % 5) < 2)
        alpha = 0.2
    elif name == "blend":
        support[:] = True
        pattern[:] = rng.random(image_shape)
        alpha = 0.1
    elif name == "l0inv":
        flat = rng.choice(h * w, size=min(20, h * w), replace=False)
        support[:, flat // w, flat % w] = True
        pattern[:] = 1.0
        alpha = 1.0
    elif name == "l2inv":
        support[:] = True
        yy, xx = np.mgrid[0:h, 0:w]
        wave = 0.5 + 0.5 * np.sin(2 * np.pi * (yy / h * 2 + xx / w * 3))
        pattern[:] = wave
        alpha = 0.15
    else:
        raise KeyError(f"unknown trigger {name!r}")
    return TriggerSpec(name, pattern, support, alpha)


TRIGGER_NAMES = tuple(DEFAULT_TARGETS)


def apply_trigger(image, spec: TriggerSpec):
    """Blend ``spec`` into one image (C, H, W) or a batch (N, C, H, W)."""
    image = np.asarray(image, dtype=np.float32)
    if image.shape[-3:] != spec.shape:
        raise DimensionError(f"image shape {image.shape[-3:]} does not match trigger {spec.shape}")
    a = np.float32(spec.blend_alpha)
    blended = (np.float32(1.0) - a) * image + a * spec.pattern
    return np.clip(np.where(spec.support_mask, blended, image), 0.0, 1.0).astype(np.float32)


@dataclass
class PoisonPlan:
    triggers: list
    poison_rate: float
    policy: str = ALL_TO_ONE
    target: int | None = 0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.poison_rate < 1.0:
            raise PlanError(f"poison rate must be in (0, 1), got {self.poison_rate}")
        if self.policy not in (ALL_TO_ONE, ALL_TO_ALL):
            raise PlanError(f"unknown relabeling policy {self.policy!r}")
        if self.policy == ALL_TO_ONE and self.target is None:
            raise PlanError("all-to-one poisoning needs a target class")
        if not self.triggers:
            raise PlanError("a poison plan needs at least one trigger")

    def count(self, n):
        return int(np.floor(self.poison_rate * n + 0.5))


def attack_target(labels, policy, target, classes):
    labels = np.asarray(labels)
    if policy == ALL_TO_ALL:
        return (labels + 1) % classes
    return np.full_like(labels, target)


def poison_dataset(data: LabeledDataset, plan: PoisonPlan) -> LabeledDataset:
    if data.poisoned.any():
        raise PlanError("dataset is already poisoned")
    n = len(data)
    k = plan.count(n)
    if k < 1:
        raise PlanError(f"poison rate {plan.poison_rate} selects no samples out of {n}")
    if plan.policy == ALL_TO_ONE and not 0 <= plan.target < data.classes:
        raise PlanError(f"target {plan.target} outside {data.classes} classes")
    rng = np.random.default_rng(plan.seed)
    chosen = rng.choice(n, size=k, replace=False)
    out = data.subset(np.arange(n))
    for trig, idx in zip(plan.triggers, np.array_split(chosen, len(plan.triggers))):
        out.images[idx] = apply_trigger(out.images[idx], trig)
        out.labels[idx] = attack_target(out.orig_labels[idx], plan.policy, plan.target, data.classes)
        out.poisoned[idx] = True
        out.trigger_names[idx] = trig.name
    return out


def triggered_testset(clean: LabeledDataset, spec: TriggerSpec, policy=ALL_TO_ONE, target=0,
                      include_target_class=False) -> LabeledDataset:
    """Trigger every sample and relabel it with the attack target.

    Under all-to-one, samples whose true class is the target are dropped unless
    ``include_target_class`` is set.
    """
    keep = np.arange(len(clean))
    if policy == ALL_TO_ONE and not include_target_class:
        keep = np.flatnonzero(clean.labels != target)
    src = clean.subset(keep)
    return LabeledDataset(apply_trigger(src.images, spec),
                          attack_target(src.labels, policy, target, clean.classes),
                          clean.classes, np.ones(len(keep), dtype=bool), src.labels.copy(),
                          np.full(len(keep), spec.name, dtype=object))


def write_manifest(path, data: LabeledDataset):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "orig_label", "new_label", "trigger_name"])
        for i in np.flatnonzero(data.poisoned):
            w.writerow([int(i), int(data.orig_labels[i]), int(data.labels[i]), data.trigger_names[i]])


def read_manifest(path):
    with open(path, newline="") as fh:
        return [{"index": int(r["index"]), "orig_label": int(r["orig_label"]),
                 "new_label": int(r["new_label"]), "trigger_name": r["trigger_name"]}
                for r in csv.DictReader(fh)]
