"""Clean accuracy, attack success rate and mask statistics."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .attacks import ALL_TO_ONE, apply_trigger, attack_target, triggered_testset


def accuracy(model, dataset, mask=None):
    if len(dataset) == 0:
        raise ValueError("accuracy of an empty dataset is undefined")
    return float(np.mean(model.predict(dataset.images, mask) == dataset.labels))


def attack_success_rate(model, triggered, mask=None):
    """Fraction of a triggered set predicted as its (attack-target) label."""
    if len(triggered) == 0:
        raise ValueError("attack success rate of an empty set is undefined")
    return float(np.mean(model.predict(triggered.images, mask) == triggered.labels))


@dataclass
class Attack:
    trigger: object
    policy: str = ALL_TO_ONE
    target: int = 0

    @property
    def name(self):
        return self.trigger.name


def asr_pair(model, clean, attack: Attack, mask=None):
    """(inclusive, exclusive) ASR; exclusive drops true-target samples under all-to-one."""
    trig = triggered_testset(clean, attack.trigger, attack.policy, attack.target, include_target_class=True)
    hits = model.predict(trig.images, mask) == trig.labels
    inclusive = float(hits.mean())
    keep = trig.orig_labels != trig.labels
    exclusive = float(hits[keep].mean()) if keep.any() else 0.0
    return inclusive, exclusive


def removal_success(asr, classes):
    if classes < 2:
        raise ValueError("need at least two classes")
    return bool(asr < 1.5 / classes)


@dataclass
class EvalReport:
    acc: float
    asr_per_trigger: dict
    asr_exclusive: dict
    asr_all: float
    removal_success: dict
    n_eval: int
    classes: int

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def csv_row(self):
        row = {"acc": self.acc, "asr_all": self.asr_all, "n_eval": self.n_eval}
        for k, v in sorted(self.asr_per_trigger.items()):
            row[f"asr_{k}"] = v
            row[f"asr_excl_{k}"] = self.asr_exclusive[k]
            row[f"removed_{k}"] = int(self.removal_success[k])
        return row


def evaluate(model, clean, attacks, mask=None) -> EvalReport:
    """ACC on ``clean`` plus per-trigger and any-trigger (union) ASR."""
    acc = accuracy(model, clean, mask)
    per, excl, removed = {}, {}, {}
    union = np.zeros(len(clean), dtype=bool)
    for atk in attacks:
        targets = attack_target(clean.labels, atk.policy, atk.target, clean.classes)
        hits = model.predict(apply_trigger(clean.images, atk.trigger), mask) == targets
        union |= hits
        per[atk.name] = float(hits.mean())
        keep = clean.labels != targets
        excl[atk.name] = float(hits[keep].mean()) if keep.any() else 0.0
        removed[atk.name] = removal_success(per[atk.name], clean.classes)
    asr_all = float(union.mean()) if attacks else 0.0
    return EvalReport(acc, per, excl, asr_all, removed, len(clean), clean.classes)


@dataclass
class MaskHistogram:
    edges: np.ndarray
    counts: dict = field(default_factory=dict)

    def percentages(self):
        return {li: 100.0 * c / c.sum() if c.sum() else c.astype(float) for li, c in self.counts.items()}

    def rows(self):
        pct = self.percentages()
        return [[li] + [float(v) for v in pct[li]] for li in self.counts]


def mask_histogram(mask, bins=10):
    """Per-layer counts over equal bins on [0, 1]; bins are [a, b) except the last, [a, 1]."""
    if bins < 2:
        raise ValueError("need at least two bins")
    edges = np.linspace(0.0, 1.0, bins + 1)
    counts = {}
    for li, a, b, _ in mask.layout:
        vals = mask.values[a:b]
        idx = np.clip(np.searchsorted(edges, vals, side="right") - 1, 0, bins - 1)
        counts[li] = np.bincount(idx, minlength=bins)
    return MaskHistogram(edges, counts)
