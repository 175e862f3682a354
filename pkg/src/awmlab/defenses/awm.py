"""Adversarial Weight Masking.

Each epoch alternates two phases on a soft weight mask ``m``:

1. trigger recovery: starting from a zero perturbation, ``inner_steps`` gradient
   steps *increase* the loss of ``f(clamp(x + delta); m * theta)``; the result is
   then rescaled once into the L1 ball of radius ``tau``;
2. mask update: ``inner_steps`` optimizer steps *decrease*
   ``alpha * L(clean) + beta * L(x + delta) + gamma * |m|_1`` in ``m``, clipping
   ``m`` to [0, 1] after every step.

The model parameters are never modified.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .. import tensor as T
from ..data import augment
from ..errors import NumericError
from ..models import MaskState, masked_forward
from ..optim import AdamState, adam_step, sgd_step
from ..tensor import Tensor

VARIANTS = ("full", "no_clip", "no_shrink", "nc_ns", "l2_reg", "l2_reg_nc")

ONE_SHOT_BATCH = 16


def batch_size_for(available, one_shot=False):
    """Batch size by available clean-data size: one-shot 16, 100-200 -> 32, 500+ -> 128."""
    if one_shot:
        return ONE_SHOT_BATCH
    if available >= 500:
        return 128
    if available >= 100:
        return 32
    return ONE_SHOT_BATCH


def scaled_tau(image_shape, base=1000.0):
    """Default L1 budget for a 32x32 image rescaled by spatial area."""
    h, w = image_shape[-2:]
    return base * (h * w) / (32 * 32)


@dataclass
class AWMConfig:
    alpha: float = 0.9
    beta: float = 0.1
    gamma: float = 1e-8
    tau: float | None = None          # None -> scaled_tau(image shape)
    epochs: int = 100
    inner_steps: int = 10
    eta1: float = 10.0
    eta2: float = 0.01
    batch_size: int | None = None     # None -> full batch when data is small, else 128
    decay_epoch: int = 50
    eta2_decayed: float = 0.001
    variant: str = "full"
    layer_restriction: tuple | None = None
    inner_direction: str = "ascent"   # ascent | paper_literal
    outer_optimizer: str = "adam"     # adam | sgd
    augment: bool = False
    delta_l2_weight: float = 1.0      # l2_reg_nc inner penalty
    weight_delta: float | None = None # bound for weight-level mask perturbation instead of a trigger
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown AWM variant {self.variant!r}")
        if self.inner_direction not in ("ascent", "paper_literal"):
            raise ValueError(f"unknown inner direction {self.inner_direction!r}")
        if self.alpha < 0 or self.beta < 0 or self.gamma < 0:
            raise ValueError("alpha, beta and gamma must be non-negative")
        if self.tau is not None and not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.inner_steps < 0 or self.epochs < 0:
            raise ValueError("epochs and inner_steps must be non-negative")
        if self.layer_restriction is not None:
            self.layer_restriction = tuple(self.layer_restriction)

    @property
    def clips(self):
        return self.variant in ("full", "no_shrink", "l2_reg")

    @property
    def shrinks(self):
        return self.variant in ("full", "no_clip", "l2_reg", "l2_reg_nc")

    def resolved_tau(self, image_shape):
        return scaled_tau(image_shape) if self.tau is None else self.tau

    def to_dict(self):
        d = asdict(self)
        if d["layer_restriction"] is not None:
            d["layer_restriction"] = list(d["layer_restriction"])
        return d


@dataclass
class TriggerEstimate:
    delta: np.ndarray
    l1_norm: float
    loss: float = float("nan")

    @classmethod
    def of(cls, delta, loss=float("nan")):
        return cls(delta, float(np.abs(delta).sum(dtype=np.float64)), loss)


@dataclass
class EpochRecord:
    epoch: int
    acc: float
    asr: dict
    m_l1: float
    delta_l1: float
    inner_loss: float
    outer_loss: float
    m_min: float
    m_max: float


@dataclass
class DefenseTrace:
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def trigger_names(self):
        names = []
        for r in self.records:
            for k in r.asr:
                if k not in names:
                    names.append(k)
        return names

    def header(self):
        return (["epoch", "acc"] + [f"asr_{n}" for n in self.trigger_names()]
                + ["m_l1", "delta_l1", "inner_loss", "outer_loss", "m_min", "m_max"])

    def rows(self):
        names = self.trigger_names()
        for r in self.records:
            yield ([r.epoch, r.acc] + [r.asr.get(n, float("nan")) for n in names]
                   + [r.m_l1, r.delta_l1, r.inner_loss, r.outer_loss, r.m_min, r.m_max])

    def write_csv(self, path):
        import csv
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.header())
            for row in self.rows():
                w.writerow([repr(v) if isinstance(v, float) else v for v in row])


class BatchSampler:
    """Fresh minibatch per call; the whole set when it fits in one batch."""

    def __init__(self, data, batch_size, rng, use_augment=False):
        self.data = data
        self.batch_size = batch_size
        self.rng = rng
        self.use_augment = use_augment

    def __call__(self):
        n = len(self.data)
        if n <= self.batch_size:
            x, y = self.data.images, self.data.labels
        else:
            idx = self.rng.choice(n, size=self.batch_size, replace=False)
            x, y = self.data.images[idx], self.data.labels[idx]
        if self.use_augment:
            x = augment(x, self.rng)
        return x, y


def _perturbed_input(model, x, delta_t):
    return T.clamp(T.add(Tensor(x, dtype=model.dtype), delta_t), 0.0, 1.0)


def l1_clip(delta, tau):
    norm = float(np.abs(delta).sum(dtype=np.float64))
    if norm <= tau or norm == 0.0:
        return delta
    return (delta * (tau / norm)).astype(delta.dtype)


def l2_clip(delta, tau):
    norm = float(np.sqrt(np.square(delta, dtype=np.float64).sum()))
    if norm <= tau or norm == 0.0:
        return delta
    return (delta * (tau / norm)).astype(delta.dtype)


def recover_trigger(model, mask: MaskState, sampler, cfg: AWMConfig, image_shape=None) -> TriggerEstimate:
    """Phase 1: universal perturbation that raises the masked model's loss."""
    shape = image_shape or model.spec.input_shape
    delta = np.zeros(shape, dtype=model.dtype)
    sign = 1.0 if cfg.inner_direction == "ascent" else -1.0
    mask_t = mask.tensors(model.dtype)
    loss_val = float("nan")
    for step in range(cfg.inner_steps):
        x, y = sampler()
        d = Tensor(delta, requires_grad=True)
        loss = T.cross_entropy(masked_forward(model, mask, _perturbed_input(model, x, d), mask_t), y)
        objective = loss
        if cfg.variant == "l2_reg_nc" and cfg.delta_l2_weight:
            objective = T.sub(loss, T.mul(T.l2_norm(d), cfg.delta_l2_weight))
        objective.backward()
        delta = (delta + sign * cfg.eta1 * d.grad).astype(model.dtype)
        loss_val = loss.item()
        if not np.all(np.isfinite(delta)):
            raise NumericError(f"trigger estimate became non-finite at inner step {step}")
    tau = cfg.resolved_tau(shape)
    if cfg.clips and math.isfinite(tau):
        delta = l2_clip(delta, tau) if cfg.variant == "l2_reg" else l1_clip(delta, tau)
    return TriggerEstimate.of(delta, loss_val)


def _restricted(mask: MaskState, cfg: AWMConfig):
    """Boolean vector of mask entries the defense may change."""
    if cfg.layer_restriction is None:
        return None
    free = np.zeros(len(mask), dtype=bool)
    for li, a, b, _ in mask.layout:
        if li in cfg.layer_restriction:
            free[a:b] = True
    return free


def outer_lr(cfg: AWMConfig, epoch):
    return cfg.eta2 if epoch < cfg.decay_epoch else cfg.eta2_decayed


def update_mask(model, mask: MaskState, trigger: TriggerEstimate, sampler, cfg: AWMConfig,
                state: AdamState | None = None, lr=None, weight_delta=None, stats=None):
    """Phase 2: descend the outer objective in ``mask`` only. Mutates ``mask``."""
    lr = cfg.eta2 if lr is None else lr
    if state is None:
        state = AdamState.zeros(len(mask))
    free = _restricted(mask, cfg)
    sign = 1.0 if cfg.inner_direction == "ascent" else -1.0
    gamma = cfg.gamma if cfg.shrinks else 0.0
    delta_t = Tensor(trigger.delta, dtype=model.dtype) if trigger is not None else None
    last = float("nan")
    for _ in range(cfg.inner_steps):
        x, y = sampler()
        mt = mask.tensors(model.dtype, requires_grad=True)
        clean_loss = T.cross_entropy(masked_forward(model, mask, x, mt), y)
        if weight_delta is not None:
            wd = {li: T.add(t, Tensor(weight_delta[a:b].reshape(shape), dtype=model.dtype))
                  for (li, a, b, shape), t in zip(mask.layout, mt.values())}
            adv_loss = T.cross_entropy(model.forward(x, mask=wd), y)
        else:
            adv_loss = T.cross_entropy(
                masked_forward(model, mask, _perturbed_input(model, x, delta_t), mt), y)
        loss = T.add(T.mul(clean_loss, cfg.alpha), T.mul(adv_loss, cfg.beta))
        loss.backward()
        grad = mask.gather_grad(mt)
        reg = 0.0
        if cfg.shrinks:
            grad = grad + gamma * np.sign(mask.values)
            reg = gamma * mask.l1()
        last = loss.item() + reg
        if not np.isfinite(last):
            raise NumericError("non-finite outer loss")
        if free is not None:
            grad = np.where(free, grad, 0.0)
        if cfg.outer_optimizer == "adam":
            new, state = adam_step(state, mask.values, sign * grad, lr)
        else:
            new = sgd_step(mask.values, sign * grad, lr)
        if free is not None:
            new = np.where(free, new, mask.values)
        mask.values = new
        mask.clip_()
        if stats is not None:
            stats["m_min"] = min(stats.get("m_min", 1.0), float(mask.values.min(initial=1.0)))
            stats["m_max"] = max(stats.get("m_max", 0.0), float(mask.values.max(initial=0.0)))
    return mask, state, last


def _weight_perturbation(model, mask, sampler, cfg, rng):
    """Bounded weight-level perturbation of the mask that raises the loss."""
    eps = cfg.weight_delta
    delta = rng.uniform(-eps, eps, size=len(mask))
    step = eps / max(cfg.inner_steps, 1)
    loss_val = float("nan")
    for _ in range(cfg.inner_steps):
        x, y = sampler()
        mt = mask.tensors(model.dtype, requires_grad=True)
        wd = {li: T.add(t, Tensor(delta[a:b].reshape(shape), dtype=model.dtype))
              for (li, a, b, shape), t in zip(mask.layout, mt.values())}
        loss = T.cross_entropy(model.forward(x, mask=wd), y)
        loss.backward()
        delta = np.clip(delta + step * np.sign(mask.gather_grad(mt)), -eps, eps)
        loss_val = loss.item()
    return delta, loss_val


def awm_defend(model, clean_data, cfg: AWMConfig, monitor=None, eval_every=1):
    """Learn a soft weight mask on ``clean_data``; returns (mask, trace).

    ``monitor`` is an optional callable ``mask -> (acc, {trigger: asr})`` run every
    ``eval_every`` epochs and on the final epoch.
    """
    if len(clean_data) == 0:
        raise ValueError("AWM needs at least one clean sample")
    rng = np.random.default_rng(cfg.seed)
    bs = cfg.batch_size or batch_size_for(len(clean_data))
    sampler = BatchSampler(clean_data, bs, rng, cfg.augment)
    mask = model.new_mask()
    state = AdamState.zeros(len(mask))
    trace = DefenseTrace()
    for epoch in range(cfg.epochs):
        stats = {}
        if cfg.weight_delta is not None:
            wdelta, inner_loss = _weight_perturbation(model, mask, sampler, cfg, rng)
            trigger = TriggerEstimate(np.zeros(model.spec.input_shape, model.dtype), 0.0, inner_loss)
        else:
            wdelta = None
            trigger = recover_trigger(model, mask, sampler, cfg)
        mask, state, outer_loss = update_mask(model, mask, trigger, sampler, cfg, state,
                                              lr=outer_lr(cfg, epoch), weight_delta=wdelta, stats=stats)
        acc, asr = float("nan"), {}
        if monitor is not None and ((epoch + 1) % eval_every == 0 or epoch == cfg.epochs - 1):
            acc, asr = monitor(mask)
        trace.records.append(EpochRecord(
            epoch, acc, asr, mask.l1(), trigger.l1_norm, trigger.loss, outer_loss,
            stats.get("m_min", float(mask.values.min(initial=1.0))),
            stats.get("m_max", float(mask.values.max(initial=0.0)))))
    return mask, trace


def variant_config(base: AWMConfig, variant: str) -> AWMConfig:
    return replace(base, variant=variant)
