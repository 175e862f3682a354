"""Adversarial Neuron Pruning baseline.

Every non-classifier neuron gets a multiplicative weight factor ``m + delta``
and a bias factor ``1 + xi``; ``delta, xi`` live in ``[-eps, eps]``. The neuron
mask ``m`` is relaxed to [0, 1] and trained to keep the loss low both as-is and
under the worst-case perturbation. Neurons whose mask falls below a threshold
are then pruned by zeroing their weights (the BN scale when a BN layer follows).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .. import tensor as T
from ..errors import NumericError
from ..models import Model, NeuronPerturbation, neuron_tensors
from .awm import BatchSampler


@dataclass
class ANPConfig:
    epsilon: float = 0.4
    alpha_anp: float = 0.2
    beta_anp: float = 0.8
    epochs: int = 200          # outer mask steps
    inner_steps: int = 1
    lr: float = 0.2
    momentum: float = 0.9
    batch_size: int = 128
    prune_thresholds: list = field(default_factory=lambda: [round(0.05 * i, 2) for i in range(20)])
    seed: int = 0

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.alpha_anp < 0 or self.beta_anp < 0:
            raise ValueError("alpha_anp and beta_anp must be non-negative")
        self.prune_thresholds = [float(t) for t in self.prune_thresholds]
        if any(not 0.0 <= t <= 1.0 for t in self.prune_thresholds):
            raise ValueError("prune thresholds must lie in [0, 1]")

    def to_dict(self):
        return asdict(self)


def _site_grads(model, leaves, key):
    out = np.zeros(model.neuron_sites[-1].stop if model.neuron_sites else 0)
    for s in model.neuron_sites:
        g = leaves[key][s.site].grad
        if g is not None:
            out[s.start:s.stop] = g
    return out


def _perturbed_loss(model, pert, neuron_mask, x, y, requires_grad):
    sites, leaves = neuron_tensors(model, pert, neuron_mask, requires_grad=requires_grad)
    return T.cross_entropy(model.forward(x, neuron=sites), y), leaves


def _ascend(model, pert, neuron_mask, sampler, steps):
    step = pert.epsilon / max(steps, 1)
    for _ in range(steps):
        x, y = sampler()
        loss, leaves = _perturbed_loss(model, pert, neuron_mask, x, y, True)
        loss.backward()
        pert.delta = pert.delta + step * np.sign(_site_grads(model, leaves, "delta"))
        pert.xi = pert.xi + step * np.sign(_site_grads(model, leaves, "xi"))
        pert.project_()
    return pert


def anp_perturb(model: Model, data, epsilon, steps=10, batch_size=128, seed=0, neuron_mask=None):
    """Neuron perturbation in [-epsilon, epsilon] that raises the loss on ``data``."""
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    pert = NeuronPerturbation.zeros(model.neuron_sites, epsilon)
    sampler = BatchSampler(data, batch_size, np.random.default_rng(seed))
    if neuron_mask is None:
        neuron_mask = np.ones(pert.neuron_count)
    return _ascend(model, pert, neuron_mask, sampler, steps)


@dataclass
class ANPResult:
    neuron_mask: np.ndarray
    thresholds: list
    pruned: list           # one Model per threshold
    losses: list

    def pruned_counts(self):
        return [int((self.neuron_mask < t).sum()) for t in self.thresholds]


def prune_model(model: Model, neuron_mask, threshold) -> Model:
    """Copy of ``model`` with every neuron whose mask is below ``threshold`` switched off."""
    out = model.copy()
    for s in model.neuron_sites:
        off = np.flatnonzero(np.asarray(neuron_mask[s.start:s.stop]) < threshold)
        if off.size == 0:
            continue
        name = f"{s.site}.gamma" if s.site != s.host else f"{s.host}.weight"
        p = out.params[name]
        p.data = p.data.copy()
        p.data[off] = 0.0
    return out


def anp_defend(model: Model, data, cfg: ANPConfig) -> ANPResult:
    """Optimize the relaxed neuron mask, then prune at every configured threshold."""
    if len(data) == 0:
        raise ValueError("ANP needs at least one clean sample")
    rng = np.random.default_rng(cfg.seed)
    sampler = BatchSampler(data, cfg.batch_size, rng)
    n = model.neuron_sites[-1].stop if model.neuron_sites else 0
    mask = np.ones(n)
    velocity = np.zeros(n)
    zero = NeuronPerturbation.zeros(model.neuron_sites, cfg.epsilon)
    losses = []
    for step in range(cfg.epochs):
        pert = NeuronPerturbation.zeros(model.neuron_sites, cfg.epsilon)
        pert.delta = rng.uniform(-cfg.epsilon, cfg.epsilon, n)
        pert.xi = rng.uniform(-cfg.epsilon, cfg.epsilon, n)
        pert = _ascend(model, pert, mask, sampler, cfg.inner_steps)

        x, y = sampler()
        nat, nat_leaves = _perturbed_loss(model, zero, mask, x, y, True)
        rob, rob_leaves = _perturbed_loss(model, pert, mask, x, y, True)
        loss = T.add(T.mul(nat, cfg.alpha_anp), T.mul(rob, cfg.beta_anp))
        loss.backward()
        if not np.isfinite(loss.item()):
            raise NumericError(f"non-finite ANP loss at step {step}")
        grad = _site_grads(model, nat_leaves, "mask") + _site_grads(model, rob_leaves, "mask")
        velocity = cfg.momentum * velocity + grad
        mask = np.clip(mask - cfg.lr * velocity, 0.0, 1.0)
        losses.append(loss.item())
    pruned = [prune_model(model, mask, t) for t in cfg.prune_thresholds]
    return ANPResult(mask, list(cfg.prune_thresholds), pruned, losses)


def select_threshold(rows, poisoned_acc, max_drop=0.15):
    """Pick the sweep row an ANP user would report.

    ``rows`` are (threshold, acc, asr). Among thresholds that keep accuracy within
    ``max_drop`` of the poisoned model, the one with lowest ASR wins; if none do,
    the most accurate threshold is returned.
    """
    rows = list(rows)
    if not rows:
        raise ValueError("empty threshold sweep")
    ok = [r for r in rows if r[1] >= poisoned_acc - max_drop]
    if ok:
        return min(ok, key=lambda r: (r[2], -r[1], r[0]))
    return max(rows, key=lambda r: (r[1], -r[2], -r[0]))
