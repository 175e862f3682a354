"""Plain SGD and bias-corrected Adam over flat parameter vectors."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, NumericError


def _check_aligned(params, grads):
    if np.shape(params) != np.shape(grads):
        raise DimensionError(f"parameter shape {np.shape(params)} vs gradient shape {np.shape(grads)}")


def _check_finite(grads, names=None, sizes=None):
    bad = ~np.isfinite(grads)
    if not bad.any():
        return
    where = int(np.flatnonzero(bad.reshape(-1))[0])
    label = f"entry {where}"
    if names is not None and sizes is not None:
        offsets = np.cumsum(sizes)
        owner = int(np.searchsorted(offsets, where, side="right"))
        label = f"parameter {names[owner]!r}"
    raise NumericError(f"non-finite gradient in {label}")


def sgd_step(params, grads, lr):
    """Return ``params - lr * grads``."""
    params = np.asarray(params)
    grads = np.asarray(grads)
    _check_aligned(params, grads)
    return (params - lr * grads).astype(params.dtype, copy=False)


@dataclass
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon_stab: float = 1e-8
    names: list | None = field(default=None, repr=False)
    sizes: list | None = field(default=None, repr=False)

    @classmethod
    def zeros(cls, dim, beta1=0.9, beta2=0.999, epsilon_stab=1e-8, names=None, sizes=None):
        return cls(np.zeros(dim, np.float64), np.zeros(dim, np.float64), 0,
                   beta1, beta2, epsilon_stab, names, sizes)

    @classmethod
    def for_params(cls, params, **kw):
        """Build a zero state aligned to a ``ParamSet``."""
        entries = list(params)
        return cls.zeros(params.total_dim, names=[n for n, _ in entries],
                         sizes=[t.size for _, t in entries], **kw)


def adam_step(state: AdamState, params, grads, lr):
    """One bias-corrected Adam update. Mutates and returns ``state``."""
    params = np.asarray(params)
    grads = np.asarray(grads)
    _check_aligned(params, grads)
    if grads.size != state.first_moment.size:
        raise DimensionError(f"Adam state holds {state.first_moment.size} entries, got {grads.size}")
    if not (0.0 < state.beta1 < 1.0 and 0.0 < state.beta2 < 1.0):
        raise ValueError("beta1 and beta2 must lie in (0, 1)")
    _check_finite(grads, state.names, state.sizes)

    g = grads.reshape(-1).astype(np.float64)
    state.step_count += 1
    t = state.step_count
    state.first_moment = state.beta1 * state.first_moment + (1.0 - state.beta1) * g
    state.second_moment = state.beta2 * state.second_moment + (1.0 - state.beta2) * g * g
    m_hat = state.first_moment / (1.0 - state.beta1 ** t)
    v_hat = state.second_moment / (1.0 - state.beta2 ** t)
    update = lr * m_hat / (np.sqrt(v_hat) + state.epsilon_stab)
    new = params.reshape(-1).astype(np.float64) - update
    return new.reshape(params.shape).astype(params.dtype), state
