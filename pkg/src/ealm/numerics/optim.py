"""AdamW with decoupled weight decay and the warmup / step-decay schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, UsageError


@dataclass
class LrSchedule:
    lr_start: float
    lr_max: float
    lr_end: float
    warmup_tokens: int
    decay_interval_tokens: int
    decay_factor: float = 0.9

    def __post_init__(self):
        if min(self.lr_start, self.lr_max, self.lr_end) < 0:
            raise ConfigError("learning rates must be non-negative")
        if self.lr_end > self.lr_max:
            raise ConfigError("lr_end must not exceed lr_max")
        if self.warmup_tokens < 0 or self.decay_interval_tokens < 0:
            raise ConfigError("token counts must be non-negative")
        if not 0.0 < self.decay_factor <= 1.0:
            raise ConfigError("decay_factor must lie in (0, 1]")


def lr_at(schedule: LrSchedule, tokens_seen: int) -> float:
    """Learning rate after ``tokens_seen`` training tokens.

    Linear ramp from ``lr_start`` to ``lr_max`` over the warmup, then
    ``lr_max * decay_factor ** n_intervals`` floored at ``lr_end``. A decay
    interval of 0 disables the decay.
    """
    s = schedule
    if tokens_seen < s.warmup_tokens:
        frac = tokens_seen / s.warmup_tokens
        return s.lr_start + (s.lr_max - s.lr_start) * frac
    if s.decay_interval_tokens == 0:
        return s.lr_max
    n = (tokens_seen - s.warmup_tokens) // s.decay_interval_tokens
    return max(s.lr_max * s.decay_factor ** n, s.lr_end)


@dataclass
class OptimizerState:
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.1
    step: int = 0
    exp_avg: dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
               state: OptimizerState, lr: float, decay_mask: dict[str, bool] | None = None) -> None:
    """One in-place AdamW update of ``params``.

    ``decay_mask[name]`` switches weight decay off for individual tensors
    (layer-norm gains, biases); missing names are decayed.
    """
    if lr <= 0:
        raise UsageError("lr must be positive")
    b1, b2 = state.betas
    state.step += 1
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise UsageError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = state.exp_avg.get(name)
        if m is None:
            m = state.exp_avg[name] = np.zeros_like(p)
            state.exp_avg_sq[name] = np.zeros_like(p)
        v = state.exp_avg_sq[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if state.weight_decay and (decay_mask is None or decay_mask.get(name, True)):
            p *= 1.0 - lr * state.weight_decay
        denom = np.sqrt(v) / math.sqrt(bc2) + state.eps
        p -= (lr / bc1) * (m / denom)


class AdamW:
    """Stateful wrapper over ``adamw_step`` for a dict of named parameters."""

    def __init__(self, params: dict, weight_decay: float = 0.1, betas=(0.9, 0.999), eps: float = 1e-8):
        frozen = [n for n, p in params.items() if not p.requires_grad]
        if frozen:
            raise UsageError(f"frozen tensors passed to the optimizer: {frozen[:3]}")
        self.params = params
        self.state = OptimizerState(betas=tuple(betas), eps=eps, weight_decay=weight_decay)
        # decay matrices only; vectors are gains and biases
        self.decay_mask = {n: p.ndim >= 2 for n, p in params.items()}

    def step(self, lr: float) -> None:
        arrays = {n: p.data for n, p in self.params.items()}
        grads = {n: p.grad for n, p in self.params.items() if p.grad is not None}
        adamw_step(arrays, grads, self.state, lr, self.decay_mask)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None
