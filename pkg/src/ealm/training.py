"""Shared optimisation loop: gradient accumulation, schedule, freeze checks."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from .errors import FreezeContractError, NumericError
from .numerics.optim import AdamW, LrSchedule, lr_at
from .numerics.tensor import Parameter, Tensor


@dataclass
class TrainConfig:
    epochs: int = 3
    batch_size: int = 32
    grad_accum: int = 2
    weight_decay: float = 0.1
    steps: int = 0  # sampling-based stages (entity models) count micro-batches instead of epochs


def seed_streams(seed: int, n: int) -> list[np.random.Generator]:
    """Independent generators derived from one seed (init, shuffling, dropout, ...)."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def check_frozen(frozen: dict[str, Parameter]) -> None:
    for name, p in frozen.items():
        if p.grad is not None or p.requires_grad:
            raise FreezeContractError(f"gradient reached frozen tensor {name}")


def run_training(trainable: dict[str, Parameter], frozen: dict[str, Parameter],
                 batches: Iterable, loss_fn: Callable[[object], tuple[Tensor, int]],
                 schedule: LrSchedule, tc: TrainConfig) -> list[float]:
    """Optimise ``trainable`` over ``batches``; returns the per-micro-batch loss trace.

    ``loss_fn(batch)`` returns ``(mean loss, number of target tokens)``. The
    schedule advances by target tokens. ``frozen`` tensors are checked after
    every backward pass.
    """
    check_frozen(frozen)
    opt = AdamW(trainable, weight_decay=tc.weight_decay)
    tokens_seen = 0
    losses: list[float] = []
    pending = 0
    for batch in batches:
        loss, n_tokens = loss_fn(batch)
        value = float(loss.data)
        if not math.isfinite(value):
            raise NumericError(f"non-finite training loss at micro-batch {len(losses)}")
        loss.backward()
        check_frozen(frozen)
        losses.append(value)
        tokens_seen += n_tokens
        pending += 1
        if pending == tc.grad_accum:
            opt.step(max(lr_at(schedule, tokens_seen), 1e-12))
            opt.zero_grad()
            pending = 0
    if pending:
        opt.step(max(lr_at(schedule, tokens_seen), 1e-12))
        opt.zero_grad()
    return losses


def epoch_batches(n_items: int, batch_size: int, epochs: int, rng: np.random.Generator):
    """Index arrays for shuffled mini-batches over several epochs."""
    for _ in range(epochs):
        order = rng.permutation(n_items)
        for i in range(0, n_items, batch_size):
            yield order[i:i + batch_size]
