"""Entity contexts: the ``<s>``-anchored suffixes an entity model may condition on."""
from __future__ import annotations

from typing import Sequence

from ..errors import UsageError


def enumerate_entity_contexts(tokens: Sequence, t: int, k: int) -> list[list]:
    """Candidate contexts for predicting ``tokens[t]``.

    Entry ``l`` is ``[w_0, w_{t-l}, ..., w_{t-1}]`` for ``l = 0..min(k, t-1)``;
    longer suffixes would reach back into ``w_0`` and collapse onto the
    longest one, so they are not repeated.
    """
    if not 1 <= t <= len(tokens):
        raise UsageError(f"t={t} outside [1, {len(tokens)}]")
    if k < 0:
        raise UsageError("k must be non-negative")
    w0 = tokens[0]
    return [[w0, *tokens[t - l:t]] for l in range(min(k, t - 1) + 1)]


def context_lengths(t: int, k: int) -> list[int]:
    """Effective suffix length behind each of the ``k + 1`` entity-model rows at step ``t``."""
    return [min(l, t - 1) for l in range(k + 1)]
