"""Fused differentiable kernels: softmax, losses, layer norm, embedding, dropout."""
from __future__ import annotations

import numpy as np

from ..errors import EmptyBatchError, NumericError, UsageError
from .tensor import Tensor, ensure_tensor, make_result, unbroadcast

PROB_CLAMP = 1e-7


def _require_finite(x: Tensor, op: str) -> None:
    if not np.isfinite(x.data).all():
        raise NumericError(f"{op}: non-finite input in tensor {x.name or '<unnamed>'}")


def _stable_softmax(x: np.ndarray, axis: int) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    _require_finite(x, "softmax")
    out = _stable_softmax(x.data, axis)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    _require_finite(x, "log_softmax")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_result(out, (x,), backward)


def _prepare_targets(targets, mask, lead_shape):
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != lead_shape:
        raise UsageError(f"targets shape {targets.shape} does not match {lead_shape}")
    if mask is None:
        mask = np.ones(lead_shape, dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise EmptyBatchError("every position is masked")
    return targets, mask, count


def cross_entropy(logits: Tensor, targets, mask=None, reduction: str = "mean") -> Tensor:
    """Negative log-likelihood of ``targets`` under ``softmax(logits)``.

    ``mask`` marks positions that count (True) versus padding (False).
    ``reduction`` is ``"mean"`` over unmasked positions or ``"sum"``.
    """
    _require_finite(logits, "cross_entropy")
    vocab = logits.shape[-1]
    targets, mask, count = _prepare_targets(targets, mask, logits.shape[:-1])
    if (targets[mask] < 0).any() or (targets[mask] >= vocab).any():
        raise UsageError("target id outside vocabulary range")
    safe_t = np.where(mask, targets, 0)
    x = logits.data
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    z = e.sum(axis=-1, keepdims=True)
    picked = np.take_along_axis(shifted, safe_t[..., None], axis=-1)[..., 0]
    nll = (np.log(z[..., 0]) - picked) * mask
    scale = 1.0 / count if reduction == "mean" else 1.0
    loss = np.asarray(nll.sum() * scale, dtype=x.dtype)

    def backward(g):
        p = e / z
        np.put_along_axis(p, safe_t[..., None], np.take_along_axis(p, safe_t[..., None], -1) - 1.0, -1)
        return (p * (mask[..., None] * (g * scale)).astype(x.dtype),)

    return make_result(loss, (logits,), backward)


def nll_from_probs(probs: Tensor, targets, mask=None) -> Tensor:
    """Mean NLL from a probability tensor; probabilities are clamped to [1e-7, 1 - 1e-7]."""
    _require_finite(probs, "nll_from_probs")
    targets, mask, count = _prepare_targets(targets, mask, probs.shape[:-1])
    safe_t = np.where(mask, targets, 0)
    picked = np.take_along_axis(probs.data, safe_t[..., None], axis=-1)[..., 0]
    clamped = np.clip(picked, PROB_CLAMP, 1.0 - PROB_CLAMP)
    loss = np.asarray(-(np.log(clamped) * mask).sum() / count, dtype=probs.dtype)

    def backward(g):
        inside = (picked > PROB_CLAMP) & (picked < 1.0 - PROB_CLAMP)
        d = np.where(inside & mask, -g / (clamped * count), 0.0)
        full = np.zeros_like(probs.data)
        np.put_along_axis(full, safe_t[..., None], d[..., None].astype(full.dtype), -1)
        return (full,)

    return make_result(loss, (probs,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gain.data + bias.data
    d = xd.shape[-1]

    def backward(g):
        gx = gg = gb = None
        if gain.requires_grad:
            gg = (g * xhat).reshape(-1, d).sum(axis=0)
        if bias.requires_grad:
            gb = g.reshape(-1, d).sum(axis=0)
        if x.requires_grad:
            gh = g * gain.data
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return make_result(out, (x, gain, bias), backward)


def embedding(weight: Tensor, ids) -> Tensor:
    """Gather rows of ``weight`` by integer ``ids`` of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise UsageError("token id outside embedding table")
    wshape = weight.shape

    def backward(g):
        full = np.zeros(wshape, dtype=g.dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, wshape[-1]))
        return (full,)

    return make_result(weight.data[ids], (weight,), backward)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout. ``rng=None`` means evaluation mode (identity)."""
    if rng is None or p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return make_result(x.data * keep, (x,), lambda g: (g * keep,))


def add_constant(x: Tensor, additive: np.ndarray) -> Tensor:
    """Add a constant (non-differentiable) array, e.g. an attention mask bias."""
    return make_result(x.data + additive, (x,), lambda g: (unbroadcast(g, x.shape),))


def weighted_sum(weights: Tensor, values: Tensor) -> Tensor:
    """``sum_l weights[..., l] * values[..., l, :]`` over the second-to-last axis of ``values``."""
    weights = ensure_tensor(weights)
    w, v = weights.data, values.data
    out = np.einsum("...l,...ld->...d", w, v)

    def backward(g):
        gw = gv = None
        if weights.requires_grad:
            gw = unbroadcast(np.einsum("...d,...ld->...l", g, v), w.shape)
        if values.requires_grad:
            gv = unbroadcast(w[..., :, None] * g[..., None, :], v.shape)
        return gw, gv

    return make_result(out, (weights, values), backward)
