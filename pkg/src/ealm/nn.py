"""Layers shared by the pre-trained LM, the entity LMs and the fusion layer.

Modules discover parameters by walking their attributes, so a model's
``parameters()`` dict is ordered by construction order and its names match
the checkpoint tensor names.
"""
from __future__ import annotations

import math

import numpy as np

from .numerics import functional as F
from .numerics.tensor import Parameter, Tensor, gelu

NEG_INF = -1e9
INIT_STD = 0.02


class Module:
    def parameters(self, prefix: str = "") -> dict[str, Parameter]:
        out: dict[str, Parameter] = {}
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                out[name] = value
            elif isinstance(value, Module):
                out.update(value.parameters(name + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.parameters(f"{name}.{i}."))
        for name, p in out.items():
            p.name = name
        return out

    def trainable(self) -> dict[str, Parameter]:
        return {n: p for n, p in self.parameters().items() if p.requires_grad}

    def freeze(self) -> None:
        for p in self.parameters().values():
            p.requires_grad = False
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {n: p.data for n, p in self.parameters().items()}

    def load_arrays(self, arrays: dict[str, np.ndarray], strict: bool = True) -> None:
        params = self.parameters()
        if strict:
            missing = set(params) - set(arrays)
            extra = set(arrays) - set(params)
            if missing or extra:
                raise KeyError(f"tensor name mismatch; missing={sorted(missing)[:5]} extra={sorted(extra)[:5]}")
        for name, p in params.items():
            if name in arrays:
                arr = arrays[name]
                if arr.shape != p.shape:
                    raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
                p.data = arr.astype(p.dtype, copy=True)


def normal_init(rng: np.random.Generator, shape, dtype, std: float = INIT_STD) -> np.ndarray:
    return rng.normal(0.0, std, size=shape).astype(dtype)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng, dtype, bias: bool = True):
        self.weight = Parameter(normal_init(rng, (d_in, d_out), dtype))
        self.bias = Parameter(np.zeros(d_out, dtype=dtype)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d: int, dtype):
        self.gain = Parameter(np.ones(d, dtype=dtype))
        self.bias = Parameter(np.zeros(d, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.gain, self.bias)


class SelfAttention(Module):
    """Multi-head self-attention with an additive mask and optional per-head bias."""

    def __init__(self, d_model: int, n_heads: int, rng, dtype):
        if d_model % n_heads:
            raise ValueError("d_model must be divisible by the number of heads")
        self.n_heads = n_heads
        self.qkv = Linear(d_model, 3 * d_model, rng, dtype)
        self.proj = Linear(d_model, d_model, rng, dtype)

    def __call__(self, x: Tensor, mask_bias: np.ndarray, head_bias: Tensor | None = None,
                 rng=None, p_drop: float = 0.0) -> Tensor:
        *lead, t, d = x.shape
        h = self.n_heads
        dh = d // h
        qkv = self.qkv(x).reshape(*lead, t, 3, h, dh)
        nl = len(lead)
        # -> (3, *lead, h, t, dh)
        qkv = qkv.transpose(nl + 1, *range(nl), nl + 2, nl, nl + 3)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(dh))
        if head_bias is not None:
            scores = scores + head_bias
        scores = F.add_constant(scores, mask_bias)
        att = F.dropout(F.softmax(scores, axis=-1), p_drop, rng)
        # leading dims may have grown by broadcasting against the mask
        out = (att @ v).swapaxes(-2, -3)
        return self.proj(out.reshape(*out.shape[:-2], d))


class MLP(Module):
    def __init__(self, d_in: int, d_hidden: int, d_out: int, rng, dtype):
        self.fc1 = Linear(d_in, d_hidden, rng, dtype)
        self.fc2 = Linear(d_hidden, d_out, rng, dtype)

    def __call__(self, x: Tensor, rng=None, p_drop: float = 0.0) -> Tensor:
        return self.fc2(F.dropout(gelu(self.fc1(x)), p_drop, rng))


class DecoderBlock(Module):
    """Pre-norm transformer decoder block."""

    def __init__(self, d_model: int, d_ff: int, n_heads: int, rng, dtype):
        self.ln1 = LayerNorm(d_model, dtype)
        self.attn = SelfAttention(d_model, n_heads, rng, dtype)
        self.ln2 = LayerNorm(d_model, dtype)
        self.ff = MLP(d_model, d_ff, d_model, rng, dtype)

    def __call__(self, x: Tensor, mask_bias: np.ndarray, head_bias: Tensor | None = None,
                 rng=None, p_drop: float = 0.0) -> Tensor:
        a = self.attn(self.ln1(x), mask_bias, head_bias, rng, p_drop)
        x = x + F.dropout(a, p_drop, rng)
        f = self.ff(self.ln2(x), rng, p_drop)
        return x + F.dropout(f, p_drop, rng)


def causal_mask_bias(t: int, dtype) -> np.ndarray:
    allowed = np.tril(np.ones((t, t), dtype=bool))
    return np.where(allowed, 0.0, NEG_INF).astype(dtype)
