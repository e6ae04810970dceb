"""Global-attention transformer decoder with absolute positions (the pre-trained LM)."""
from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import nn
from .checkpoint import Checkpoint, decode_config, encode_config, tensors_hash
from .errors import ConfigError
from .numerics import functional as F
from .numerics.optim import LrSchedule
from .numerics.tensor import Parameter, Tensor, no_grad
from .textdata.corpus import EncodedUtterance, pad_batch
from .training import TrainConfig, epoch_batches, run_training, seed_streams


class TruncationWarning(UserWarning):
    pass


@dataclass
class PretrainedConfig:
    vocab_size: int
    n_layers: int = 2
    d_model: int = 64
    d_ff: int = 128
    n_heads: int = 4
    dropout: float = 0.1
    max_positions: int = 32
    dtype: str = "float32"

    def validate(self) -> None:
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must be divisible by n_heads")
        if min(self.vocab_size, self.n_layers, self.d_model, self.d_ff, self.max_positions) <= 0:
            raise ConfigError("model sizes must be positive")


class PretrainedLM(nn.Module):
    def __init__(self, config: PretrainedConfig, rng: np.random.Generator):
        config.validate()
        self.config = config
        dt = np.dtype(config.dtype)
        d = config.d_model
        self.embed = Parameter(nn.normal_init(rng, (config.vocab_size, d), dt))
        self.pos = Parameter(nn.normal_init(rng, (config.max_positions, d), dt))
        self.blocks = [nn.DecoderBlock(d, config.d_ff, config.n_heads, rng, dt) for _ in range(config.n_layers)]
        self.ln_f = nn.LayerNorm(d, dt)
        self.w_out = Parameter(nn.normal_init(rng, (d, config.vocab_size), dt))

    def shared_tensors(self) -> dict[str, Parameter]:
        """Input embedding and output projection shared with the entity models."""
        return {"embed": self.embed, "w_out": self.w_out}

    def shared_hash(self) -> str:
        return tensors_hash(self.embed.data, self.w_out.data)

    def forward(self, ids, rng=None) -> tuple[Tensor, Tensor]:
        """Final-layer states ``(B, T, d)`` and next-token logits ``(B, T, V)``.

        Row ``t`` of the states encodes ``ids[:, :t+1]``. Inputs longer than
        ``max_positions`` are truncated with a ``TruncationWarning``.
        """
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None, :]
        t = ids.shape[1]
        if t > self.config.max_positions:
            warnings.warn(f"input of {t} tokens truncated to {self.config.max_positions}", TruncationWarning)
            ids = ids[:, :self.config.max_positions]
            t = ids.shape[1]
        p = self.config.dropout if rng is not None else 0.0
        x = F.embedding(self.embed, ids) + self.pos[:t]
        x = F.dropout(x, p, rng)
        mask = nn.causal_mask_bias(t, x.dtype)
        for blk in self.blocks:
            x = blk(x, mask, rng=rng, p_drop=p)
        h = self.ln_f(x)
        return h, h @ self.w_out

    def loss(self, ids: np.ndarray, mask: np.ndarray, rng=None, reduction: str = "mean") -> Tensor:
        _, logits = self.forward(ids[:, :-1], rng)
        return F.cross_entropy(logits, ids[:, 1:], mask[:, 1:], reduction=reduction)

    def token_nll(self, ids: np.ndarray, mask: np.ndarray) -> np.ndarray:
        """Per-position NLL of ``ids[:, 1:]`` (zero where masked), evaluation mode."""
        with no_grad():
            _, logits = self.forward(ids[:, :-1])
        return _token_nll(logits.data, ids[:, 1:], mask[:, 1:])

    # -- persistence ------------------------------------------------------
    def to_checkpoint(self, **meta) -> Checkpoint:
        m = {**getattr(self, "meta", {}), **encode_config(asdict(self.config)), "shared_hash": self.shared_hash()}
        m.update({k: str(v) for k, v in meta.items()})
        return Checkpoint("pretrained", m, {n: p.data for n, p in self.parameters().items()})

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "PretrainedLM":
        if ckpt.kind != "pretrained":
            raise ConfigError(f"expected a pretrained checkpoint, got {ckpt.kind!r}")
        model = cls(PretrainedConfig(**decode_config(ckpt.meta)), np.random.default_rng(0))
        model.load_arrays(ckpt.tensors)
        model.meta = dict(ckpt.meta)
        return model


def _token_nll(logits: np.ndarray, targets: np.ndarray, mask: np.ndarray) -> np.ndarray:
    x = logits.astype(np.float64)
    m = x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(x - m).sum(axis=-1)) + m[..., 0]
    safe = np.where(mask, targets, 0)
    picked = np.take_along_axis(x, safe[..., None], axis=-1)[..., 0]
    return np.where(mask, lse - picked, 0.0)


def pretrain(corpus: Sequence[EncodedUtterance], config: PretrainedConfig, schedule: LrSchedule,
             seed: int, train: TrainConfig | None = None, vocab_hash: str = "") -> tuple[PretrainedLM, Checkpoint]:
    """Train every parameter with next-token cross-entropy."""
    train = train or TrainConfig()
    if not corpus:
        raise ConfigError("empty pre-training corpus")
    top = max(max(u.ids) for u in corpus)
    if top >= config.vocab_size:
        raise ConfigError(f"token id {top} outside vocab of size {config.vocab_size}")
    init_rng, order_rng, drop_rng = seed_streams(seed, 3)
    model = PretrainedLM(config, init_rng)
    seqs = [u.ids[:config.max_positions + 1] for u in corpus]

    def loss_fn(idx):
        ids, mask = pad_batch([seqs[i] for i in idx])
        return model.loss(ids, mask, rng=drop_rng), int(mask[:, 1:].sum())

    batches = epoch_batches(len(seqs), train.batch_size, train.epochs, order_rng)
    losses = run_training(model.trainable(), {}, batches, loss_fn, schedule, train)
    n_tokens = sum(len(s) - 1 for s in seqs) * train.epochs
    ckpt = model.to_checkpoint(seed=seed, vocab_hash=vocab_hash, tokens_seen=n_tokens)
    model.meta = dict(ckpt.meta)
    model.train_losses = losses
    return model, ckpt
