"""Entity language models: local attention with relative position biases.

An entity model never sees absolute positions. Attention logits get a learned
per-head bias indexed by the query-key offset (``0 .. window-1``) or by a
dedicated anchor class when the key is ``<s>``, which every context keeps.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import nn
from .checkpoint import Checkpoint, decode_config, encode_config, tensors_hash
from .errors import ConfigError, ContractError, FreezeContractError, TokenizationError
from .numerics import functional as F
from .numerics.optim import LrSchedule
from .numerics.tensor import Parameter, Tensor, no_grad
from .pretrained_lm import PretrainedLM, _token_nll
from .textdata.bpe import Vocabulary
from .textdata.catalogue import Catalogue
from .textdata.corpus import pad_batch
from .training import TrainConfig, run_training, seed_streams


@dataclass
class EntityConfig:
    entity_type: str
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    d_ff: int = 128
    n_heads: int = 4
    dropout: float = 0.1
    k: int = 4
    window: int = 0  # 0 means "same as k"
    dtype: str = "float32"

    def __post_init__(self):
        if self.window == 0:
            self.window = self.k

    def validate(self) -> None:
        if self.k < 1:
            raise ConfigError("k must be at least 1")
        if self.window < self.k:
            raise ConfigError("local attention window must be >= k")
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must be divisible by n_heads")


def _offset_classes(t: int, window: int) -> tuple[np.ndarray, np.ndarray]:
    """Relative-position class and attendability for a ``t``-long ``<s>``-anchored sequence."""
    q = np.arange(t)[:, None]
    k = np.arange(t)[None, :]
    off = q - k
    anchor = (k == 0) & (q >= 0)
    local = (off >= 0) & (off < window)
    allowed = anchor | local
    cls = np.where(k == 0, window, np.where(local, off, 0))
    return cls, allowed


class EntityLM(nn.Module):
    def __init__(self, config: EntityConfig, shared: dict[str, np.ndarray], rng: np.random.Generator):
        config.validate()
        self.config = config
        dt = np.dtype(config.dtype)
        d = config.d_model
        embed, w_out = shared["embed"], shared["w_out"]
        if embed.shape != (config.vocab_size, d) or w_out.shape != (d, config.vocab_size):
            raise ConfigError(f"shared embeddings {embed.shape}/{w_out.shape} do not match d_model={d}, "
                              f"vocab={config.vocab_size}")
        self.embed = Parameter(np.array(embed, dtype=dt), requires_grad=False)
        self.w_out = Parameter(np.array(w_out, dtype=dt), requires_grad=False)
        self.rel_bias = Parameter(np.zeros((config.n_layers, config.n_heads, config.window + 1), dtype=dt))
        self.blocks = [nn.DecoderBlock(d, config.d_ff, config.n_heads, rng, dt) for _ in range(config.n_layers)]
        self.ln_f = nn.LayerNorm(d, dt)

    @property
    def k(self) -> int:
        return self.config.k

    def shared_hash(self) -> str:
        return tensors_hash(self.embed.data, self.w_out.data)

    def shared_tensors(self) -> dict[str, Parameter]:
        return {"embed": self.embed, "w_out": self.w_out}

    def _run(self, x: Tensor, mask_bias: np.ndarray, cls: np.ndarray, rng) -> Tensor:
        p = self.config.dropout if rng is not None else 0.0
        x = F.dropout(x, p, rng)
        for i, blk in enumerate(self.blocks):
            head_bias = self.rel_bias[i][:, cls]
            x = blk(x, mask_bias, head_bias, rng=rng, p_drop=p)
        return x

    # -- single sequence (training / oracle path) -------------------------
    def forward_seq(self, ids: np.ndarray, rng=None) -> Tensor:
        """States ``(B, T, d)`` for ``<s>``-prefixed sequences under the local mask."""
        ids = np.asarray(ids, dtype=np.int64)
        t = ids.shape[-1]
        cls, allowed = _offset_classes(t, self.config.window)
        mask = np.where(allowed, 0.0, nn.NEG_INF).astype(self.embed.dtype)
        x = F.embedding(self.embed, ids)
        return self.ln_f(self._run(x, mask, cls, rng))

    def forward_single(self, context: Sequence[int]) -> np.ndarray:
        """Output state for one context ``[w_0, w_{t-l}, ..., w_{t-1}]``."""
        with no_grad():
            h = self.forward_seq(np.asarray(context, dtype=np.int64)[None, :])
        return h.data[0, -1]

    def loss(self, ids: np.ndarray, mask: np.ndarray, rng=None) -> Tensor:
        h = self.forward_seq(ids[:, :-1], rng)
        return F.cross_entropy(h @ self.w_out, ids[:, 1:], mask[:, 1:])

    def token_nll(self, ids: np.ndarray, mask: np.ndarray) -> np.ndarray:
        with no_grad():
            h = self.forward_seq(ids[:, :-1])
            logits = h @ self.w_out
        return _token_nll(logits.data, ids[:, 1:], mask[:, 1:])

    # -- k+1 contexts at once ---------------------------------------------
    def forward_multi(self, windows: np.ndarray, n_history: np.ndarray) -> Tensor:
        """All ``k + 1`` context outputs for a batch of windows.

        ``windows`` is ``(M, k+1)``: ``<s>`` followed by the last ``k`` tokens
        (slots without history hold any id, they are masked). ``n_history``
        is the number of real history tokens ``t - 1`` per window. Returns
        ``(M, k+1, d)``; row ``l`` encodes ``[w_0, w_{t-l}, ..., w_{t-1}]``
        with ``l`` capped at ``n_history`` (shorter histories repeat the
        longest available context).
        """
        windows = np.asarray(windows, dtype=np.int64)
        if windows.ndim == 1:
            windows = windows[None, :]
        m, k1 = windows.shape
        k = k1 - 1
        if k != self.config.k:
            raise ConfigError(f"window of {k1} slots does not match k={self.config.k}")
        n_history = np.broadcast_to(np.asarray(n_history, dtype=np.int64), (m,))
        l_eff = np.minimum(np.arange(k1)[None, :], n_history[:, None])          # (M, K1)
        slots = np.arange(k1)
        in_ctx = (slots[None, None, :] == 0) | (slots[None, None, :] >= k1 - l_eff[:, :, None])  # (M, K1, S)
        cls, base = _offset_classes(k1, self.config.window)
        allowed = in_ctx[..., :, None] & in_ctx[..., None, :] & base
        allowed |= np.eye(k1, dtype=bool)
        mask = np.where(allowed, 0.0, nn.NEG_INF).astype(self.embed.dtype)[:, :, None]  # (M, K1, 1, S, S)

        x = F.embedding(self.embed, windows)[:, None]                               # (M, 1, S, d)
        h = self._run(x, mask, cls, None)                                           # (M, K1, S, d)
        out_slot = np.where(l_eff >= 1, k, 0)
        rows = h[np.arange(m)[:, None], np.arange(k1)[None, :], out_slot]           # (M, K1, d)
        return self.ln_f(rows)

    def utterance_rows(self, ids: np.ndarray) -> np.ndarray:
        """``(B, T, k+1, d)`` context outputs for every prefix ``ids[:, :p+1]``, no grad."""
        ids = np.asarray(ids, dtype=np.int64)
        b, t = ids.shape
        k = self.config.k
        windows, n_hist = build_windows(ids, k)
        with no_grad():
            rows = self.forward_multi(windows.reshape(b * t, k + 1), n_hist.reshape(-1))
        return rows.data.reshape(b, t, k + 1, -1)

    # -- persistence ------------------------------------------------------
    def to_checkpoint(self, **meta) -> Checkpoint:
        m = {**getattr(self, "meta", {}), **encode_config(asdict(self.config)), "entity_type": self.config.entity_type,
             "shared_hash": self.shared_hash()}
        m.update({key: str(v) for key, v in meta.items()})
        return Checkpoint("entity", m, {n: p.data for n, p in self.parameters().items()})

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "EntityLM":
        if ckpt.kind != "entity":
            raise ConfigError(f"expected an entity checkpoint, got {ckpt.kind!r}")
        cfg = EntityConfig(**decode_config(ckpt.meta))
        shared = {"embed": ckpt.tensors["embed"], "w_out": ckpt.tensors["w_out"]}
        model = cls(cfg, shared, np.random.default_rng(0))
        model.load_arrays(ckpt.tensors)
        if model.shared_hash() != ckpt.meta.get("shared_hash"):
            raise ContractError("entity checkpoint shared-embedding hash does not match its tensors")
        model.meta = dict(ckpt.meta)
        return model


def build_windows(ids: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Windows ``[w_0, w_{t-k}..w_{t-1}]`` for every ``t = p + 1`` over ``(B, T)`` ids."""
    b, t = ids.shape
    p = np.arange(t)
    src = p[:, None] - k + np.arange(1, k + 1)[None, :]        # (T, k) absolute positions
    valid = src >= 1
    gathered = ids[:, np.clip(src, 0, t - 1)]                   # (B, T, k)
    gathered = np.where(valid[None], gathered, ids[:, :1, None])
    windows = np.concatenate([np.broadcast_to(ids[:, :1, None], (b, t, 1)), gathered], axis=2)
    n_hist = np.broadcast_to(p[None, :], (b, t))
    return windows, n_hist


def entity_token_ids(vocab: Vocabulary, entity: str, strict: bool = True) -> list[int]:
    """``<s>`` plus the entity's tokens as they appear after a space in an utterance."""
    return [vocab.bos_id] + vocab.encode(" " + entity, strict=strict)


@dataclass
class EntityTrainingResult:
    model: EntityLM
    checkpoint: Checkpoint
    catalogue: Catalogue
    skipped: list[str] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)


def train_entity_model(catalogue: Catalogue, vocab: Vocabulary, pretrained: PretrainedLM, config: EntityConfig,
                       schedule: LrSchedule, seed: int, train: TrainConfig | None = None,
                       expected_shared_hash: str | None = None,
                       init_from: EntityLM | None = None) -> EntityTrainingResult:
    """Fit an entity model on popularity-sampled, ``<s>``-prefixed catalogue strings.

    The input embedding and output projection come from ``pretrained`` and
    stay frozen; they are byte-compared after training. ``init_from`` starts
    from an existing model's weights instead of a fresh initialisation.
    """
    train = train or TrainConfig(steps=400, batch_size=64, grad_accum=1)
    if expected_shared_hash is not None and pretrained.shared_hash() != expected_shared_hash:
        raise ContractError("pre-trained shared-embedding hash does not match the expected value")
    if config.d_model != pretrained.config.d_model or config.vocab_size != pretrained.config.vocab_size:
        raise ConfigError("entity model d_model/vocab must match the pre-trained LM")
    shared = {n: p.data.copy() for n, p in pretrained.shared_tensors().items()}
    init_rng, sample_rng, drop_rng = seed_streams(seed, 3)
    model = EntityLM(config, shared, init_rng)
    if init_from is not None:
        if init_from.shared_hash() != pretrained.shared_hash():
            raise ContractError("warm-start model does not share the pre-trained embeddings")
        model.load_arrays(init_from.state_arrays())
    seqs = [entity_token_ids(vocab, e) for e in catalogue.names]
    probs = catalogue.probabilities()

    def batches():
        for _ in range(train.steps):
            yield sample_rng.choice(len(seqs), size=train.batch_size, p=probs)

    def loss_fn(idx):
        ids, mask = pad_batch([seqs[i] for i in idx], vocab.pad_id)
        return model.loss(ids, mask, rng=drop_rng), int(mask[:, 1:].sum())

    losses = run_training(model.trainable(), model.shared_tensors(), batches(), loss_fn, schedule, train)
    for name, p in model.shared_tensors().items():
        if p.data.tobytes() != shared[name].tobytes():
            raise FreezeContractError(f"shared tensor {name} changed during entity training")
    ckpt = model.to_checkpoint(seed=seed, vocab_hash=vocab.content_hash(), catalogue_size=len(catalogue))
    model.meta = dict(ckpt.meta)
    return EntityTrainingResult(model, ckpt, catalogue, [], losses)


def retrain_with_additions(old: Catalogue, new_entities: Sequence[str], vocab: Vocabulary,
                           pretrained: PretrainedLM, config: EntityConfig, schedule: LrSchedule, seed: int,
                           train: TrainConfig | None = None, top_fraction: float = 0.05,
                           on_unknown: str = "skip", init_from: EntityLM | None = None) -> EntityTrainingResult:
    """Retrain on ``old`` plus ``new_entities`` placed in the top popularity band.

    Training starts from scratch unless ``init_from`` (usually the model
    being replaced) is given, in which case it continues from its weights.

    Entities with characters outside the vocabulary are skipped (and listed
    in the result) or raise ``TokenizationError`` when ``on_unknown="error"``.
    """
    if on_unknown not in ("skip", "error"):
        raise ConfigError("on_unknown must be 'skip' or 'error'")
    usable, skipped = [], []
    for e in new_entities:
        try:
            vocab.encode(" " + e, strict=True)
            usable.append(e)
        except TokenizationError:
            if on_unknown == "error":
                raise
            skipped.append(e)
    catalogue = old.with_top_additions(usable, top_fraction)
    result = train_entity_model(catalogue, vocab, pretrained, config, schedule, seed, train, init_from=init_from)
    result.skipped = skipped
    return result


def catalogue_nll(model: EntityLM, vocab: Vocabulary, entities: Sequence[str]) -> np.ndarray:
    """Total NLL (nats) of each entity string under the entity model."""
    seqs = [entity_token_ids(vocab, e, strict=False) for e in entities]
    ids, mask = pad_batch(seqs, vocab.pad_id)
    return model.token_nll(ids, mask).sum(axis=1)
