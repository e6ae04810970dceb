"""Contextual fusion layer and the full entity-aware LM.

Per timestep the fusion layer
  1. encodes the pre-trained states with one extra causal decoder layer (h^C),
  2. mixes each entity model's ``k + 1`` context outputs into one vector,
     weighted by ``pcontext``,
  3. scores the pre-trained state and every mixed entity vector with one
     shared scorer, normalises across models (``pfusion``) and interpolates
     the representations,
  4. projects with the pre-trained output embedding.
"""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import nn
from .checkpoint import Checkpoint, decode_config, encode_config
from .entity_lm import EntityLM
from .errors import ConfigError, ContractError, FreezeContractError, NumericError
from .numerics import functional as F
from .numerics.optim import LrSchedule
from .numerics.tensor import Parameter, Tensor, ensure_tensor, gelu, no_grad, stack
from .pretrained_lm import PretrainedLM, _token_nll
from .textdata.corpus import EncodedUtterance, pad_batch
from .training import TrainConfig, epoch_batches, run_training, seed_streams


@dataclass
class FusionConfig:
    d_model: int = 64
    d_ff: int = 128
    n_heads: int = 4
    max_positions: int = 32
    dropout: float = 0.1
    entity_dropout: float = 0.25
    dtype: str = "float32"


class FusionLayer(nn.Module):
    """Trainable part of the composed model: ``W_c``, context encoder, mixer and fuser."""

    def __init__(self, config: FusionConfig, entity_types: Sequence[str], rng: np.random.Generator):
        self.config = config
        self.entity_types = list(entity_types)
        if len(set(self.entity_types)) != len(self.entity_types):
            raise ConfigError("duplicate entity type in manifest")
        dt = np.dtype(config.dtype)
        d = config.d_model
        self.w_c = Parameter(nn.normal_init(rng, (len(self.entity_types) + 1, d), dt))
        self.pos = Parameter(nn.normal_init(rng, (config.max_positions, d), dt))
        self.encoder = nn.DecoderBlock(d, config.d_ff, config.n_heads, rng, dt)
        self.enc_ln = nn.LayerNorm(d, dt)
        self.mixer = nn.MLP(3 * d, d, 1, rng, dt)
        self.fuser = nn.MLP(3 * d, d, 1, rng, dt)

    @property
    def n_entity_models(self) -> int:
        return len(self.entity_types)

    def encode_context(self, hp, rng=None) -> Tensor:
        """Context states ``(B, T, d)``; row ``t`` is h^C after seeing positions ``<= t``."""
        hp = ensure_tensor(hp)
        t = hp.shape[-2]
        if t > self.config.max_positions:
            raise ConfigError(f"context of {t} positions exceeds the fusion positional table "
                              f"({self.config.max_positions})")
        p = self.config.dropout if rng is not None else 0.0
        x = hp + self.pos[:t]
        x = self.encoder(x, nn.causal_mask_bias(t, x.dtype), rng=rng, p_drop=p)
        return self.enc_ln(x)

    def _score(self, mlp: nn.MLP, parts: Sequence[Tensor], rng) -> Tensor:
        # first layer applied blockwise so the broadcast operands are never concatenated
        d = self.config.d_model
        w1 = mlp.fc1.weight
        hidden = mlp.fc1.bias
        for j, part in enumerate(parts):
            hidden = hidden + part @ w1[j * d:(j + 1) * d]
        p = self.config.dropout if rng is not None else 0.0
        out = mlp.fc2(F.dropout(gelu(hidden), p, rng))
        return out.reshape(out.shape[:-1])

    def entity_output_mixer(self, wc_i: Tensor, rows, hc: Tensor, name: str = "entity",
                            rng=None, force_pcontext=None) -> tuple[Tensor, Tensor]:
        """``pcontext`` over the ``k + 1`` rows ``(..., k+1, d)`` and their weighted sum."""
        rows = ensure_tensor(rows)
        if force_pcontext is not None:
            pc = Tensor(np.broadcast_to(np.asarray(force_pcontext, dtype=rows.dtype), rows.shape[:-1]).copy())
        else:
            hc_b = hc.reshape(*hc.shape[:-1], 1, hc.shape[-1])
            scores = self._score(self.mixer, [rows, hc_b, wc_i.reshape(1, wc_i.shape[-1])], rng)
            if not np.isfinite(scores.data).all():
                raise NumericError(f"non-finite pcontext scores for entity model {name!r}")
            pc = F.softmax(scores, axis=-1)
        return pc, F.weighted_sum(pc, rows)

    def pretrained_entity_fuser(self, outputs: Sequence[Tensor], hc: Tensor, rng=None,
                                force_pfusion=None) -> tuple[Tensor, Tensor]:
        """``pfusion`` over ``[h^P, o^1, ..., o^N]`` and the interpolated representation."""
        if len(outputs) != self.w_c.shape[0]:
            raise ConfigError(f"{len(outputs)} model outputs for a class-embedding table of "
                              f"{self.w_c.shape[0]} rows")
        stacked = stack([ensure_tensor(o) for o in outputs], axis=-2)          # (..., N+1, d)
        if force_pfusion is not None:
            pf = Tensor(np.broadcast_to(np.asarray(force_pfusion, dtype=stacked.dtype),
                                        stacked.shape[:-1]).copy())
        else:
            hc_b = hc.reshape(*hc.shape[:-1], 1, hc.shape[-1])
            scores = self._score(self.fuser, [stacked, self.w_c, hc_b], rng)
            if not np.isfinite(scores.data).all():
                raise NumericError("non-finite pfusion scores")
            pf = F.softmax(scores, axis=-1)
        return pf, F.weighted_sum(pf, stacked)

    def to_checkpoint(self, **meta) -> Checkpoint:
        m = {**getattr(self, "meta", {}), **encode_config(asdict(self.config))}
        m["manifest"] = ",".join(self.entity_types)
        m.update({k: str(v) for k, v in meta.items()})
        return Checkpoint("fusion", m, {n: p.data for n, p in self.parameters().items()})

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "FusionLayer":
        if ckpt.kind != "fusion":
            raise ConfigError(f"expected a fusion checkpoint, got {ckpt.kind!r}")
        types = [t for t in ckpt.meta.get("manifest", "").split(",") if t]
        layer = cls(FusionConfig(**decode_config(ckpt.meta)), types, np.random.default_rng(0))
        layer.load_arrays(ckpt.tensors)
        layer.meta = dict(ckpt.meta)
        return layer


@dataclass
class Features:
    """Frozen-model outputs for a padded batch: ``H^P`` and per-type entity rows."""

    hp: np.ndarray                       # (B, T, d)
    rows: dict[str, np.ndarray]          # type -> (B, T, k+1, d)

    def crop(self, idx, t: int) -> "Features":
        return Features(self.hp[idx, :t], {k: v[idx, :t] for k, v in self.rows.items()})


@dataclass
class FusionTrace:
    """Per predicted token: ``pfusion`` over ``[pretrained, *entity_types]`` and each ``pcontext``."""

    tokens: list[str]
    model_names: list[str]
    pfusion: np.ndarray                                   # (T, N+1)
    pcontext: dict[str, np.ndarray] = field(default_factory=dict)  # type -> (T, k+1)

    def header(self) -> list[str]:
        cols = ["token"] + [f"pfusion.{m}" for m in self.model_names]
        for t, pc in self.pcontext.items():
            cols += [f"pcontext.{t}.l{l}" for l in range(pc.shape[1])]
        return cols

    def to_tsv(self, decimals: int | None = 2) -> str:
        fmt = (lambda v: f"{v:.{decimals}f}") if decimals is not None else repr
        lines = ["\t".join(self.header())]
        for i, tok in enumerate(self.tokens):
            vals = list(self.pfusion[i]) + [v for pc in self.pcontext.values() for v in pc[i]]
            lines.append("\t".join([tok.replace("\t", " ")] + [fmt(float(v)) for v in vals]))
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        """Rounded display table at ``path`` and a full-precision ``<path>.full`` sidecar."""
        Path(path).write_text(self.to_tsv(2), encoding="utf-8")
        Path(str(path) + ".full").write_text(self.to_tsv(None), encoding="utf-8")


class EALM:
    """A frozen pre-trained LM, frozen entity models and a fusion layer composed into one LM."""

    def __init__(self, pretrained: PretrainedLM, entity_models: Mapping[str, EntityLM], fusion: FusionLayer):
        if list(entity_models) != fusion.entity_types:
            raise ConfigError(f"entity models {list(entity_models)} do not match the fusion manifest "
                              f"{fusion.entity_types}")
        if fusion.w_c.shape[0] != len(entity_models) + 1:
            raise ConfigError("class-embedding rows do not match the number of entity models")
        d = pretrained.config.d_model
        if fusion.config.d_model != d:
            raise ConfigError("fusion d_model does not match the pre-trained LM")
        vocab_hash = getattr(pretrained, "meta", {}).get("vocab_hash")
        for t, m in entity_models.items():
            if m.config.d_model != d:
                raise ConfigError(f"entity model {t!r} has d_model {m.config.d_model}, expected {d}")
            if m.shared_hash() != pretrained.shared_hash():
                raise ContractError(f"entity model {t!r} shared embeddings differ from the pre-trained LM")
            other = getattr(m, "meta", {}).get("vocab_hash")
            if vocab_hash and other and other != vocab_hash:
                raise ContractError(f"entity model {t!r} was trained with a different vocabulary")
        self.pretrained = pretrained
        self.entity_models = dict(entity_models)
        self.fusion = fusion

    @property
    def model_names(self) -> list[str]:
        return ["pretrained"] + list(self.entity_models)

    def frozen_tensors(self) -> dict[str, Parameter]:
        out = {f"pretrained.{n}": p for n, p in self.pretrained.parameters().items()}
        for t, m in self.entity_models.items():
            out.update({f"entity.{t}.{n}": p for n, p in m.parameters().items()})
        return out

    def features(self, ids: np.ndarray) -> Features:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None, :]
        with no_grad():
            hp, _ = self.pretrained.forward(ids)
        return Features(hp.data, {t: m.utterance_rows(ids[:, :hp.shape[1]]) for t, m in self.entity_models.items()})

    def forward(self, ids=None, rng=None, features: Features | None = None, force_pfusion=None,
                force_pcontext: Mapping[str, np.ndarray] | None = None):
        """Logits ``(B, T, V)`` plus ``pfusion`` and per-type ``pcontext`` tensors."""
        feats = features if features is not None else self.features(ids)
        fl = self.fusion
        hp = Tensor(feats.hp)
        hc = fl.encode_context(hp, rng)
        outputs = [hp]
        pcontexts = {}
        for i, t in enumerate(fl.entity_types, start=1):
            rows = F.dropout(Tensor(feats.rows[t]), fl.config.entity_dropout if rng is not None else 0.0, rng)
            forced = None if force_pcontext is None else force_pcontext.get(t)
            pc, o = fl.entity_output_mixer(fl.w_c[i], rows, hc, t, rng, forced)
            outputs.append(o)
            pcontexts[t] = pc
        pf, h = fl.pretrained_entity_fuser(outputs, hc, rng, force_pfusion)
        return h @ self.pretrained.w_out, pf, pcontexts

    def next_token_probs(self, tokens: Sequence[int], **kw) -> tuple[np.ndarray, FusionTrace]:
        """Distribution of the token after ``tokens`` and the trace row for that step."""
        with no_grad():
            logits, pf, pcs = self.forward(np.asarray(tokens, dtype=np.int64)[None, :], **kw)
        probs = F.softmax(Tensor(logits.data[0, -1].astype(np.float64))).data
        trace = FusionTrace(["?"], self.model_names, pf.data[0, -1:].astype(np.float64),
                            {t: v.data[0, -1:].astype(np.float64) for t, v in pcs.items()})
        return probs, trace

    def token_nll(self, ids: np.ndarray, mask: np.ndarray, **kw) -> np.ndarray:
        with no_grad():
            logits, _, _ = self.forward(ids[:, :-1], **kw)
        return _token_nll(logits.data, ids[:, 1:], mask[:, 1:])

    def loss(self, ids, mask, feats: Features, rng=None) -> Tensor:
        logits, _, _ = self.forward(rng=rng, features=feats)
        return F.cross_entropy(logits, ids[:, 1:], mask[:, 1:])

    def trace(self, ids: Sequence[int], token_strings: Sequence[str]) -> FusionTrace:
        """One row per predicted token ``ids[1:]``."""
        ids = np.asarray(ids, dtype=np.int64)
        with no_grad():
            _, pf, pcs = self.forward(ids[None, :-1])
        return FusionTrace(list(token_strings), self.model_names, pf.data[0].astype(np.float64),
                           {t: v.data[0].astype(np.float64) for t, v in pcs.items()})

    def swap(self, entity_type: str, model: EntityLM) -> "EALM":
        """A new composition with one entity model replaced; the fusion layer is shared as is."""
        if entity_type not in self.entity_models:
            raise ConfigError(f"no entity model of type {entity_type!r} to swap")
        old = self.entity_models[entity_type]
        old_shapes = {n: p.shape for n, p in old.parameters().items()}
        new_shapes = {n: p.shape for n, p in model.parameters().items()}
        if old_shapes != new_shapes or old.config.k != model.config.k:
            raise ContractError(f"replacement for {entity_type!r} is not shape-compatible")
        if model.shared_hash() != self.pretrained.shared_hash():
            raise ContractError(f"replacement for {entity_type!r} has different shared embeddings")
        models = dict(self.entity_models)
        models[entity_type] = model
        return EALM(self.pretrained, models, self.fusion)

    def manifest(self) -> dict[str, str]:
        """Class index and component content hashes, in manifest order."""
        m = {"pretrained": self.pretrained.to_checkpoint().content_hash()}
        for i, (t, model) in enumerate(self.entity_models.items(), start=1):
            m[f"{i}.{t}"] = model.to_checkpoint().content_hash()
        return m

    def manifest_hash(self) -> str:
        return hashlib.sha256(repr(sorted(self.manifest().items())).encode()).hexdigest()


def compute_features(ealm: EALM, corpus: Sequence[EncodedUtterance], pad_id: int = 0,
                     chunk: int = 256) -> tuple[np.ndarray, np.ndarray, Features]:
    """Pad the corpus to one length and precompute frozen-model features.

    Utterances are processed in length-sorted chunks so little work is spent
    on padding; causality makes the per-chunk padding irrelevant.
    """
    ids, mask = pad_batch([u.ids for u in corpus], pad_id)
    n, t = ids.shape[0], ids.shape[1] - 1
    d = ealm.pretrained.config.d_model
    hp = np.zeros((n, t, d), dtype=ealm.pretrained.embed.dtype)
    rows = {name: np.zeros((n, t, m.config.k + 1, d), dtype=m.embed.dtype) for name, m in ealm.entity_models.items()}
    lengths = mask.sum(axis=1) - 1
    order = np.argsort(lengths, kind="stable")
    for i in range(0, n, chunk):
        idx = order[i:i + chunk]
        tc = max(int(lengths[idx].max()), 1)
        f = ealm.features(ids[idx, :tc])
        hp[idx, :tc] = f.hp
        for name in rows:
            rows[name][idx, :tc] = f.rows[name]
    return ids, mask, Features(hp, rows)


def train_fusion(pretrained: PretrainedLM, entity_models: Mapping[str, EntityLM], corpus: Sequence[EncodedUtterance],
                 config: FusionConfig, schedule: LrSchedule, seed: int, train: TrainConfig | None = None,
                 pad_id: int = 0) -> tuple[EALM, Checkpoint, list[float]]:
    """Train only the fusion layer; every pre-trained and entity tensor must stay bit-identical."""
    train = train or TrainConfig()
    if not corpus:
        raise ConfigError("empty fusion-training corpus")
    init_rng, order_rng, drop_rng = seed_streams(seed, 3)
    fusion = FusionLayer(config, list(entity_models), init_rng)
    ealm = EALM(pretrained, entity_models, fusion)
    frozen = ealm.frozen_tensors()
    for p in frozen.values():
        p.requires_grad = False
        p.grad = None
    before = {n: p.data.tobytes() for n, p in frozen.items()}

    ids, mask, feats = compute_features(ealm, corpus, pad_id)
    lengths = mask.sum(axis=1)

    def loss_fn(idx):
        t = int(lengths[idx].max())
        return ealm.loss(ids[idx, :t], mask[idx, :t], feats.crop(idx, t - 1), rng=drop_rng), int(mask[idx, 1:t].sum())

    batches = epoch_batches(len(corpus), train.batch_size, train.epochs, order_rng)
    losses = run_training(fusion.trainable(), frozen, batches, loss_fn, schedule, train)
    for n, p in frozen.items():
        if p.data.tobytes() != before[n]:
            raise FreezeContractError(f"frozen tensor {n} changed during fusion training")
    meta = {"seed": seed, "vocab_hash": getattr(pretrained, "meta", {}).get("vocab_hash", "")}
    meta.update({f"component.{k}": v for k, v in ealm.manifest().items()})
    ckpt = fusion.to_checkpoint(**meta)
    fusion.meta = dict(ckpt.meta)
    return ealm, ckpt, losses
