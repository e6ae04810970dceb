"""Three-stage training, evaluation, hot-swap and catalogue-fraction experiments."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from ..checkpoint import Checkpoint
from ..entity_lm import EntityLM, EntityTrainingResult, retrain_with_additions, train_entity_model
from ..errors import ConfigError, ContractError
from ..fusion import EALM, FusionTrace, train_fusion
from ..pretrained_lm import PretrainedLM, pretrain
from ..textdata.bpe import Vocabulary, train_bpe
from ..textdata.corpus import EncodedUtterance, encode_corpus, encode_utterance, Utterance
from ..textdata.synthetic import SyntheticData, build_synthetic_data
from .config import ExperimentConfig
from .evaluate import EvalReport, evaluate_perplexity

STAGES = ("data", "pretrained", "entity", "fusion", "retrain")


def stage_seed(seed: int, stage: str) -> int:
    """A distinct, reproducible seed per (run seed, stage)."""
    return int(np.random.SeedSequence([seed, STAGES.index(stage)]).generate_state(1)[0])


def tokenizer_corpus(data: SyntheticData) -> list[str]:
    """Pre-training text plus catalogue strings (never the held-out new entities)."""
    lines = [u.text for u in data.corpora["pretrain"]]
    for cat in data.catalogues.values():
        lines += cat.names
    return lines


def build_vocab(cfg: ExperimentConfig, data: SyntheticData) -> Vocabulary:
    return train_bpe(tokenizer_corpus(data), cfg.vocab_size)


def encode_sets(vocab: Vocabulary, data: SyntheticData, names: Sequence[str]) -> dict[str, list[EncodedUtterance]]:
    out = {}
    for name in names:
        key = name if name in data.corpora else f"test_{name}"
        if key not in data.corpora:
            raise ConfigError(f"unknown test set {name!r}")
        out[name] = encode_corpus(vocab, data.corpora[key])
    return out


def run_pretrain(cfg: ExperimentConfig, data: SyntheticData, vocab: Vocabulary, seed: int):
    sc = cfg.stages["pretrained"]
    corpus = encode_corpus(vocab, data.corpora["pretrain"])
    return pretrain(corpus, cfg.pretrained_config(len(vocab)), sc.schedule, stage_seed(seed, "pretrained"),
                    sc.train, vocab_hash=vocab.content_hash())


def run_entity(cfg: ExperimentConfig, data: SyntheticData, vocab: Vocabulary, pretrained: PretrainedLM,
               entity_type: str, seed: int, fraction: float = 1.0) -> EntityTrainingResult:
    sc = cfg.stages["entity"]
    cat = data.catalogues[entity_type] if fraction == 1.0 else data.fraction_catalogue(entity_type, fraction)
    return train_entity_model(cat, vocab, pretrained, cfg.entity_config(entity_type, len(vocab)), sc.schedule,
                              stage_seed(seed, "entity"), sc.train, expected_shared_hash=pretrained.shared_hash())


def run_retrain(cfg: ExperimentConfig, data: SyntheticData, vocab: Vocabulary, pretrained: PretrainedLM,
                entity_type: str, seed: int, deployed: EntityLM | None = None) -> EntityTrainingResult:
    """Retrain one entity model with the held-out new entities placed at the top of the popularity ranking.

    With ``cfg.retrain_warm_start`` and a ``deployed`` model, training continues
    from it for ``cfg.retrain_steps`` steps with peak rate ``cfg.retrain_lr_max``,
    which keeps the replacement's representations close to what the fusion
    layer was trained against.
    Otherwise the model is trained from scratch with the entity-stage settings.
    """
    sc = cfg.stages["entity"]
    train, schedule, init = sc.train, sc.schedule, None
    if cfg.retrain_warm_start and deployed is not None:
        train = dataclasses.replace(sc.train, steps=cfg.retrain_steps)
        lr_max = max(cfg.retrain_lr_max, sc.schedule.lr_start, sc.schedule.lr_end)
        schedule = dataclasses.replace(sc.schedule, lr_max=lr_max)
        init = deployed
    return retrain_with_additions(data.catalogues[entity_type], data.pools["new"][entity_type].names, vocab,
                                  pretrained, cfg.entity_config(entity_type, len(vocab)), schedule,
                                  stage_seed(seed, "retrain"), train, cfg.swap_top_fraction, cfg.on_unknown,
                                  init_from=init)


def run_fusion(cfg: ExperimentConfig, data: SyntheticData, vocab: Vocabulary, pretrained: PretrainedLM,
               entity_models: Mapping[str, EntityLM], seed: int):
    sc = cfg.stages["fusion"]
    corpus = encode_corpus(vocab, data.corpora["fusion"])
    return train_fusion(pretrained, entity_models, corpus, cfg.fusion_config(), sc.schedule,
                        stage_seed(seed, "fusion"), sc.train, vocab.pad_id)


@dataclass
class PipelineRun:
    """Every artifact of one seed's three-stage run, kept in memory."""

    seed: int
    data: SyntheticData
    vocab: Vocabulary
    pretrained: PretrainedLM
    pretrained_ckpt: Checkpoint
    entity: dict[str, EntityTrainingResult]
    ealm: EALM
    fusion_ckpt: Checkpoint
    fusion_losses: list[float] = field(default_factory=list)

    def test_sets(self, names: Sequence[str]) -> dict[str, list[EncodedUtterance]]:
        return encode_sets(self.vocab, self.data, names)

    def model_hashes(self) -> dict[str, str]:
        out = {"vocab": self.vocab.content_hash(), "pretrained": self.pretrained_ckpt.content_hash(),
               "fusion": self.fusion_ckpt.content_hash()}
        out.update({f"entity.{t}": r.checkpoint.content_hash() for t, r in self.entity.items()})
        return out


def run_pipeline(cfg: ExperimentConfig, seed: int, fraction: float = 1.0) -> PipelineRun:
    """Data, tokenizer, pre-trained LM, entity models (on ``fraction`` catalogues) and fusion layer."""
    data = build_synthetic_data(cfg.data, stage_seed(seed, "data"))
    vocab = build_vocab(cfg, data)
    pretrained, pckpt = run_pretrain(cfg, data, vocab, seed)
    entity = {t: run_entity(cfg, data, vocab, pretrained, t, seed, fraction) for t in cfg.data.entity_types}
    ealm, fckpt, losses = run_fusion(cfg, data, vocab, pretrained, {t: r.model for t, r in entity.items()}, seed)
    return PipelineRun(seed, data, vocab, pretrained, pckpt, entity, ealm, fckpt, losses)


def evaluate_both(run: PipelineRun, names: Sequence[str], ealm: EALM | None = None) -> tuple[dict, dict]:
    """Reports for the pre-trained LM and the composed model on each named test set."""
    ealm = ealm or run.ealm
    sets = run.test_sets(names)
    vh = run.vocab.content_hash()
    base = {n: evaluate_perplexity(run.pretrained, s, n, vh, run.vocab.pad_id) for n, s in sets.items()}
    new = {n: evaluate_perplexity(ealm, s, n, vh, run.vocab.pad_id, model_hashes={"manifest": ealm.manifest_hash()})
           for n, s in sets.items()}
    return base, new


def swap_entity_model(ealm: EALM, entity_type: str, new: EntityLM | Checkpoint) -> EALM:
    """Plug a retrained entity model into a trained composition; the fusion layer is untouched."""
    model = EntityLM.from_checkpoint(new) if isinstance(new, Checkpoint) else new
    if model.config.entity_type != entity_type:
        raise ContractError(f"checkpoint is for {model.config.entity_type!r}, not {entity_type!r}")
    return ealm.swap(entity_type, model)


@dataclass
class SwapResult:
    entity_type: str
    skipped: list[str]
    reductions: dict[str, tuple[float, float]]   # test set -> (pre-swap, post-swap) reduction
    perplexities: dict[str, tuple[float, float, float]]   # test set -> (pretrained, pre-swap, post-swap)

    def general_degradation(self, name: str = "general") -> float:
        """Relative perplexity increase of the composed model caused by the swap."""
        _, pre, post = self.perplexities[name]
        return (post - pre) / pre


def run_swap_experiment(cfg: ExperimentConfig, run: PipelineRun, sets: Sequence[str] = ("general", "new")) -> SwapResult:
    t = cfg.swap_entity_type
    retrained = run_retrain(cfg, run.data, run.vocab, run.pretrained, t, run.seed, run.entity[t].model)
    swapped = swap_entity_model(run.ealm, t, retrained.checkpoint)
    base, pre = evaluate_both(run, sets)
    _, post = evaluate_both(run, sets, swapped)
    reductions = {n: (pre[n].relative_reduction(base[n]), post[n].relative_reduction(base[n])) for n in sets}
    ppls = {n: (base[n].perplexity, pre[n].perplexity, post[n].perplexity) for n in sets}
    return SwapResult(t, retrained.skipped, reductions, ppls)


def run_catalogue_fraction_study(cfg: ExperimentConfig, run: PipelineRun,
                                 sets: Sequence[str] = ("general", "tail", "tailnew")) -> list[dict]:
    """Fusion trained on the smallest-fraction models, then each fraction's models swapped in.

    ``run`` must come from ``run_pipeline(cfg, seed, fraction=min(cfg.fractions))``.
    """
    fractions = sorted(cfg.fractions)
    if any(not 0 < f <= 1 for f in fractions):
        raise ConfigError("catalogue fractions must lie in (0, 1]")
    rows = []
    base, _ = evaluate_both(run, sets)
    for f in fractions:
        ealm = run.ealm
        if f != fractions[0]:
            for t in cfg.data.entity_types:
                ealm = ealm.swap(t, run_entity(cfg, run.data, run.vocab, run.pretrained, t, run.seed, f).model)
        _, new = evaluate_both(run, sets, ealm)
        row = {"fraction": f}
        for n in sets:
            row[f"{n}_ppl"] = new[n].perplexity
            row[f"{n}_reduction"] = new[n].relative_reduction(base[n])
        rows.append(row)
    return rows


def emit_trace(ealm: EALM, vocab: Vocabulary, text: str, path=None) -> FusionTrace:
    """Per-token ``pfusion`` / ``pcontext`` trace for one utterance, optionally written to ``path``."""
    enc = encode_utterance(vocab, Utterance(text), max_tokens=ealm.pretrained.config.max_positions)
    if len(enc.ids) < 2:
        raise ConfigError("utterance has no tokens to predict")
    trace = ealm.trace(enc.ids, [vocab.tokens[i] for i in enc.ids[1:]])
    if path is not None:
        trace.save(Path(path))
    return trace
