"""Teacher-forced perplexity evaluation and tab-separated reports."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from ..errors import ConfigError, ContractError
from ..textdata.corpus import EncodedUtterance, pad_batch


@dataclass
class TypeSlice:
    n_utterances: int
    n_tokens: int
    total_nll: float

    @property
    def perplexity(self) -> float:
        return math.exp(self.total_nll / self.n_tokens)


@dataclass
class EvalReport:
    """Corpus-level perplexity plus per-entity-type slices.

    A type's slice covers every token of the utterances that contain at
    least one entity of that type. Types with no such utterance are absent.
    """

    test_set: str
    n_tokens: int
    total_nll: float
    per_type: dict[str, TypeSlice] = field(default_factory=dict)
    utterance_nll: np.ndarray = field(default_factory=lambda: np.zeros(0))
    utterance_tokens: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    model_hashes: dict[str, str] = field(default_factory=dict)

    @property
    def perplexity(self) -> float:
        return math.exp(self.total_nll / self.n_tokens)

    def relative_reduction(self, base: "EvalReport") -> float:
        """``(base - self) / base`` in perplexity."""
        return (base.perplexity - self.perplexity) / base.perplexity

    def type_reductions(self, base: "EvalReport") -> dict[str, float]:
        return {t: (base.per_type[t].perplexity - s.perplexity) / base.per_type[t].perplexity
                for t, s in self.per_type.items() if t in base.per_type}


def evaluate_perplexity(model, corpus: Sequence[EncodedUtterance], test_set: str = "test",
                        vocab_hash: str | None = None, pad_id: int = 0, batch_size: int = 128,
                        model_hashes: Mapping[str, str] | None = None) -> EvalReport:
    """Teacher-forced NLL of every token after ``<s>``, in evaluation mode.

    ``model`` is anything with ``token_nll(ids, mask)``: the pre-trained LM
    or the composed model.
    """
    if not corpus:
        raise ConfigError(f"test set {test_set!r} is empty")
    if vocab_hash is not None:
        pre = getattr(model, "pretrained", model)
        trained = getattr(pre, "meta", {}).get("vocab_hash")
        if trained and trained != vocab_hash:
            raise ContractError("model was trained with a different tokenizer")
    utt_nll = np.zeros(len(corpus))
    utt_tok = np.zeros(len(corpus), dtype=np.int64)
    lengths = np.array([len(u.ids) for u in corpus])
    order = np.argsort(lengths, kind="stable")
    for i in range(0, len(corpus), batch_size):
        idx = order[i:i + batch_size]
        ids, mask = pad_batch([corpus[j].ids for j in idx], pad_id)
        nll = model.token_nll(ids, mask)
        utt_nll[idx] = nll.sum(axis=1)
        utt_tok[idx] = mask[:, 1:].sum(axis=1)
    per_type = {}
    types = sorted({s.entity_type for u in corpus for s in u.spans})
    for t in types:
        sel = np.array([t in u.entity_types for u in corpus])
        per_type[t] = TypeSlice(int(sel.sum()), int(utt_tok[sel].sum()), float(utt_nll[sel].sum()))
    return EvalReport(test_set, int(utt_tok.sum()), float(utt_nll.sum()), per_type, utt_nll, utt_tok,
                      dict(model_hashes or {}))


def _fmt(x: float) -> str:
    return repr(float(x))


def write_report(path, rows: Sequence[Mapping[str, object]], meta: Mapping[str, object]) -> None:
    """Tab-separated table with ``# key<TAB>value`` metadata lines above the header row."""
    if not rows:
        raise ConfigError("report has no rows")
    cols = list(rows[0])
    lines = [f"# {k}\t{v}" for k, v in meta.items()]
    lines.append("\t".join(cols))
    for r in rows:
        lines.append("\t".join(_fmt(r[c]) if isinstance(r[c], float) else str(r[c]) for c in cols))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_report(path) -> tuple[dict[str, str], list[dict[str, str]]]:
    meta, rows, header = {}, [], None
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.startswith("# "):
            k, _, v = line[2:].partition("\t")
            meta[k] = v
        elif header is None:
            header = line.split("\t")
        elif line:
            rows.append(dict(zip(header, line.split("\t"))))
    return meta, rows


def write_nll_sidecar(path, report: EvalReport) -> None:
    """Raw per-utterance NLL and token counts, enough to re-derive every perplexity."""
    lines = ["utterance\ttokens\tnll"]
    lines += [f"{i}\t{int(n)}\t{_fmt(v)}" for i, (n, v) in enumerate(zip(report.utterance_tokens, report.utterance_nll))]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def comparison_rows(base: Mapping[str, EvalReport], new: Mapping[str, EvalReport], label: str = "ealm") -> list[dict]:
    """One row per test set and slice: baseline and new perplexity plus the relative reduction."""
    rows = []
    for name, b in base.items():
        n = new[name]
        rows.append({"test_set": name, "slice": "all", "tokens": b.n_tokens, "pretrained_nll": b.total_nll,
                     f"{label}_nll": n.total_nll, "pretrained_ppl": b.perplexity, f"{label}_ppl": n.perplexity,
                     "reduction": n.relative_reduction(b)})
        for t, s in n.per_type.items():
            bs = b.per_type[t]
            rows.append({"test_set": name, "slice": t, "tokens": s.n_tokens, "pretrained_nll": bs.total_nll,
                         f"{label}_nll": s.total_nll, "pretrained_ppl": bs.perplexity,
                         f"{label}_ppl": s.perplexity, "reduction": (bs.perplexity - s.perplexity) / bs.perplexity})
    return rows
