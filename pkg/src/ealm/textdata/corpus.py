"""Template-based utterance generation, corpus files and tokenized utterances."""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from ..errors import ConfigError
from .bpe import Vocabulary, pretokenize
from .catalogue import Catalogue, sample_entity

_SLOT_RE = re.compile(r"\{(\w+)\}")
MAX_TOKENS = 32


@dataclass(frozen=True)
class Span:
    entity_type: str
    start: int
    end: int


@dataclass
class Utterance:
    """Raw text with gold entity spans as character offsets ``[start, end)``."""

    text: str
    spans: list[Span] = field(default_factory=list)

    @property
    def entity_types(self) -> set[str]:
        return {s.entity_type for s in self.spans}


@dataclass
class EncodedUtterance:
    """Token ids starting with ``<s>``; spans are token offsets ``[start, end)``."""

    ids: list[int]
    spans: list[Span] = field(default_factory=list)
    truncated: bool = False

    @property
    def entity_types(self) -> set[str]:
        return {s.entity_type for s in self.spans}


def template_slots(template: str) -> list[str]:
    return _SLOT_RE.findall(template)


def fill_template(template: str, fillers: Mapping[str, str]) -> Utterance:
    parts, spans, pos, cursor = [], [], 0, 0
    for m in _SLOT_RE.finditer(template):
        literal = template[cursor:m.start()]
        parts.append(literal)
        pos += len(literal)
        value = fillers[m.group(1)]
        parts.append(value)
        spans.append(Span(m.group(1), pos, pos + len(value)))
        pos += len(value)
        cursor = m.end()
    parts.append(template[cursor:])
    return Utterance("".join(parts), spans)


def generate_corpus(templates: Sequence[str], catalogues: Mapping[str, Catalogue], n_utterances: int,
                    seed: int, slot_rate: float = 0.8) -> list[Utterance]:
    """Fill templates with popularity-sampled entities.

    Templates without slots are carrier phrases. When both kinds exist, a
    slotted template is chosen with probability ``slot_rate``.
    """
    slotted = [t for t in templates if template_slots(t)]
    carriers = [t for t in templates if not template_slots(t)]
    for t in slotted:
        for slot in template_slots(t):
            if slot not in catalogues:
                raise ConfigError(f"template {t!r} has slot {{{slot}}} without a catalogue")
    if not slotted and not carriers:
        raise ConfigError("no templates")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_utterances):
        use_slot = bool(slotted) and (not carriers or rng.random() < slot_rate)
        pool = slotted if use_slot else carriers
        template = pool[rng.integers(len(pool))]
        fillers = {slot: sample_entity(catalogues[slot], rng) for slot in template_slots(template)}
        out.append(fill_template(template, fillers))
    return out


def write_corpus(utterances: Sequence[Utterance], path) -> None:
    """Write one utterance per line plus a ``<path>.spans`` sidecar."""
    path = Path(path)
    path.write_text("".join(u.text + "\n" for u in utterances), encoding="utf-8")
    rows = [f"{i}\t{s.entity_type}\t{s.start}\t{s.end}\n" for i, u in enumerate(utterances) for s in u.spans]
    Path(str(path) + ".spans").write_text("".join(rows), encoding="utf-8")


def read_corpus(path) -> list[Utterance]:
    path = Path(path)
    lines = path.read_text(encoding="utf-8").split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    utts = [Utterance(line) for line in lines]
    sidecar = Path(str(path) + ".spans")
    if sidecar.exists():
        for row in sidecar.read_text(encoding="utf-8").splitlines():
            if not row.strip():
                continue
            i, etype, a, b = row.split("\t")
            utts[int(i)].spans.append(Span(etype, int(a), int(b)))
    return utts


def encode_utterance(vocab: Vocabulary, utt: Utterance, max_tokens: int = MAX_TOKENS) -> EncodedUtterance:
    """Prefix ``<s>``, encode, map char spans to token spans, truncate to ``max_tokens``."""
    ids = [vocab.bos_id]
    starts = []  # char offset where each token begins
    pos = 0
    for piece in pretokenize(utt.text):
        piece_ids = vocab._encode_piece(piece)
        offset = pos
        for tid in piece_ids:
            starts.append(offset)
            tok = vocab.tokens[tid]
            offset += len(tok) if tid != vocab.unk_id else 1
        ids.extend(piece_ids)
        pos += len(piece)
    ends = starts[1:] + [pos]
    spans = []
    for s in utt.spans:
        covered = [i + 1 for i, (a, b) in enumerate(zip(starts, ends)) if a < s.end and b > s.start]
        if covered:
            spans.append(Span(s.entity_type, covered[0], covered[-1] + 1))
    truncated = len(ids) > max_tokens
    if truncated:
        ids = ids[:max_tokens]
        spans = [Span(s.entity_type, s.start, min(s.end, max_tokens)) for s in spans if s.start < max_tokens]
    return EncodedUtterance(ids, spans, truncated)


def encode_corpus(vocab: Vocabulary, utts: Sequence[Utterance], max_tokens: int = MAX_TOKENS) -> list[EncodedUtterance]:
    return [encode_utterance(vocab, u, max_tokens) for u in utts]


def pad_batch(seqs: Sequence[Sequence[int]], pad_id: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad to a ``(B, T)`` id matrix and a boolean validity mask."""
    t = max(len(s) for s in seqs)
    ids = np.full((len(seqs), t), pad_id, dtype=np.int64)
    mask = np.zeros((len(seqs), t), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s
        mask[i, :len(s)] = True
    return ids, mask
