"""Character-level byte-pair encoding.

Text is first split into pieces (a word with at most one leading space, or
a run of spaces), so merges never cross word boundaries and an entity gets
the same subwords wherever it appears after a space.
"""
from __future__ import annotations

import hashlib
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from ..errors import ConfigError, TokenizationError

PAD, UNK, BOS = "<pad>", "<unk>", "<s>"
SPECIALS = (PAD, UNK, BOS)
VOCAB_HEADER = "#ealm-vocab\tv1"

_PIECE_RE = re.compile(r" ?\S+|\s+(?!\S)|\s+")


def pretokenize(text: str) -> list[str]:
    return _PIECE_RE.findall(text)


@dataclass
class Vocabulary:
    tokens: list[str]
    merges: list[tuple[str, str]]
    _index: dict[str, int] = field(init=False, repr=False)
    _ranks: dict[tuple[str, str], int] = field(init=False, repr=False)
    _cache: dict[str, tuple[int, ...]] = field(init=False, repr=False, default_factory=dict)

    def __post_init__(self):
        if tuple(self.tokens[:len(SPECIALS)]) != SPECIALS:
            raise ConfigError("vocabulary must start with the reserved tokens <pad>, <unk>, <s>")
        self._index = {t: i for i, t in enumerate(self.tokens)}
        if len(self._index) != len(self.tokens):
            raise ConfigError("duplicate tokens in vocabulary")
        self._ranks = {pair: r for r, pair in enumerate(self.merges)}
        self._cache = {}

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def unk_id(self) -> int:
        return 1

    @property
    def bos_id(self) -> int:
        return 2

    @property
    def alphabet(self) -> set[str]:
        return {t for t in self.tokens[len(SPECIALS):] if len(t) == 1}

    def token_id(self, token: str) -> int:
        return self._index[token]

    def _encode_piece(self, piece: str) -> tuple[int, ...]:
        hit = self._cache.get(piece)
        if hit is not None:
            return hit
        symbols = list(piece)
        ranks = self._ranks
        while len(symbols) > 1:
            best, best_rank = -1, None
            for i in range(len(symbols) - 1):
                r = ranks.get((symbols[i], symbols[i + 1]))
                if r is not None and (best_rank is None or r < best_rank):
                    best, best_rank = i, r
            if best < 0:
                break
            symbols[best:best + 2] = [symbols[best] + symbols[best + 1]]
        ids = tuple(self._index.get(s, self.unk_id) for s in symbols)
        self._cache[piece] = ids
        return ids

    def encode(self, text: str, strict: bool = False) -> list[int]:
        """Token ids for ``text`` (no ``<s>``). ``strict`` raises on unknown characters."""
        out: list[int] = []
        for piece in pretokenize(text):
            ids = self._encode_piece(piece)
            if strict and self.unk_id in ids:
                bad = sorted({c for c in piece if c not in self._index})
                raise TokenizationError(f"characters outside the vocabulary: {bad}")
            out.extend(ids)
        return out

    def decode(self, ids: Iterable[int]) -> str:
        return "".join(self.tokens[i] for i in ids if i >= len(SPECIALS) or i == self.unk_id)

    def content_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()

    def to_text(self) -> str:
        lines = [VOCAB_HEADER, f"tokens\t{len(self.tokens)}"]
        lines += [_escape(t) for t in self.tokens]
        lines.append(f"merges\t{len(self.merges)}")
        lines += [f"{_escape(a)}\t{_escape(b)}" for a, b in self.merges]
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))

    @classmethod
    def from_text(cls, text: str) -> "Vocabulary":
        lines = text.split("\n")
        if lines[0] != VOCAB_HEADER:
            raise ConfigError(f"not a vocabulary file (header {lines[0]!r})")
        tag, n = lines[1].split("\t")
        if tag != "tokens":
            raise ConfigError("malformed vocabulary file")
        n = int(n)
        tokens = [_unescape(t) for t in lines[2:2 + n]]
        tag, m = lines[2 + n].split("\t")
        if tag != "merges":
            raise ConfigError("malformed vocabulary file")
        merges = []
        for line in lines[3 + n:3 + n + int(m)]:
            a, b = line.split("\t")
            merges.append((_unescape(a), _unescape(b)))
        return cls(tokens, merges)


_UNESCAPES = {"s": " ", "t": "\t", "n": "\n"}


def _escape(tok: str) -> str:
    return tok.replace("\\", "\\\\").replace(" ", "\\s").replace("\t", "\\t").replace("\n", "\\n")


def _unescape(tok: str) -> str:
    out, i = [], 0
    while i < len(tok):
        if tok[i] == "\\" and i + 1 < len(tok):
            out.append(_UNESCAPES.get(tok[i + 1], tok[i + 1]))
            i += 2
        else:
            out.append(tok[i])
            i += 1
    return "".join(out)


def train_bpe(corpus: Iterable[str], target_vocab_size: int) -> Vocabulary:
    """Greedy BPE: merge the most frequent adjacent pair until the inventory is full.

    ``target_vocab_size`` counts subword symbols (characters plus merges),
    not the three reserved tokens. Ties go to the lexicographically smallest
    pair. Stops early once every piece is a single symbol.
    """
    words: Counter[str] = Counter()
    n_lines = 0
    for line in corpus:
        n_lines += 1
        words.update(pretokenize(line))
    if n_lines == 0:
        raise ConfigError("empty corpus")
    alphabet = sorted({c for w in words for c in w})
    if target_vocab_size < len(alphabet):
        raise ConfigError(f"target vocab size {target_vocab_size} below alphabet size {len(alphabet)}")

    seqs = [list(w) for w in words]
    freqs = list(words.values())
    pair_counts: Counter[tuple[str, str]] = Counter()
    where: dict[tuple[str, str], set[int]] = defaultdict(set)
    for wi, seq in enumerate(seqs):
        for a, b in zip(seq, seq[1:]):
            pair_counts[(a, b)] += freqs[wi]
            where[(a, b)].add(wi)

    tokens = list(alphabet)
    known = set(tokens) | set(SPECIALS)
    merges: list[tuple[str, str]] = []
    while len(tokens) < target_vocab_size and pair_counts:
        best = min(pair_counts.items(), key=lambda kv: (-kv[1], kv[0]))[0]
        merged = best[0] + best[1]
        merges.append(best)
        if merged not in known:
            known.add(merged)
            tokens.append(merged)
        for wi in sorted(where.pop(best, ())):
            seq, f = seqs[wi], freqs[wi]
            for a, b in zip(seq, seq[1:]):
                pair_counts[(a, b)] -= f
                if pair_counts[(a, b)] <= 0:
                    del pair_counts[(a, b)]
            new, i = [], 0
            while i < len(seq):
                if i < len(seq) - 1 and seq[i] == best[0] and seq[i + 1] == best[1]:
                    new.append(merged)
                    i += 2
                else:
                    new.append(seq[i])
                    i += 1
            seqs[wi] = new
            for a, b in zip(new, new[1:]):
                pair_counts[(a, b)] += f
                where[(a, b)].add(wi)
        pair_counts.pop(best, None)
    return Vocabulary(list(SPECIALS) + tokens, merges)
