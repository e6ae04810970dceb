"""Entity catalogues: typed lists of surface strings with popularity scores."""
from __future__ import annotations

import math
from functools import cached_property
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from ..errors import ConfigError


@dataclass(frozen=True)
class Catalogue:
    entity_type: str
    entries: tuple[tuple[str, float], ...]

    def __post_init__(self):
        if not self.entries:
            raise ConfigError(f"catalogue {self.entity_type!r} is empty")
        pops = [p for _, p in self.entries]
        if any(not math.isfinite(p) or p < 0 for p in pops):
            raise ConfigError(f"catalogue {self.entity_type!r}: popularity must be finite and >= 0")
        if not any(p > 0 for p in pops):
            raise ConfigError(f"catalogue {self.entity_type!r}: all popularity scores are zero")
        object.__setattr__(self, "entries", tuple((str(s), float(p)) for s, p in self.entries))

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def names(self) -> list[str]:
        return [s for s, _ in self.entries]

    @cached_property
    def _probs(self) -> np.ndarray:
        pops = np.array([p for _, p in self.entries], dtype=np.float64)
        return pops / pops.sum()

    def probabilities(self) -> np.ndarray:
        return self._probs.copy()

    def ranked(self) -> list[tuple[str, float]]:
        """Entries by descending popularity; ties keep file order."""
        order = sorted(range(len(self.entries)), key=lambda i: (-self.entries[i][1], i))
        return [self.entries[i] for i in order]

    def top_fraction(self, fraction: float) -> "Catalogue":
        if not 0.0 < fraction <= 1.0:
            raise ConfigError(f"catalogue fraction must lie in (0, 1], got {fraction}")
        n = max(1, int(round(fraction * len(self.entries))))
        return Catalogue(self.entity_type, tuple(self.ranked()[:n]))

    def with_top_additions(self, new_entities: Sequence[str], top_fraction: float = 0.05) -> "Catalogue":
        """Add ``new_entities`` inside the top popularity band.

        Additions get popularities spread evenly between the catalogue's
        (1 - top_fraction) quantile and its maximum, so each of them outranks
        every existing entry outside the top band.
        """
        existing = set(self.names)
        fresh = [e for e in dict.fromkeys(new_entities) if e not in existing]
        if not fresh:
            return self
        pops = np.array([p for _, p in self.entries])
        lo = float(np.quantile(pops, 1.0 - top_fraction))
        hi = float(pops.max())
        values = np.linspace(hi, lo, num=len(fresh)) if len(fresh) > 1 else np.array([hi])
        added = tuple((e, float(v)) for e, v in zip(fresh, values))
        return Catalogue(self.entity_type, self.entries + added)

    def save(self, path) -> None:
        lines = [f"# entity_type\t{self.entity_type}"]
        lines += [f"{s}\t{p!r}" for s, p in self.entries]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path, entity_type: str | None = None) -> "Catalogue":
        """Read ``entity<TAB>popularity`` lines; ``#`` starts a comment line.

        The type comes from ``entity_type``, else a ``# entity_type`` header,
        else the file stem.
        """
        path = Path(path)
        header_type = None
        entries = []
        for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            line = raw.rstrip("\n")
            if not line.strip():
                continue
            if line.startswith("#"):
                parts = line[1:].strip().split("\t")
                if len(parts) == 2 and parts[0] == "entity_type":
                    header_type = parts[1]
                continue
            fields = line.split("\t")
            if len(fields) != 2:
                raise ConfigError(f"{path}:{lineno}: expected entity<TAB>popularity")
            try:
                pop = float(fields[1])
            except ValueError:
                raise ConfigError(f"{path}:{lineno}: bad popularity {fields[1]!r}") from None
            entries.append((fields[0], pop))
        return cls(entity_type or header_type or path.stem, tuple(entries))


def sample_entity(catalogue: Catalogue, rng: np.random.Generator) -> str:
    """Draw one entity with probability proportional to its popularity."""
    i = rng.choice(len(catalogue), p=catalogue._probs)
    return catalogue.entries[i][0]


def sample_entities(catalogue: Catalogue, rng: np.random.Generator, n: int) -> list[str]:
    idx = rng.choice(len(catalogue), size=n, p=catalogue._probs)
    return [catalogue.entries[i][0] for i in idx]
