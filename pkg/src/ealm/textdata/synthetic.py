"""Synthetic voice-assistant style data: entity catalogues, pools and corpora.

Each entity type gets a catalogue whose entries are partitioned into pools:

* ``pretrain`` - appear in the pre-training corpus (and the general/seen test sets)
* ``fusion``   - appear only in the fusion-training corpus (which also
  re-uses pre-training entities, ``fusion_seen_share`` of its utterances)
* ``tail``     - in the catalogue but in no training text
* ``new``      - in neither the catalogue nor any training text
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ConfigError
from .catalogue import Catalogue
from .corpus import Utterance, generate_corpus, read_corpus, template_slots, write_corpus

CONSONANTS = "bdfgklmnprstvz"
VOWELS = "aeiou"

TEMPLATES: dict[str, list[str]] = {
    "song": [
        "play {song}",
        "play {song} by {celebrity}",
        "i want to listen to {song}",
        "put on {song} please",
        "can you play the song {song}",
        "add {song} to my playlist",
        "play {song} on repeat",
        "shuffle {song} by {celebrity}",
    ],
    "celebrity": [
        "play something by {celebrity}",
        "play the latest from {celebrity}",
        "who is {celebrity}",
        "show me news about {celebrity}",
        "play songs by {celebrity}",
    ],
    "person": [
        "call {person}",
        "send a message to {person}",
        "text {person} that i am late",
    ],
    "carrier": [
        "what time is it",
        "turn up the volume",
        "stop the music",
        "what is the weather like today",
        "set an alarm for seven",
        "skip this song",
        "pause",
        "next track please",
        "how are you today",
        "turn off the lights",
    ],
}

POOLS = ("pretrain", "fusion", "tail", "new")


@dataclass
class SyntheticConfig:
    entity_types: tuple[str, ...] = ("song", "celebrity")
    n_entities: int = 500
    n_new: int = 25
    pretrain_share: float = 0.5
    fusion_share: float = 0.2
    popularity_exponent: float = 0.3
    n_pretrain_utterances: int = 8000
    n_fusion_utterances: int = 1500
    fusion_seen_share: float = 0.5
    n_test_utterances: int = 300
    slot_rate: float = 0.8
    lexicon_size: int = 120

    @property
    def tail_share(self) -> float:
        return 1.0 - self.pretrain_share - self.fusion_share

    def validate(self) -> None:
        unknown = [t for t in self.entity_types if t not in TEMPLATES or t == "carrier"]
        if unknown:
            raise ConfigError(f"no templates for entity types {unknown}")
        if not 0.0 <= self.fusion_seen_share <= 1.0:
            raise ConfigError("fusion_seen_share must lie in [0, 1]")
        if self.tail_share < 0:
            raise ConfigError("pool shares exceed 1")


def _make_words(rng: np.random.Generator, n: int, taken: set[str]) -> list[str]:
    words: list[str] = []
    while len(words) < n:
        n_syl = int(rng.integers(2, 4))
        w = "".join(CONSONANTS[rng.integers(len(CONSONANTS))] + VOWELS[rng.integers(len(VOWELS))]
                    for _ in range(n_syl))
        if w not in taken:
            taken.add(w)
            words.append(w)
    return words


def _make_entities(rng, entity_type: str, n: int, taken_words: set[str], lexicon_size: int) -> list[str]:
    if entity_type == "song":
        lex = _make_words(rng, lexicon_size, taken_words)

        def draw():
            return " ".join(lex[i] for i in rng.choice(len(lex), size=int(rng.integers(2, 4)), replace=False))
    else:
        firsts = _make_words(rng, max(10, lexicon_size // 2), taken_words)
        lasts = _make_words(rng, max(10, lexicon_size * 2 // 3), taken_words)
        if len(firsts) * len(lasts) < n:
            raise ConfigError(f"lexicon too small for {n} {entity_type} entities")

        def draw():
            return f"{firsts[rng.integers(len(firsts))]} {lasts[rng.integers(len(lasts))]}"

    seen: set[str] = set()
    out = []
    while len(out) < n:
        e = draw()
        if e not in seen:
            seen.add(e)
            out.append(e)
    return out


@dataclass
class SyntheticData:
    config: SyntheticConfig
    seed: int
    catalogues: dict[str, Catalogue]
    pools: dict[str, dict[str, Catalogue]]
    corpora: dict[str, list[Utterance]] = field(default_factory=dict)

    def pool_catalogues(self, pool: str) -> dict[str, Catalogue]:
        return self.pools[pool]

    def fraction_catalogue(self, entity_type: str, fraction: float) -> Catalogue:
        """Fusion-pool entities plus the top ``fraction`` of the remaining catalogue."""
        fusion = self.pools["fusion"][entity_type]
        fusion_names = set(fusion.names)
        rest = Catalogue(entity_type, tuple(e for e in self.catalogues[entity_type].entries
                                            if e[0] not in fusion_names))
        return Catalogue(entity_type, fusion.entries + rest.top_fraction(fraction).entries)

    def tail_bottom_catalogue(self, entity_type: str, keep_top: float = 0.25) -> Catalogue:
        """Tail-pool entities ranked below the top ``keep_top`` of the non-fusion catalogue."""
        top = set(self.fraction_catalogue(entity_type, keep_top).names)
        tail = self.pools["tail"][entity_type]
        return Catalogue(entity_type, tuple(e for e in tail.entries if e[0] not in top))

    def save(self, root) -> None:
        root = Path(root)
        (root / "catalogues").mkdir(parents=True, exist_ok=True)
        (root / "pools").mkdir(exist_ok=True)
        (root / "corpus").mkdir(exist_ok=True)
        for t, cat in self.catalogues.items():
            cat.save(root / "catalogues" / f"{t}.tsv")
        for pool, cats in self.pools.items():
            for t, cat in cats.items():
                cat.save(root / "pools" / f"{pool}.{t}.tsv")
        for name, utts in self.corpora.items():
            write_corpus(utts, root / "corpus" / f"{name}.txt")
        cfg = asdict(self.config)
        cfg["entity_types"] = ",".join(self.config.entity_types)
        lines = [f"seed\t{self.seed}"] + [f"{k}\t{v}" for k, v in cfg.items()]
        (root / "data.meta").write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, root) -> "SyntheticData":
        root = Path(root)
        meta = dict(line.split("\t", 1) for line in (root / "data.meta").read_text(encoding="utf-8").splitlines())
        seed = int(meta.pop("seed"))
        defaults = asdict(SyntheticConfig())
        kwargs = {}
        for k, v in meta.items():
            if k == "entity_types":
                kwargs[k] = tuple(v.split(","))
            else:
                kwargs[k] = type(defaults[k])(v)
        cfg = SyntheticConfig(**kwargs)
        cats = {t: Catalogue.load(root / "catalogues" / f"{t}.tsv") for t in cfg.entity_types}
        pools = {p: {t: Catalogue.load(root / "pools" / f"{p}.{t}.tsv") for t in cfg.entity_types} for p in POOLS}
        corpora = {f.stem: read_corpus(f) for f in sorted((root / "corpus").glob("*.txt"))}
        return cls(cfg, seed, cats, pools, corpora)


def templates_for(entity_types, include_carriers: bool = True) -> list[str]:
    types = set(entity_types)
    out = []
    for t in entity_types:
        out += [tpl for tpl in TEMPLATES[t] if set(template_slots(tpl)) <= types and tpl not in out]
    if include_carriers:
        out += TEMPLATES["carrier"]
    return out


def build_synthetic_data(config: SyntheticConfig, seed: int) -> SyntheticData:
    """Catalogues, pools and every corpus/test set, as a pure function of (config, seed)."""
    config.validate()
    rng = np.random.default_rng(seed)
    taken: set[str] = set()
    for tpl in TEMPLATES["carrier"]:
        taken.update(tpl.split())
    catalogues, pools = {}, {p: {} for p in POOLS}
    for etype in config.entity_types:
        names = _make_entities(rng, etype, config.n_entities + config.n_new, taken, config.lexicon_size)
        in_cat, new = names[:config.n_entities], names[config.n_entities:]
        ranks = rng.permutation(len(in_cat)) + 1
        pops = 1.0 / ranks.astype(np.float64) ** config.popularity_exponent
        entries = tuple((e, float(p)) for e, p in zip(in_cat, pops))
        catalogues[etype] = Catalogue(etype, entries)
        order = rng.permutation(len(entries))
        n_pre = int(round(config.pretrain_share * len(entries)))
        n_fus = int(round(config.fusion_share * len(entries)))
        split = {"pretrain": order[:n_pre], "fusion": order[n_pre:n_pre + n_fus], "tail": order[n_pre + n_fus:]}
        for pool, idx in split.items():
            pools[pool][etype] = Catalogue(etype, tuple(entries[i] for i in sorted(idx)))
        pools["new"][etype] = Catalogue(etype, tuple((e, 1.0) for e in new))

    data = SyntheticData(config, seed, catalogues, pools)
    all_t = templates_for(config.entity_types)
    slot_t = templates_for(config.entity_types, include_carriers=False)
    sub = np.random.SeedSequence(seed).spawn(8)
    s = [int(x.generate_state(1)[0]) for x in sub]
    n_test = config.n_test_utterances
    n_seen = int(round(config.fusion_seen_share * config.n_fusion_utterances))
    data.corpora = {
        "pretrain": generate_corpus(all_t, pools["pretrain"], config.n_pretrain_utterances, s[0], config.slot_rate),
        "fusion": (generate_corpus(all_t, pools["pretrain"], n_seen, s[7], config.slot_rate)
                   + generate_corpus(all_t, pools["fusion"], config.n_fusion_utterances - n_seen, s[1],
                                     config.slot_rate)),
        "test_general": generate_corpus(all_t, pools["pretrain"], n_test, s[2], config.slot_rate),
        "test_seen": generate_corpus(slot_t, pools["pretrain"], n_test, s[3]),
        "test_tail": generate_corpus(slot_t, pools["tail"], n_test, s[4]),
        "test_new": generate_corpus(slot_t, pools["new"], n_test, s[5]),
    }
    tail_bottom = {t: data.tail_bottom_catalogue(t) for t in config.entity_types}
    data.corpora["test_tailnew"] = generate_corpus(slot_t, tail_bottom, n_test, s[6])
    return data
