"""On-disk layout of a run directory shared by the CLI subcommands.

::

    <out>/data/               catalogues, pools, corpora (gen-corpus)
    <out>/vocab.txt           tokenizer (tokenizer-train)
    <out>/pretrained.ckpt     (pretrain)
    <out>/entity/<type>.ckpt  (train-entity; ``<type>.<tag>.ckpt`` for variants)
    <out>/fusion.ckpt         plus fusion.manifest (train-fusion)
    <out>/reports/            tab-separated reports and raw NLL sidecars
"""
from __future__ import annotations

from pathlib import Path

from ..checkpoint import Checkpoint
from ..entity_lm import EntityLM
from ..errors import ConfigError, ContractError
from ..fusion import EALM, FusionLayer
from ..pretrained_lm import PretrainedLM
from ..textdata.bpe import Vocabulary
from ..textdata.synthetic import SyntheticData


class Workspace:
    def __init__(self, root):
        self.root = Path(root)

    @property
    def data_dir(self) -> Path:
        return self.root / "data"

    @property
    def vocab_path(self) -> Path:
        return self.root / "vocab.txt"

    @property
    def pretrained_path(self) -> Path:
        return self.root / "pretrained.ckpt"

    @property
    def fusion_path(self) -> Path:
        return self.root / "fusion.ckpt"

    @property
    def manifest_path(self) -> Path:
        return self.root / "fusion.manifest"

    @property
    def reports(self) -> Path:
        p = self.root / "reports"
        p.mkdir(parents=True, exist_ok=True)
        return p

    def entity_path(self, entity_type: str, tag: str = "") -> Path:
        name = f"{entity_type}.{tag}.ckpt" if tag else f"{entity_type}.ckpt"
        return self.root / "entity" / name

    def _require(self, path: Path, produced_by: str) -> Path:
        if not path.exists():
            raise ConfigError(f"{path} not found; run `{produced_by}` first")
        return path

    def load_data(self) -> SyntheticData:
        self._require(self.data_dir / "data.meta", "gen-corpus")
        return SyntheticData.load(self.data_dir)

    def load_vocab(self) -> Vocabulary:
        return Vocabulary.load(self._require(self.vocab_path, "tokenizer-train"))

    def load_pretrained(self) -> PretrainedLM:
        return PretrainedLM.from_checkpoint(Checkpoint.load(self._require(self.pretrained_path, "pretrain")))

    def load_entity(self, entity_type: str, tag: str = "") -> EntityLM:
        path = self._require(self.entity_path(entity_type, tag), "train-entity")
        return EntityLM.from_checkpoint(Checkpoint.load(path))

    def write_manifest(self, fusion_ckpt: Checkpoint) -> None:
        lines = ["index\tcomponent\tsha256"]
        for k, v in fusion_ckpt.meta.items():
            if k.startswith("component."):
                lines.append(f"{len(lines) - 1}\t{k[len('component.'):]}\t{v}")
        self.manifest_path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    def load_ealm(self) -> EALM:
        fusion = FusionLayer.from_checkpoint(Checkpoint.load(self._require(self.fusion_path, "train-fusion")))
        pretrained = self.load_pretrained()
        recorded = fusion.meta.get("component.pretrained")
        if recorded and recorded != pretrained.to_checkpoint().content_hash():
            raise ContractError("pretrained.ckpt is not the checkpoint the fusion layer was trained with")
        models = {t: self.load_entity(t) for t in fusion.entity_types}
        return EALM(pretrained, models, fusion)
