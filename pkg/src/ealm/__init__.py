"""Entity-aware language models: a pre-trained LM, per-type entity LMs and a contextual fusion layer."""
from .entity_lm import EntityConfig, EntityLM, retrain_with_additions, train_entity_model
from .fusion import EALM, FusionConfig, FusionLayer, FusionTrace, train_fusion
from .pretrained_lm import PretrainedConfig, PretrainedLM, pretrain

__version__ = "0.1.0"

__all__ = [
    "EALM", "EntityConfig", "EntityLM", "FusionConfig", "FusionLayer", "FusionTrace", "PretrainedConfig",
    "PretrainedLM", "pretrain", "retrain_with_additions", "train_entity_model", "train_fusion",
]
