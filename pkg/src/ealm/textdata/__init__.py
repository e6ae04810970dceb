"""Tokenization, catalogues, synthetic corpora and entity-context enumeration."""
from .bpe import BOS, PAD, SPECIALS, UNK, Vocabulary, pretokenize, train_bpe
from .catalogue import Catalogue, sample_entities, sample_entity
from .contexts import context_lengths, enumerate_entity_contexts
from .corpus import (EncodedUtterance, Span, Utterance, encode_corpus, encode_utterance, fill_template,
                     generate_corpus, pad_batch, read_corpus, write_corpus)
from .synthetic import SyntheticConfig, SyntheticData, build_synthetic_data, templates_for

__all__ = [
    "BOS", "PAD", "SPECIALS", "UNK", "Catalogue", "EncodedUtterance", "Span", "SyntheticConfig",
    "SyntheticData", "Utterance", "Vocabulary", "build_synthetic_data", "context_lengths",
    "encode_corpus", "encode_utterance", "enumerate_entity_contexts", "fill_template",
    "generate_corpus", "pad_batch", "pretokenize", "read_corpus", "sample_entities", "sample_entity",
    "templates_for", "train_bpe", "write_corpus",
]
