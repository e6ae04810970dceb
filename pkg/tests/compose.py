"""Random untrained compositions for structural tests."""
import numpy as np

from ealm.entity_lm import EntityConfig, EntityLM
from ealm.fusion import EALM, FusionConfig, FusionLayer
from ealm.numerics.tensor import default_dtype
from ealm.pretrained_lm import PretrainedConfig, PretrainedLM

TYPES = ("song", "celebrity", "place", "contact")


def random_ealm(seed, n_types=2, k=2, d=8, vocab=24, dtype="float64", scale=0.5):
    """Pre-trained LM, ``n_types`` entity models and a fusion layer with random weights."""
    rng = np.random.default_rng(seed)
    with default_dtype(np.dtype(dtype)):
        pre = PretrainedLM(PretrainedConfig(vocab_size=vocab, d_model=d, d_ff=2 * d, n_heads=2, max_positions=16,
                                            n_layers=1, dtype=dtype), rng)
        shared = {n: p.data for n, p in pre.shared_tensors().items()}
        models = {t: EntityLM(EntityConfig(t, vocab, d_model=d, d_ff=2 * d, n_heads=2, n_layers=1, k=k, dtype=dtype),
                              shared, rng)
                  for t in TYPES[:n_types]}
        fusion = FusionLayer(FusionConfig(d_model=d, d_ff=2 * d, n_heads=2, max_positions=16, dtype=dtype),
                             list(models), rng)
    # untrained weights are tiny; widen them so the distributions are far from uniform
    for module in (pre, fusion, *models.values()):
        for name, p in module.trainable().items():
            if name not in ("embed", "w_out"):
                p.data = p.data + scale * rng.normal(size=p.shape).astype(p.dtype)
    pre.w_out.data = pre.w_out.data * 20
    for m in models.values():
        m.w_out.data = pre.w_out.data.copy()
    return EALM(pre, models, fusion)


def random_ids(rng, batch, length, vocab=24, bos=2):
    ids = rng.integers(3, vocab, size=(batch, length))
    ids[:, 0] = bos
    return ids
