import numpy as np
import pytest

from ealm.numerics.tensor import Tensor, default_dtype


def numeric_grad(fn, arrays, name, h=1e-6):
    """Central finite differences of scalar ``fn(arrays)`` w.r.t. ``arrays[name]``."""
    base = arrays[name]
    grad = np.zeros_like(base)
    it = np.nditer(base, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = base[i]
        base[i] = old + h
        up = fn(arrays)
        base[i] = old - h
        down = fn(arrays)
        base[i] = old
        grad[i] = (up - down) / (2 * h)
    return grad


def gradcheck(build, arrays, h=1e-6):
    """Worst relative error between autodiff and finite differences over all inputs.

    ``build(tensors) -> scalar Tensor`` is evaluated in float64.
    """
    with default_dtype(np.float64):
        tensors = {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}
        out = build(tensors)
        out.backward()
        analytic = {k: t.grad for k, t in tensors.items()}

        def scalar(arrs):
            return float(build({k: Tensor(v) for k, v in arrs.items()}).data)

        worst = 0.0
        for k in arrays:
            num = numeric_grad(scalar, arrays, k, h)
            a = analytic[k] if analytic[k] is not None else np.zeros_like(num)
            denom = max(np.linalg.norm(a), np.linalg.norm(num), 1e-10)
            worst = max(worst, float(np.linalg.norm(a - num) / denom))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny():
    """Small synthetic world: data, vocabulary and a briefly trained pre-trained LM (d_model 32)."""
    from types import SimpleNamespace

    from ealm.numerics.optim import LrSchedule
    from ealm.pretrained_lm import PretrainedConfig, pretrain
    from ealm.textdata.bpe import train_bpe
    from ealm.textdata.corpus import encode_corpus
    from ealm.textdata.synthetic import SyntheticConfig, build_synthetic_data
    from ealm.training import TrainConfig

    data = build_synthetic_data(SyntheticConfig(n_entities=80, n_new=20, n_pretrain_utterances=400,
                                                n_fusion_utterances=160, n_test_utterances=40,
                                                lexicon_size=40), seed=0)
    texts = [u.text for u in data.corpora["pretrain"]]
    texts += [n for c in data.catalogues.values() for n in c.names]
    texts += [n for p in data.pools["new"].values() for n in p.names]
    vocab = train_bpe(texts, 150)
    cfg = PretrainedConfig(vocab_size=len(vocab), d_model=32, d_ff=64, n_heads=2, max_positions=32)
    sched = LrSchedule(1e-4, 3e-3, 1e-4, 500, 20_000)
    pretrained, ckpt = pretrain(encode_corpus(vocab, data.corpora["pretrain"]), cfg, sched, seed=0,
                                train=TrainConfig(epochs=2, batch_size=32, grad_accum=1),
                                vocab_hash=vocab.content_hash())
    return SimpleNamespace(data=data, vocab=vocab, pretrained=pretrained, pretrained_ckpt=ckpt, schedule=sched)


_CRITERIA: dict[int, str] = {}


def record_criterion(n: int, ok: bool, detail: str) -> None:
    """Print and remember one acceptance line; the session summary repeats them in order."""
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    _CRITERIA[n] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])
