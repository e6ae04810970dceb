import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ealm.checkpoint import Checkpoint
from ealm.entity_lm import (EntityConfig, EntityLM, build_windows, catalogue_nll, entity_token_ids,
                            retrain_with_additions, train_entity_model)
from ealm.errors import ConfigError, ContractError, FreezeContractError, TokenizationError
from ealm.numerics.tensor import Parameter, default_dtype, no_grad
from ealm.textdata.catalogue import Catalogue
from ealm.textdata.contexts import enumerate_entity_contexts
from ealm.training import TrainConfig, run_training

V, D = 30, 16


def random_model(seed, k=4, n_layers=2, dtype="float64"):
    rng = np.random.default_rng(seed)
    shared = {"embed": rng.normal(size=(V, D)), "w_out": rng.normal(size=(D, V))}
    with default_dtype(np.dtype(dtype)):
        m = EntityLM(EntityConfig("song", V, d_model=D, d_ff=24, n_heads=2, n_layers=n_layers, k=k, dtype=dtype),
                     shared, rng)
    for p in m.trainable().values():
        p.data = p.data + 0.3 * rng.normal(size=p.shape)
    return m


def fast_train(steps=150):
    return TrainConfig(steps=steps, batch_size=32, grad_accum=1)


def entity_config(tiny, entity_type="song", **kw):
    kw = {"d_model": 32, "d_ff": 64, "n_heads": 2, **kw}
    return EntityConfig(entity_type, len(tiny.vocab), **kw)


@pytest.fixture(scope="module")
def song(tiny):
    return train_entity_model(tiny.data.catalogues["song"], tiny.vocab, tiny.pretrained, entity_config(tiny),
                              tiny.schedule, seed=0, train=fast_train(200))


@pytest.fixture(scope="module")
def base(tiny):
    return train_entity_model(tiny.data.catalogues["song"], tiny.vocab, tiny.pretrained, entity_config(tiny),
                              tiny.schedule, seed=0, train=fast_train(150))


class TestForwardMulti:
    @pytest.mark.parametrize("k", [1, 2, 3, 4])
    def test_rows_match_truncated_contexts(self, k):
        m = random_model(k, k=k)
        rng = np.random.default_rng(10 + k)
        for t in range(1, 9):
            toks = [2] + list(rng.integers(3, V, size=t))
            window = [toks[0]] + [toks[t - k + j] if t - k + j >= 1 else toks[0] for j in range(k)]
            with no_grad():
                rows = m.forward_multi(np.array([window]), t - 1).data[0]
            for l, ctx in enumerate(enumerate_entity_contexts(toks, t, k)):
                np.testing.assert_allclose(rows[l], m.forward_single(ctx), atol=1e-6)
            # rows beyond the available history repeat the longest context
            for l in range(min(k, t - 1) + 1, k + 1):
                np.testing.assert_allclose(rows[l], rows[min(k, t - 1)], atol=1e-6)

    def test_anchor_row_ignores_history(self):
        m = random_model(1, k=2)
        with no_grad():
            rows = m.forward_multi(np.array([[2, 7, 9], [2, 4, 4]]), 5).data
        np.testing.assert_allclose(rows[:, 0], np.stack([m.forward_single([2])] * 2), atol=1e-6)

    def test_translation_invariance(self):
        m = random_model(2, k=3)
        rng = np.random.default_rng(0)
        tail = list(rng.integers(3, V, size=3))
        a = np.array([[2, 5, 6, 7, 8, 9, *tail, 4]])
        b = np.array([[2, 11, *tail, 4, 12, 13, 14, 15]])
        ra, rb = m.utterance_rows(a), m.utterance_rows(b)
        np.testing.assert_allclose(ra[0, 8], rb[0, 4], atol=1e-6)

    def test_utterance_rows_match_windows(self, rng):
        m = random_model(3, k=2)
        ids = rng.integers(3, V, size=(2, 6))
        ids[:, 0] = 2
        rows = m.utterance_rows(ids)
        assert rows.shape == (2, 6, 3, D)
        for p in range(6):
            ctxs = enumerate_entity_contexts(list(ids[1]), p + 1, 2)
            np.testing.assert_allclose(rows[1, p, len(ctxs) - 1], m.forward_single(ctxs[-1]), atol=1e-6)

    def test_build_windows(self):
        ids = np.array([[2, 7, 8, 9]])
        w, n = build_windows(ids, 2)
        np.testing.assert_array_equal(w[0], [[2, 2, 2], [2, 2, 7], [2, 7, 8], [2, 8, 9]])
        np.testing.assert_array_equal(n[0], [0, 1, 2, 3])

    def test_wrong_window_width(self):
        with pytest.raises(ConfigError):
            random_model(0, k=2).forward_multi(np.array([[2, 3]]), 1)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 4), st.integers(1, 10), st.integers(0, 10_000))
    def test_equivalence_property(self, k, t, seed):
        m = random_model(seed, k=k, n_layers=1)
        rng = np.random.default_rng(seed)
        toks = [2] + list(rng.integers(3, V, size=t))
        w, n = build_windows(np.array([toks]), k)
        with no_grad():
            rows = m.forward_multi(w[0, t - 1:t], n[0, t - 1]).data[0]
        for l, ctx in enumerate(enumerate_entity_contexts(toks, t, k)):
            np.testing.assert_allclose(rows[l], m.forward_single(ctx), atol=1e-6)


class TestConfig:
    def test_k_must_be_positive(self):
        with pytest.raises(ConfigError):
            EntityConfig("song", 10, k=0).validate()

    def test_window_smaller_than_k(self):
        with pytest.raises(ConfigError):
            EntityConfig("song", 10, k=4, window=2).validate()

    def test_shared_shape_mismatch(self, rng):
        with pytest.raises(ConfigError):
            EntityLM(EntityConfig("song", V, d_model=D, n_heads=2),
                     {"embed": np.zeros((V, D + 1)), "w_out": np.zeros((D + 1, V))}, rng)

    def test_d_model_mismatch_with_pretrained(self, tiny):
        with pytest.raises(ConfigError):
            train_entity_model(tiny.data.catalogues["song"], tiny.vocab, tiny.pretrained,
                               EntityConfig("song", len(tiny.vocab), d_model=16, n_heads=2), tiny.schedule, 0)


class TestTraining:
    def test_shared_tensors_bitwise_frozen(self, tiny, song):
        for name, p in tiny.pretrained.shared_tensors().items():
            assert song.model.shared_tensors()[name].data.tobytes() == p.data.tobytes()
            assert song.checkpoint.tensors[name].tobytes() == tiny.pretrained_ckpt.tensors[name].tobytes()
        assert song.checkpoint.meta["shared_hash"] == tiny.pretrained.shared_hash()

    def test_learns(self, tiny, song):
        names = tiny.data.catalogues["song"].names[:50]
        fresh = EntityLM(entity_config(tiny), {n: p.data for n, p in tiny.pretrained.shared_tensors().items()},
                         np.random.default_rng(0))
        assert catalogue_nll(song.model, tiny.vocab, names).sum() < catalogue_nll(fresh, tiny.vocab, names).sum()

    def test_deterministic(self, tiny, song):
        again = train_entity_model(tiny.data.catalogues["song"], tiny.vocab, tiny.pretrained, entity_config(tiny),
                                   tiny.schedule, seed=0, train=fast_train(200))
        assert again.checkpoint.to_bytes() == song.checkpoint.to_bytes()

    def test_checkpoint_roundtrip(self, song, tmp_path):
        song.checkpoint.save(tmp_path / "s.ckpt")
        back = EntityLM.from_checkpoint(Checkpoint.load(tmp_path / "s.ckpt"))
        assert back.to_checkpoint().to_bytes() == song.checkpoint.to_bytes()
        assert back.config.entity_type == "song"

    def test_tampered_shared_hash(self, song):
        ckpt = Checkpoint("entity", {**song.checkpoint.meta, "shared_hash": "0" * 64}, song.checkpoint.tensors)
        with pytest.raises(ContractError):
            EntityLM.from_checkpoint(ckpt)

    def test_expected_hash_mismatch(self, tiny):
        with pytest.raises(ContractError):
            train_entity_model(tiny.data.catalogues["song"], tiny.vocab, tiny.pretrained, entity_config(tiny),
                               tiny.schedule, 0, fast_train(1), expected_shared_hash="f" * 64)

    def test_gradient_into_frozen_tensor_is_detected(self):
        frozen = Parameter(np.ones(3))  # requires_grad left on by mistake
        w = Parameter(np.ones(3))

        def loss_fn(_):
            return (w * frozen).sum(), 1

        with pytest.raises(FreezeContractError):
            run_training({"w": w}, {"embed": frozen}, [0], loss_fn, None, TrainConfig(steps=1))

    def test_popular_half_gets_lower_perplexity(self, tiny):
        names = tiny.data.catalogues["celebrity"].names[:40]
        a, b = names[:20], names[20:]
        results = {}
        for label, (wa, wb) in {"a": (9.0, 1.0), "b": (1.0, 9.0)}.items():
            cat = Catalogue("celebrity", tuple([(n, wa) for n in a] + [(n, wb) for n in b]))
            m = train_entity_model(cat, tiny.vocab, tiny.pretrained, entity_config(tiny, "celebrity"),
                                   tiny.schedule, seed=1, train=fast_train(150)).model
            results[label] = (catalogue_nll(m, tiny.vocab, a).mean(), catalogue_nll(m, tiny.vocab, b).mean())
        assert results["a"][0] < results["a"][1]
        assert results["b"][1] < results["b"][0]
        assert results["a"][0] < results["b"][0]

    def test_any_two_checkpoints_are_shape_compatible(self, tiny, song):
        other = train_entity_model(tiny.data.catalogues["song"].top_fraction(0.25), tiny.vocab, tiny.pretrained,
                                   entity_config(tiny), tiny.schedule, seed=5, train=fast_train(5))
        assert {n: t.shape for n, t in other.checkpoint.tensors.items()} == \
            {n: t.shape for n, t in song.checkpoint.tensors.items()}
        assert other.model.shared_hash() == song.model.shared_hash()


class TestRetrain:
    def test_new_entities_become_likelier(self, tiny, base):
        new = tiny.data.pools["new"]["song"].names[:20]
        for init in (None, base.model):
            r = retrain_with_additions(tiny.data.catalogues["song"], new, tiny.vocab, tiny.pretrained,
                                       entity_config(tiny), tiny.schedule, seed=1, train=fast_train(150),
                                       init_from=init)
            before = catalogue_nll(base.model, tiny.vocab, new)
            after = catalogue_nll(r.model, tiny.vocab, new)
            assert after.sum() < before.sum()
            assert len(r.catalogue) == len(tiny.data.catalogues["song"]) + 20

    def test_empty_additions_match_plain_training(self, tiny, base):
        r = retrain_with_additions(tiny.data.catalogues["song"], [], tiny.vocab, tiny.pretrained, entity_config(tiny),
                                   tiny.schedule, seed=0, train=fast_train(150))
        assert r.checkpoint.to_bytes() == base.checkpoint.to_bytes()

    def test_unknown_characters_skipped_or_rejected(self, tiny):
        new = ["☃ frost", tiny.data.pools["new"]["song"].names[0]]
        r = retrain_with_additions(tiny.data.catalogues["song"], new, tiny.vocab, tiny.pretrained, entity_config(tiny),
                                   tiny.schedule, seed=0, train=fast_train(2))
        assert r.skipped == ["☃ frost"]
        assert new[1] in r.catalogue.names and "☃ frost" not in r.catalogue.names
        with pytest.raises(TokenizationError):
            retrain_with_additions(tiny.data.catalogues["song"], new, tiny.vocab, tiny.pretrained,
                                   entity_config(tiny), tiny.schedule, seed=0, train=fast_train(2),
                                   on_unknown="error")

    def test_retrained_checkpoint_is_interchangeable(self, tiny, base):
        r = retrain_with_additions(tiny.data.catalogues["song"], tiny.data.pools["new"]["song"].names[:5], tiny.vocab,
                                   tiny.pretrained, entity_config(tiny), tiny.schedule, seed=2, train=fast_train(3),
                                   init_from=base.model)
        assert r.checkpoint.meta["shared_hash"] == base.checkpoint.meta["shared_hash"]
        assert [t.shape for t in r.checkpoint.tensors.values()] == [t.shape for t in base.checkpoint.tensors.values()]

    def test_entity_tokens_are_space_prefixed(self, tiny):
        ids = entity_token_ids(tiny.vocab, "abc")
        assert ids[0] == tiny.vocab.bos_id
        assert tiny.vocab.decode(ids[1:]) == " abc"
