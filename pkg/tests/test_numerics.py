import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from ealm.errors import ConfigError, EmptyBatchError, NumericError, UsageError
from ealm.numerics import functional as F
from ealm.numerics.optim import AdamW, LrSchedule, OptimizerState, adamw_step, lr_at
from ealm.numerics.tensor import Parameter, Tensor, default_dtype, no_grad

from conftest import gradcheck
from graphs import graph_specs

finite = st.floats(-30, 30, allow_nan=False, allow_infinity=False)


class TestSoftmax:
    def test_uniform(self):
        out = F.softmax(Tensor(np.zeros(4)))
        np.testing.assert_allclose(out.data, 0.25, atol=1e-12)

    def test_closed_form_values(self):
        # exp-normalize of [1, 2, 3] evaluated independently at high precision
        out = F.softmax(Tensor(np.array([1.0, 2.0, 3.0]))).data
        np.testing.assert_allclose(out, [0.09003057, 0.24472847, 0.66524096], atol=1e-8)

    def test_large_logits_are_stable(self):
        out = F.softmax(Tensor(np.array([1000.0, 1001.0], dtype=np.float32))).data
        assert np.isfinite(out).all()
        np.testing.assert_allclose(out.sum(), 1.0, atol=1e-6)

    def test_non_finite_input_names_tensor(self):
        with pytest.raises(NumericError, match="logits_x"):
            F.softmax(Tensor(np.array([0.0, np.nan]), name="logits_x"))

    @settings(max_examples=60, deadline=None)
    @given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=5), elements=finite),
           st.floats(-50, 50))
    def test_normalised_and_shift_invariant(self, x, c):
        a = F.softmax(Tensor(x), axis=-1).data
        b = F.softmax(Tensor(x + c), axis=-1).data
        assert (a >= 0).all() and (a <= 1).all()
        np.testing.assert_allclose(a.sum(axis=-1), 1.0, atol=1e-6)
        np.testing.assert_allclose(a, b, atol=1e-9)


class TestCrossEntropy:
    def test_uniform_is_log_v(self):
        loss = F.cross_entropy(Tensor(np.zeros((1, 3, 8))), np.array([[0, 5, 7]]))
        assert float(loss.data) == pytest.approx(math.log(8), abs=1e-9)

    def test_one_hot_probability_loss_vanishes(self):
        probs = np.zeros((1, 2, 5))
        probs[0, 0, 3] = probs[0, 1, 1] = 1.0
        loss = F.nll_from_probs(Tensor(probs), np.array([[3, 1]]))
        assert float(loss.data) <= 1e-6

    def test_matches_scalar_recomputation(self, rng):
        logits = rng.normal(size=(1, 3, 6))
        targets = np.array([[2, 0, 5]])
        p = np.exp(logits) / np.exp(logits).sum(-1, keepdims=True)
        expected = -np.mean([math.log(p[0, i, targets[0, i]]) for i in range(3)])
        assert float(F.cross_entropy(Tensor(logits), targets).data) == pytest.approx(expected, abs=1e-12)
        assert float(F.nll_from_probs(Tensor(p), targets).data) == pytest.approx(expected, abs=1e-12)

    def test_mask_excludes_positions(self, rng):
        logits = rng.normal(size=(2, 3, 4))
        t = rng.integers(0, 4, size=(2, 3))
        mask = np.array([[1, 1, 0], [0, 1, 1]], dtype=bool)
        full = F.cross_entropy(Tensor(logits), t, reduction="sum").data
        part = F.cross_entropy(Tensor(logits), t, mask, reduction="sum").data
        assert part < full
        assert float(F.cross_entropy(Tensor(logits[mask][None]), t[mask][None], reduction="sum").data) == \
            pytest.approx(float(part), abs=1e-12)

    def test_all_masked_is_error(self):
        with pytest.raises(EmptyBatchError):
            F.cross_entropy(Tensor(np.zeros((1, 2, 3))), np.zeros((1, 2), dtype=int), np.zeros((1, 2), dtype=bool))

    def test_target_out_of_range(self):
        with pytest.raises(UsageError):
            F.cross_entropy(Tensor(np.zeros((1, 2, 3))), np.array([[0, 3]]))


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        x.sum().backward()
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_square(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        (x * x).sum().backward()
        np.testing.assert_allclose(x.grad, [2.0, 4.0])

    def test_second_backward_is_usage_error(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        loss = (x * x).sum()
        loss.backward()
        with pytest.raises(UsageError):
            loss.backward()

    def test_unreachable_parameter_has_no_grad(self):
        x = Parameter(np.ones(3))
        y = Parameter(np.ones(3))
        (x * 2.0).sum().backward()
        assert y.grad is None

    def test_leaf_grads_accumulate(self):
        x = Parameter(np.array([1.0, 2.0]))
        (x * 3.0).sum().backward()
        (x * x).sum().backward()
        np.testing.assert_allclose(x.grad, [3.0 + 2.0, 3.0 + 4.0])

    def test_no_grad_records_nothing(self):
        x = Parameter(np.ones(2))
        with no_grad():
            y = (x * 2.0).sum()
        assert not y.requires_grad

    def test_two_layer_mlp_finite_differences(self, rng):
        arrays = {"w1": rng.normal(size=(3, 5)), "b1": rng.normal(size=5), "w2": rng.normal(size=(5, 2)),
                  "x": rng.normal(size=(4, 3))}

        def build(t):
            from ealm.numerics.tensor import gelu
            return F.cross_entropy((gelu(t["x"] @ t["w1"] + t["b1"]) @ t["w2"])[None], np.array([[0, 1, 1, 0]]))

        assert gradcheck(build, arrays, h=1e-5) < 1e-4

    @pytest.mark.parametrize("case", graph_specs(0), ids=lambda s: s[0])
    def test_graph_gradients(self, case):
        _, build, arrays = case
        assert gradcheck(build, {k: v.copy() for k, v in arrays.items()}) < 1e-4

    def test_default_dtype_context(self):
        with default_dtype(np.float64):
            assert Tensor([1.0]).dtype == np.float64
        assert Tensor([1.0]).dtype == np.float32


class TestAdamW:
    def test_zero_grad_zero_decay_is_identity(self):
        p = {"w": np.array([1.0, -2.0])}
        adamw_step(p, {"w": np.zeros(2)}, OptimizerState(weight_decay=0.0), lr=0.1)
        np.testing.assert_array_equal(p["w"], [1.0, -2.0])

    def test_zero_grad_scales_by_decay(self):
        p = {"w": np.array([[1.0, -2.0]])}
        adamw_step(p, {"w": np.zeros((1, 2))}, OptimizerState(weight_decay=0.1), lr=0.01)
        np.testing.assert_allclose(p["w"], np.array([[1.0, -2.0]]) * (1 - 0.01 * 0.1), rtol=0, atol=1e-15)

    def test_scalar_recurrence(self):
        # hand-stepped AdamW recurrence for a scalar with a constant gradient of 1
        lr, wd, b1, b2, eps = 0.01, 0.1, 0.9, 0.999, 1e-8
        theta, m, v = 0.5, 0.0, 0.0
        for t in range(1, 4):
            m = b1 * m + (1 - b1) * 1.0
            v = b2 * v + (1 - b2) * 1.0
            theta = theta * (1 - lr * wd)
            theta = theta - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        p = {"w": np.array([0.5])}
        state = OptimizerState(weight_decay=wd)
        for _ in range(3):
            adamw_step(p, {"w": np.array([1.0])}, state, lr)
        assert p["w"][0] == pytest.approx(theta, abs=1e-15)
        assert state.step == 3

    def test_shape_mismatch(self):
        with pytest.raises(UsageError):
            adamw_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, OptimizerState(), 0.1)

    def test_non_positive_lr(self):
        with pytest.raises(UsageError):
            adamw_step({"w": np.zeros(2)}, {"w": np.zeros(2)}, OptimizerState(), 0.0)

    def test_bitwise_deterministic(self, rng):
        g = rng.normal(size=(3, 3))
        outs = []
        for _ in range(2):
            p = {"w": np.ones((3, 3))}
            s = OptimizerState()
            for _ in range(4):
                adamw_step(p, {"w": g}, s, 0.01)
            outs.append(p["w"].tobytes())
        assert outs[0] == outs[1]

    def test_wrapper_rejects_frozen(self):
        with pytest.raises(UsageError):
            AdamW({"w": Parameter(np.ones(2), requires_grad=False)})

    def test_vectors_are_not_decayed(self):
        opt = AdamW({"w": Parameter(np.ones((2, 2))), "b": Parameter(np.ones(2))})
        assert opt.decay_mask == {"w": True, "b": False}


class TestSchedule:
    sched = LrSchedule(lr_start=1e-5, lr_max=1e-3, lr_end=1e-4, warmup_tokens=1000, decay_interval_tokens=500)

    def test_boundaries(self):
        assert lr_at(self.sched, 0) == pytest.approx(1e-5)
        assert lr_at(self.sched, 1000) == pytest.approx(1e-3)
        assert lr_at(self.sched, 1500) == pytest.approx(1e-3 * 0.9)
        assert lr_at(self.sched, 1499) == pytest.approx(1e-3)

    def test_floor(self):
        assert lr_at(self.sched, 10 ** 9) == pytest.approx(1e-4)

    def test_no_decay_interval(self):
        s = LrSchedule(0.0, 1e-3, 1e-4, 0, 0)
        assert lr_at(s, 10 ** 6) == 1e-3

    def test_invalid(self):
        with pytest.raises(ConfigError):
            LrSchedule(1e-5, 1e-4, 1e-3, 10, 10)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 5000), st.integers(0, 5000))
    def test_monotone_and_bounded(self, a, b):
        a, b = sorted((a, b))
        s = self.sched
        la, lb = lr_at(s, a), lr_at(s, b)
        assert min(s.lr_start, s.lr_end) <= la <= s.lr_max
        if b <= s.warmup_tokens:
            assert la <= lb
        elif a >= s.warmup_tokens:
            assert la >= lb
