"""Autodiff core: finite-difference gradient checks and op semantics."""

import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from amlgraph import ndtensor as nd
from amlgraph.errors import ConfigError, DimensionError


def fd_grad(fn, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar-valued fn at x."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn(x)
        flat[i] = orig - h
        fm = fn(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * h)
    return g


def check_grad(build, x0: np.ndarray, tol: float = 1e-6):
    """build(tensor) -> scalar Tensor; compares tape grad to FD grad."""
    x = nd.Tensor(x0.copy(), requires_grad=True)
    with nd.Tape() as tape:
        loss = build(x)
    tape.backward(loss)
    assert x.grad is not None

    def scalar(arr):
        return build(nd.Tensor(arr)).data.item()

    ref = fd_grad(scalar, x0.copy())
    denom = max(np.abs(ref).max(), 1e-8)
    assert np.abs(x.grad - ref).max() / denom < tol, (
        f"grad mismatch: max abs err {np.abs(x.grad - ref).max()}"
    )


RNG = np.random.default_rng(20240811)


class TestTapeMechanics:
    def test_no_tape_no_grad(self):
        x = nd.Tensor(RNG.normal(size=(3, 3)), requires_grad=True)
        y = nd.relu(x)
        assert x.grad is None and y.grad is None

    def test_sum_gradient_is_ones(self):
        x = nd.Tensor(RNG.normal(size=(4, 5)), requires_grad=True)
        with nd.Tape() as tape:
            loss = nd.sum_all(x)
        tape.backward(loss)
        np.testing.assert_array_equal(x.grad, np.ones((4, 5)))

    def test_fanout_accumulates(self):
        # loss = sum(x*x) + sum(x): grad = 2x + 1
        x0 = RNG.normal(size=(3,))
        x = nd.Tensor(x0, requires_grad=True)
        with nd.Tape() as tape:
            loss = nd.add(nd.sum_all(nd.hadamard(x, x)), nd.sum_all(x))
        tape.backward(loss)
        np.testing.assert_allclose(x.grad, 2 * x0 + 1, rtol=1e-12)

    def test_backward_accumulates_until_reset(self):
        x = nd.Tensor(np.ones(3), requires_grad=True)
        with nd.Tape() as tape:
            loss = nd.sum_all(x)
        tape.backward(loss)
        tape.backward(loss)
        np.testing.assert_array_equal(x.grad, 2 * np.ones(3))
        nd.zero_grad([x])
        assert x.grad is None

    def test_nested_tape_rejected(self):
        with nd.Tape():
            with pytest.raises(ConfigError):
                with nd.Tape():
                    pass

    def test_nonscalar_backward_rejected(self):
        x = nd.Tensor(np.ones(3), requires_grad=True)
        with nd.Tape() as tape:
            y = nd.relu(x)
        with pytest.raises(DimensionError):
            tape.backward(y)

    def test_replay_deterministic(self):
        x0 = RNG.normal(size=(6, 4))
        w0 = RNG.normal(size=(4, 2))

        def run():
            x = nd.Tensor(x0, requires_grad=True)
            w = nd.Tensor(w0, requires_grad=True)
            with nd.Tape() as tape:
                loss = nd.sum_all(nd.sigmoid(nd.matmul(x, w)))
            tape.backward(loss)
            return loss.data.copy(), x.grad.copy(), w.grad.copy()

        a = run()
        b = run()
        for u, v in zip(a, b):
            np.testing.assert_array_equal(u, v)


class TestGradients:
    def test_matmul(self):
        b = nd.Tensor(RNG.normal(size=(4, 3)))
        check_grad(lambda x: nd.sum_all(nd.sigmoid(nd.matmul(x, b))),
                   RNG.normal(size=(5, 4)))

    def test_matmul_right(self):
        a = nd.Tensor(RNG.normal(size=(5, 4)))
        check_grad(lambda x: nd.sum_all(nd.sigmoid(nd.matmul(a, x))),
                   RNG.normal(size=(4, 3)))

    def test_add_broadcast(self):
        b = nd.Tensor(RNG.normal(size=(1, 4)))
        check_grad(lambda x: nd.sum_all(nd.sigmoid(nd.add(x, b))),
                   RNG.normal(size=(3, 4)))
        a = nd.Tensor(RNG.normal(size=(3, 4)))
        check_grad(lambda x: nd.sum_all(nd.sigmoid(nd.add(a, x))),
                   RNG.normal(size=(1, 4)))

    def test_hadamard(self):
        b = nd.Tensor(RNG.normal(size=(3, 4)))
        check_grad(lambda x: nd.sum_all(nd.hadamard(x, b)), RNG.normal(size=(3, 4)))

    def test_scale(self):
        check_grad(lambda x: nd.sum_all(nd.scale(x, -2.5)), RNG.normal(size=(7,)))

    def test_relu(self):
        x0 = RNG.normal(size=(50,))
        x0[np.abs(x0) < 1e-3] = 0.5  # stay away from the kink
        check_grad(lambda x: nd.sum_all(nd.hadamard(nd.relu(x), nd.relu(x))), x0)

    def test_leaky_relu(self):
        x0 = RNG.normal(size=(50,))
        x0[np.abs(x0) < 1e-3] = -0.5
        check_grad(lambda x: nd.sum_all(nd.hadamard(nd.leaky_relu(x), nd.leaky_relu(x))), x0)

    def test_leaky_relu_slope(self):
        y = nd.leaky_relu(nd.Tensor([-10.0, 10.0]))
        np.testing.assert_allclose(y.data, [-2.0, 10.0])

    def test_sigmoid(self):
        check_grad(lambda x: nd.sum_all(nd.sigmoid(x)), RNG.normal(size=(20,)))

    def test_sigmoid_extreme_inputs_finite(self):
        y = nd.sigmoid(nd.Tensor([-800.0, 0.0, 800.0]))
        assert np.all(np.isfinite(y.data))
        np.testing.assert_allclose(y.data, [0.0, 0.5, 1.0], atol=1e-12)

    def test_concat(self):
        b = nd.Tensor(RNG.normal(size=(3, 2)))
        check_grad(lambda x: nd.sum_all(nd.sigmoid(nd.concat([x, b], axis=1))),
                   RNG.normal(size=(3, 4)))

    def test_reshape(self):
        check_grad(lambda x: nd.sum_all(nd.sigmoid(nd.reshape(x, (2, 6)))),
                   RNG.normal(size=(3, 4)))

    def test_transpose2d(self):
        w = nd.Tensor(RNG.normal(size=(3, 5)))
        check_grad(lambda x: nd.sum_all(nd.matmul(w, nd.transpose2d(x))),
                   RNG.normal(size=(4, 5)))

    def test_mean_rows(self):
        check_grad(lambda x: nd.sum_all(nd.sigmoid(nd.mean_rows(x))),
                   RNG.normal(size=(6, 3)))

    def test_gather_rows(self):
        idx = np.array([0, 2, 2, 1, 0])
        check_grad(lambda x: nd.sum_all(nd.sigmoid(nd.gather_rows(x, idx))),
                   RNG.normal(size=(3, 4)))

    def test_segment_sum(self):
        seg = np.array([0, 0, 1, 2, 2, 2])
        check_grad(lambda x: nd.sum_all(nd.sigmoid(nd.segment_sum(x, seg, 3))),
                   RNG.normal(size=(6, 2)))

    def test_segment_softmax(self):
        seg = np.array([0, 0, 0, 1, 1, 2])
        w = nd.Tensor(RNG.normal(size=(6, 2)))
        check_grad(
            lambda x: nd.sum_all(nd.hadamard(nd.segment_softmax(x, seg, 3), w)),
            RNG.normal(size=(6, 2)))

    def test_bce(self):
        x0 = RNG.uniform(0.1, 0.9, size=(8,))
        t = (RNG.random(8) > 0.5).astype(float)
        check_grad(lambda x: nd.bce(x, t), x0)

    def test_batch_norm_train(self):
        gamma = nd.Tensor(RNG.normal(size=(4,)))
        beta = nd.Tensor(RNG.normal(size=(4,)))

        def build(x):
            state = nd.BatchNormState(4)
            return nd.sum_all(nd.sigmoid(nd.batch_norm(x, gamma, beta, state, True)))

        check_grad(build, RNG.normal(size=(6, 4)))

    def test_batch_norm_affine_grads(self):
        x0 = RNG.normal(size=(6, 4))
        state = nd.BatchNormState(4)
        for which in ("gamma", "beta"):
            p0 = RNG.normal(size=(4,))

            def build(p, which=which):
                g = p if which == "gamma" else nd.Tensor(np.ones(4))
                b = p if which == "beta" else nd.Tensor(np.zeros(4))
                st0 = nd.BatchNormState(4)
                return nd.sum_all(
                    nd.sigmoid(nd.batch_norm(nd.Tensor(x0), g, b, st0, True)))

            check_grad(build, p0)
        assert state.running_var[0] == 1.0  # untouched instance

    def test_batch_norm_inference(self):
        state = nd.BatchNormState(3)
        state.running_mean = np.array([1.0, -1.0, 0.5])
        state.running_var = np.array([4.0, 0.25, 1.0])
        gamma = nd.Tensor(RNG.normal(size=(3,)))
        beta = nd.Tensor(RNG.normal(size=(3,)))
        check_grad(
            lambda x: nd.sum_all(nd.sigmoid(nd.batch_norm(x, gamma, beta, state, False))),
            RNG.normal(size=(5, 3)))


class TestOpSemantics:
    def test_segment_softmax_matches_direct_formula(self):
        x = RNG.normal(size=(7,))
        seg = np.array([0, 1, 0, 1, 0, 2, 2])
        y = nd.segment_softmax(nd.Tensor(x), seg, 3).data
        for s in range(3):
            m = seg == s
            expect = np.exp(x[m]) / np.exp(x[m]).sum()
            np.testing.assert_allclose(y[m], expect, rtol=1e-12)

    def test_segment_softmax_sums_to_one(self):
        for trial in range(20):
            rng = np.random.default_rng(trial)
            n, k = rng.integers(2, 40), rng.integers(1, 5)
            seg = np.sort(rng.integers(0, k, size=n))
            x = nd.Tensor(rng.normal(size=(n,)) * 10)
            y = nd.segment_softmax(x, seg, k).data
            sums = np.zeros(k)
            np.add.at(sums, seg, y)
            present = np.isin(np.arange(k), seg)
            np.testing.assert_allclose(sums[present], 1.0, atol=1e-12)

    def test_segment_softmax_shift_invariant(self):
        x = RNG.normal(size=(6,))
        seg = np.array([0, 0, 1, 1, 1, 0])
        a = nd.segment_softmax(nd.Tensor(x), seg, 2).data
        b = nd.segment_softmax(nd.Tensor(x + 1000.0), seg, 2).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_dropout_inference_identity(self):
        x = nd.Tensor(RNG.normal(size=(5, 5)))
        y = nd.dropout(x, 0.4, 0, training=False)
        assert y is x

    def test_dropout_zero_rate_identity(self):
        x = nd.Tensor(RNG.normal(size=(5, 5)))
        assert nd.dropout(x, 0.0, 0, training=True) is x

    def test_dropout_invalid_rate(self):
        x = nd.Tensor(np.ones(3))
        with pytest.raises(ConfigError):
            nd.dropout(x, 1.0, 0, training=True)
        with pytest.raises(ConfigError):
            nd.dropout(x, -0.1, 0, training=True)

    def test_dropout_seed_deterministic(self):
        x = nd.Tensor(RNG.normal(size=(10, 10)))
        a = nd.dropout(x, 0.5, 77, training=True).data
        b = nd.dropout(x, 0.5, 77, training=True).data
        np.testing.assert_array_equal(a, b)

    def test_dropout_expectation(self):
        # mean over 10^4 seeds approximates the identity
        x = nd.Tensor(np.full((4, 4), 2.0))
        acc = np.zeros((4, 4))
        for seed in range(10_000):
            acc += nd.dropout(x, 0.3, seed, training=True).data
        mean = acc / 10_000
        assert abs(mean.mean() - 2.0) / 2.0 < 0.01
        np.testing.assert_allclose(mean, x.data, rtol=0.05)

    def test_dropout_grad_masks_match(self):
        x = nd.Tensor(RNG.normal(size=(8, 8)), requires_grad=True)
        with nd.Tape() as tape:
            y = nd.dropout(x, 0.5, 5, training=True)
            loss = nd.sum_all(y)
        tape.backward(loss)
        keep = y.data != 0
        np.testing.assert_allclose(x.grad[keep], 2.0, rtol=1e-12)
        np.testing.assert_array_equal(x.grad[~keep], 0.0)

    def test_bce_hand_value(self):
        # -log(0.5) twice, averaged
        loss = nd.bce(nd.Tensor([0.5, 0.5]), np.array([1.0, 0.0]))
        assert abs(loss.data.item() - math.log(2.0)) < 1e-12

    def test_bce_clamps_at_zero_and_one(self):
        loss = nd.bce(nd.Tensor([0.0, 1.0]), np.array([1.0, 0.0]))
        expect = -math.log(nd.BCE_EPS)
        assert abs(loss.data.item() - expect) < 1e-9
        x = nd.Tensor([0.0, 1.0], requires_grad=True)
        with nd.Tape() as tape:
            loss = nd.bce(x, np.array([1.0, 0.0]))
        tape.backward(loss)
        np.testing.assert_array_equal(x.grad, 0.0)  # flat outside the clamp

    def test_batch_norm_normalizes_batch(self):
        x = nd.Tensor(RNG.normal(loc=3.0, scale=2.0, size=(64, 5)))
        state = nd.BatchNormState(5)
        gamma = nd.Tensor(np.ones(5))
        beta = nd.Tensor(np.zeros(5))
        y = nd.batch_norm(x, gamma, beta, state, True).data
        np.testing.assert_allclose(y.mean(axis=0), 0.0, atol=1e-12)
        np.testing.assert_allclose(y.var(axis=0), 1.0, atol=1e-4)

    def test_batch_norm_running_stats_update(self):
        x = RNG.normal(size=(32, 3))
        state = nd.BatchNormState(3)
        gamma, beta = nd.Tensor(np.ones(3)), nd.Tensor(np.zeros(3))
        nd.batch_norm(nd.Tensor(x), gamma, beta, state, True)
        np.testing.assert_allclose(state.running_mean, 0.1 * x.mean(axis=0), rtol=1e-12)
        np.testing.assert_allclose(state.running_var,
                                   0.9 * 1.0 + 0.1 * x.var(axis=0), rtol=1e-12)

    def test_batch_norm_inference_uses_running_stats(self):
        state = nd.BatchNormState(2)
        state.running_mean = np.array([2.0, -2.0])
        state.running_var = np.array([4.0, 9.0])
        x = nd.Tensor([[4.0, 1.0]])
        y = nd.batch_norm(x, nd.Tensor(np.ones(2)), nd.Tensor(np.zeros(2)), state, False)
        np.testing.assert_allclose(
            y.data, [[2.0 / math.sqrt(4 + 1e-5), 3.0 / math.sqrt(9 + 1e-5)]], rtol=1e-12)

    def test_batch_norm_rejects_single_row_training(self):
        state = nd.BatchNormState(2)
        with pytest.raises(DimensionError):
            nd.batch_norm(nd.Tensor([[1.0, 2.0]]), nd.Tensor(np.ones(2)),
                          nd.Tensor(np.zeros(2)), state, True)

    def test_matmul_shape_errors(self):
        with pytest.raises(DimensionError):
            nd.matmul(nd.Tensor(np.ones((2, 3))), nd.Tensor(np.ones((4, 2))))
        with pytest.raises(DimensionError):
            nd.matmul(nd.Tensor(np.ones(3)), nd.Tensor(np.ones((3, 2))))


class TestSerialization:
    def test_round_trip(self):
        buf = io.BytesIO()
        arrs = [RNG.normal(size=s) for s in [(3, 4), (7,), (2, 3, 4), ()]]
        for a in arrs:
            nd.write_array(buf, a)
        buf.seek(0)
        for a in arrs:
            b = nd.read_array(buf)
            assert b.shape == np.asarray(a).shape
            np.testing.assert_array_equal(b, a)

    @given(st.lists(st.floats(allow_nan=False, allow_infinity=False,
                              width=64), min_size=1, max_size=40))
    @settings(max_examples=50, deadline=None)
    def test_round_trip_exact_bits(self, values):
        buf = io.BytesIO()
        a = np.array(values)
        nd.write_array(buf, a)
        buf.seek(0)
        b = nd.read_array(buf)
        assert a.tobytes() == b.tobytes()
