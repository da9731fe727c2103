import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from gradcheck import KERNELS, TOL, kernel_errors
from pfnlab import nn
from pfnlab.errors import ContractError, DimensionError, NumericError

finite = st.floats(-50, 50, allow_nan=False, width=64)


def naive_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            s = 0.0
            for t in range(a.shape[1]):
                s += float(a[i, t]) * float(b[t, j])
            out[i, j] = s
    return out


class TestMatmul:
    def test_identity(self):
        np.testing.assert_array_equal(nn.matmul(np.eye(2), np.eye(2)), np.eye(2))

    def test_small_product(self):
        out = nn.matmul(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[0.0], [1.0]]))
        np.testing.assert_array_equal(out, [[2.0], [4.0]])

    def test_matches_triple_loop(self):
        rng = np.random.default_rng(0)
        a, b = rng.standard_normal((5, 7)), rng.standard_normal((7, 3))
        np.testing.assert_allclose(nn.matmul(a.astype(np.float32), b.astype(np.float32)),
                                   naive_matmul(a.astype(np.float32), b.astype(np.float32)), rtol=1e-6, atol=1e-6)
        np.testing.assert_allclose(nn.matmul(a, b), naive_matmul(a, b), rtol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            nn.matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_single_row_matches_row_of_larger_product(self):
        rng = np.random.default_rng(1)
        a, b = rng.standard_normal((2, 40)).astype(np.float32), rng.standard_normal((40, 9)).astype(np.float32)
        np.testing.assert_array_equal(nn.matmul(a[:1], b)[0], nn.matmul(a, b)[0])

    def test_deterministic(self):
        rng = np.random.default_rng(2)
        a, b = rng.standard_normal((30, 20)), rng.standard_normal((20, 10))
        np.testing.assert_array_equal(nn.matmul(a, b), nn.matmul(a.copy(), b.copy()))


class TestSoftmax:
    def test_uniform_row(self):
        np.testing.assert_allclose(nn.softmax_rows(np.zeros((1, 3))), [[1 / 3] * 3], rtol=1e-15)

    def test_no_overflow(self):
        np.testing.assert_allclose(nn.softmax_rows(np.array([[1000.0, 0.0]])), [[1.0, 0.0]], atol=1e-12)

    def test_direct_evaluation(self):
        e = np.exp([1.0, 2.0, 3.0])
        np.testing.assert_allclose(nn.softmax_rows(np.array([[1.0, 2.0, 3.0]], dtype=np.float32)),
                                   [e / e.sum()], atol=1e-7)

    def test_non_finite_rejected(self):
        with pytest.raises(NumericError):
            nn.softmax_rows(np.array([[np.nan, 0.0]]))

    @given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=2, max_side=8), elements=finite))
    def test_rows_are_distributions(self, m):
        p = nn.softmax_rows(m)
        assert (p >= 0).all()
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)


class TestLayerNorm:
    def test_constant_row(self):
        out = nn.layer_norm(np.full((1, 4), 3.0), np.ones(4), np.zeros(4))
        np.testing.assert_array_equal(out, np.zeros((1, 4)))

    def test_two_points(self):
        out = nn.layer_norm(np.array([[1.0, 3.0]]), np.ones(2), np.zeros(2))
        np.testing.assert_allclose(out, [[-1.0, 1.0]], atol=1e-4)

    def test_random_row_statistics(self):
        rng = np.random.default_rng(3)
        m = rng.standard_normal((6, 9)) * 5 + 2
        out = nn.layer_norm(m, np.ones(9), np.zeros(9))
        ref = (m - m.mean(axis=1, keepdims=True)) / np.sqrt(m.var(axis=1, keepdims=True) + 1e-5)
        np.testing.assert_allclose(out, ref, rtol=1e-12)
        np.testing.assert_allclose(out.mean(axis=1), 0, atol=1e-5)
        np.testing.assert_allclose(out.var(axis=1), 1, atol=1e-5)

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            nn.layer_norm(np.ones((2, 3)), np.ones(2), np.zeros(3))


class TestGelu:
    def test_zero(self):
        assert nn.gelu(np.zeros((1, 1)))[0, 0] == 0.0

    def test_asymptote(self):
        assert abs(nn.gelu(np.array([[10.0]]))[0, 0] - 10.0) < 1e-4

    def test_formula_at_one(self):
        ref = 0.5 * (1 + math.tanh(math.sqrt(2 / math.pi) * (1 + 0.044715)))
        assert nn.gelu(np.array([[1.0]]))[0, 0] == pytest.approx(ref, rel=1e-15)

    def test_non_finite(self):
        with pytest.raises(NumericError):
            nn.gelu(np.array([[np.inf]]))


class TestMaskedAttention:
    def test_single_allowed_key(self):
        rng = np.random.default_rng(4)
        q, k, v = rng.standard_normal((2, 3)), rng.standard_normal((4, 3)), rng.standard_normal((4, 5))
        mask = np.zeros((2, 4), dtype=bool)
        mask[:, 2] = True
        np.testing.assert_array_equal(nn.masked_attention(q, k, v, mask), v[[2, 2]])

    def test_full_mask_matches_dense(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((3, 4))
        s = x @ x.T / 2.0
        w = np.exp(s - s.max(axis=1, keepdims=True))
        ref = (w / w.sum(axis=1, keepdims=True)) @ x
        np.testing.assert_allclose(nn.masked_attention(x, x, x, np.ones((3, 3), bool)), ref, rtol=1e-12)

    def test_masked_value_row_is_ignored(self):
        rng = np.random.default_rng(6)
        q, k, v = rng.standard_normal((3, 4)), rng.standard_normal((5, 4)), rng.standard_normal((5, 2))
        mask = np.ones((3, 5), bool)
        mask[:, 3] = False
        v2 = v.copy()
        v2[3] = 0.0
        np.testing.assert_array_equal(nn.masked_attention(q, k, v, mask), nn.masked_attention(q, k, v2, mask))

    def test_masked_key_gets_zero_weight(self):
        rng = np.random.default_rng(7)
        q, k, v = (rng.standard_normal((3, 4)).astype(np.float32) for _ in range(3))
        mask = np.array([[1, 0, 1], [0, 1, 0], [1, 1, 0]], bool)
        _, p = nn.masked_attention_forward(q, k, v, mask)
        assert (p[~mask] == 0).all()
        k2 = k.copy()
        k2[~mask.any(axis=0)] += 100
        k2[1] *= -3
        out2 = nn.masked_attention(q[[0]], k2, v, mask[[0]])
        np.testing.assert_array_equal(out2, nn.masked_attention(q[[0]], k, v, mask[[0]]))

    def test_all_masked_row_rejected(self):
        mask = np.array([[True, False], [False, False]])
        with pytest.raises(ContractError):
            nn.masked_attention(np.ones((2, 2)), np.ones((2, 2)), np.ones((2, 2)), mask)

    def test_shape_errors(self):
        with pytest.raises(DimensionError):
            nn.masked_attention(np.ones((2, 3)), np.ones((2, 2)), np.ones((2, 2)), np.ones((2, 2), bool))
        with pytest.raises(DimensionError):
            nn.masked_attention(np.ones((2, 2)), np.ones((2, 2)), np.ones((2, 2)), np.ones((2, 3), bool))


class TestCrossEntropy:
    @pytest.mark.parametrize("c", [2, 3, 7])
    def test_uniform_logits(self, c):
        assert nn.cross_entropy(np.zeros((5, c)), np.arange(5) % c) == pytest.approx(math.log(c), abs=1e-15)

    def test_saturation(self):
        logits = 1000.0 * np.eye(3)
        assert nn.cross_entropy(logits, [0, 1, 2]) < 1e-12

    def test_random_case(self):
        rng = np.random.default_rng(8)
        logits = rng.standard_normal((4, 3))
        t = np.array([0, 2, 1, 2])
        ref = np.mean([math.log(sum(math.exp(z) for z in row)) - row[j] for row, j in zip(logits, t)])
        assert nn.cross_entropy(logits.astype(np.float32), t) == pytest.approx(ref, abs=1e-6)
        assert nn.cross_entropy(logits, t) == pytest.approx(ref, abs=1e-14)

    def test_out_of_range_target(self):
        with pytest.raises(IndexError):
            nn.cross_entropy(np.zeros((2, 3)), [0, 3])
        with pytest.raises(IndexError):
            nn.cross_entropy(np.zeros((2, 3)), [-1, 0])

    def test_weights(self):
        rng = np.random.default_rng(9)
        logits = rng.standard_normal((4, 3))
        t = np.array([0, 1, 2, 0])
        full = nn.cross_entropy(logits, t)
        assert nn.cross_entropy(logits, t, np.full(4, 0.25)) == pytest.approx(full, rel=1e-14)
        assert nn.cross_entropy(logits, t, [0.5, 0.5, 0, 0]) == pytest.approx(nn.cross_entropy(logits[:2], t[:2]))


class TestFiniteDiff:
    def test_quadratic(self):
        g = nn.finite_diff_grad(lambda x: float(x[0] ** 2), np.array([3.0]), eps=1e-4)
        assert abs(g[0] - 6.0) < 1e-6

    def test_constant(self):
        np.testing.assert_array_equal(nn.finite_diff_grad(lambda x: 2.0, np.ones(4)), np.zeros(4))

    def test_non_finite(self):
        with pytest.raises(NumericError):
            nn.finite_diff_grad(lambda x: float("nan"), np.ones(2))

    def test_cross_entropy_of_linear(self):
        rng = np.random.default_rng(10)
        X, W, t = rng.standard_normal((6, 4)), rng.standard_normal((4, 3)), rng.integers(0, 3, 6)
        for dtype, tol in ((np.float64, 1e-6), (np.float32, 1e-3)):
            Xd, Wd = X.astype(dtype), W.astype(dtype)
            _, probs = nn.cross_entropy_forward(nn.matmul(Xd, Wd), t)
            _, gW = nn.matmul_backward(nn.cross_entropy_backward(probs, t), Xd, Wd)
            fd = nn.finite_diff_grad(lambda w: nn.cross_entropy(X.astype(dtype).astype(np.float64) @ w, t),
                                     Wd.astype(np.float64), 1e-6)
            assert nn.relative_error(gW, fd) < tol


class TestBackwardKernels:
    @pytest.mark.parametrize("dtype", [np.float64, np.float32], ids=["f64", "f32"])
    @pytest.mark.parametrize("name", sorted(KERNELS))
    def test_matches_finite_differences(self, name, dtype):
        for seed in range(20):
            errs = kernel_errors(name, seed, dtype)
            assert max(errs.values()) < TOL[dtype], (seed, errs)

    def test_layer_norm_backward_with_cache(self):
        rng = np.random.default_rng(11)
        m, g = rng.standard_normal((3, 5)), rng.standard_normal(5)
        out, cache = nn.layer_norm_forward(m, g, np.zeros(5))
        grad = rng.standard_normal(out.shape)
        for a, b in zip(nn.layer_norm_backward(grad, m, g, cache=cache), nn.layer_norm_backward(grad, m, g)):
            np.testing.assert_array_equal(a, b)

    def test_batched_matmul_backward_sums_broadcast_axes(self):
        rng = np.random.default_rng(12)
        a, b = rng.standard_normal((3, 4, 5)), rng.standard_normal((5, 2))
        grad = rng.standard_normal((3, 4, 2))
        _, gb = nn.matmul_backward(grad, a, b)
        np.testing.assert_allclose(gb, np.einsum("bij,bik->jk", a, grad), rtol=1e-12)


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        p = {"w": np.array([1.0, -2.0])}
        st_ = nn.AdamState(lr=0.1)
        nn.adam_step(p, {"w": np.zeros(2)}, st_)
        np.testing.assert_array_equal(p["w"], [1.0, -2.0])
        assert st_.step == 1

    def test_first_step_closed_form(self):
        p = {"w": np.zeros(3)}
        g = np.array([0.3, -2.0, 1e-3])
        nn.adam_step(p, {"w": g}, nn.AdamState(lr=0.01))
        # bias-corrected m/sqrt(v) = g/|g| up to eps
        np.testing.assert_allclose(p["w"], -0.01 * np.sign(g) * np.abs(g) / (np.abs(g) + 1e-8), rtol=1e-12)

    def test_quadratic_run(self):
        p = {"x": np.array([1.0])}
        st_ = nn.AdamState(lr=0.1)
        for _ in range(100):
            nn.adam_step(p, {"x": 2 * p["x"]}, st_)
        assert abs(p["x"][0]) < 0.5
        assert st_.step == 100

    def test_lr_override_zero(self):
        p = {"x": np.array([1.0])}
        nn.adam_step(p, {"x": np.array([5.0])}, nn.AdamState(), lr=0.0)
        assert p["x"][0] == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            nn.adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, nn.AdamState())
        st_ = nn.AdamState()
        nn.adam_step({"w": np.zeros(2)}, {"w": np.zeros(2)}, st_)
        with pytest.raises(DimensionError):
            nn.adam_step({"w": np.zeros(3)}, {"w": np.zeros(3)}, st_)
