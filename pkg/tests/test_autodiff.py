"""Engine-level checks: primitives against independent oracles."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adapt.autodiff import (
    GradCheckReport,
    Tensor,
    concat,
    cosine,
    grad_check,
    masked_softmax,
    matmul,
    parameter,
    unfold1d,
    unfold2d,
)
from adapt.errors import ShapeError
from adapt.nn import conv1d, conv2d, gelu, layer_norm, logsumexp
from adapt.rng import RandomStream


def naive_matmul(a, b):
    """Triple-loop reference product."""
    n, k = a.shape
    k2, m = b.shape
    assert k == k2
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            for p in range(k):
                out[i, j] += a[i, p] * b[p, j]
    return out


class TestMatmul:
    def test_identity(self):
        out = matmul(np.eye(2), np.array([[2.0, 3.0], [4.0, 5.0]]))
        np.testing.assert_array_equal(out.data, [[2.0, 3.0], [4.0, 5.0]])

    def test_hand_product(self):
        out = matmul(np.array([[1.0, 2.0]]), np.array([[3.0], [4.0]]))
        np.testing.assert_array_equal(out.data, [[11.0]])

    def test_matches_triple_loop_oracle(self):
        rng = RandomStream(7)
        a = rng.normal((5, 4))
        b = rng.normal((4, 3))
        np.testing.assert_allclose(matmul(a, b).data, naive_matmul(a, b), atol=1e-12)

    def test_dimension_mismatch_names_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            matmul(np.zeros((2, 3)), np.zeros((2, 3)))

    def test_batched_matches_per_slice(self):
        rng = RandomStream(8)
        a = rng.normal((3, 4, 5))
        b = rng.normal((3, 5, 2))
        out = matmul(a, b).data
        for i in range(3):
            np.testing.assert_allclose(out[i], a[i] @ b[i], atol=1e-12)


class TestMaskedSoftmax:
    def test_worked_example(self):
        out = masked_softmax(np.array([5.0, -2.0, 7.0]), np.array([1.0, 0.0, 1.0]))
        e5, e7 = np.exp(5.0), np.exp(7.0)
        np.testing.assert_allclose(out, [e5 / (e5 + e7), 0.0, e7 / (e5 + e7)], atol=1e-12)
        assert abs(out[0] - 0.1192) < 1e-4 and abs(out[2] - 0.8808) < 1e-4

    def test_single_unmasked_entry(self):
        np.testing.assert_array_equal(masked_softmax(np.array([3.7]), np.array([1.0])), [1.0])

    def test_all_masked_is_zero_vector(self):
        out = masked_softmax(np.array([1.0, 2.0, 3.0]), np.zeros(3))
        np.testing.assert_array_equal(out, np.zeros(3))

    def test_huge_masked_scores_do_not_overflow(self):
        out = masked_softmax(np.array([1e6, 0.0, 1.0]), np.array([0.0, 1.0, 1.0]))
        assert np.isfinite(out).all() and out[0] == 0.0

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=50, deadline=None)
    def test_sums_to_one_and_compaction_oracle(self, seed):
        rng = RandomStream(seed)
        n = int(rng.integers(1, 9))
        scores = rng.normal(n) * 5.0
        mask = (rng.random(n) < 0.6).astype(float)
        out = masked_softmax(scores, mask)
        assert np.all(out[mask == 0.0] == 0.0)
        if mask.sum() == 0:
            np.testing.assert_array_equal(out, np.zeros(n))
            return
        assert abs(out.sum() - 1.0) < 1e-12
        # compaction oracle: plain softmax on the unmasked entries, scattered back
        sub = scores[mask == 1.0]
        e = np.exp(sub - sub.max())
        expected = np.zeros(n)
        expected[mask == 1.0] = e / e.sum()
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_all_ones_mask_equals_plain_softmax(self):
        scores = np.array([0.3, -1.2, 2.0, 0.0])
        e = np.exp(scores - scores.max())
        np.testing.assert_allclose(masked_softmax(scores, np.ones(4)), e / e.sum(), atol=1e-12)

    def test_rejects_non_binary_mask(self):
        with pytest.raises(ValueError):
            masked_softmax(np.zeros(3), np.array([0.5, 1.0, 0.0]))


class TestCosine:
    def test_parallel(self):
        assert cosine([1.0, 0.0], [1.0, 0.0]) == 1.0

    def test_orthogonal(self):
        assert cosine([1.0, 0.0], [0.0, 1.0]) == 0.0

    def test_hand_computed(self):
        assert abs(cosine([1.0, 2.0, 2.0], [2.0, 1.0, 2.0]) - 8.0 / 9.0) < 1e-12

    def test_zero_norm_errors(self):
        with pytest.raises(ValueError):
            cosine([0.0, 0.0], [1.0, 0.0])

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_range(self, seed):
        rng = RandomStream(seed)
        u, v = rng.normal(4) + 1e-3, rng.normal(4) + 1e-3
        assert -1.0 <= cosine(u, v) <= 1.0


class TestGradCheck:
    def test_square_function(self):
        report = grad_check(lambda ps: ps[0] * ps[0], [parameter(np.array(3.0))], tol=1e-8)
        assert isinstance(report, GradCheckReport)
        assert report.passed and report.max_rel_error < 1e-8

    def test_nonfinite_errors(self):
        with pytest.raises(ValueError):
            grad_check(lambda ps: ps[0].log(), [parameter(np.array(-1.0))])

    def test_catches_wrong_gradient(self):
        # f = x^2 but backward pretends f = x: must fail
        def bad(ps):
            x = ps[0]
            out = Tensor(x.data**2, True, (x,), None)

            def bw(g):
                x.grad = g.copy() if x.grad is None else x.grad + g

            out._backward = bw
            return out

        report = grad_check(bad, [parameter(np.array(3.0))], tol=1e-4)
        assert not report.passed


def _fd_check(f, params, tol=1e-6):
    report = grad_check(f, params, tol=tol)
    assert report.passed, f"max rel err {report.max_rel_error:.3e}"


class TestPrimitiveGradients:
    """Every primitive vs central finite differences."""

    def setup_method(self):
        self.rng = RandomStream(123)

    def test_add_mul_broadcast(self):
        a = parameter(self.rng.normal((3, 4)))
        b = parameter(self.rng.normal((4,)))
        _fd_check(lambda ps: ((ps[0] + ps[1]) * ps[0]).sum(), [a, b])

    def test_matmul(self):
        a = parameter(self.rng.normal((3, 4)))
        b = parameter(self.rng.normal((4, 2)))
        _fd_check(lambda ps: matmul(ps[0], ps[1]).sum(), [a, b])

    def test_batched_matmul_with_2d_weight(self):
        a = parameter(self.rng.normal((2, 3, 4)))
        w = parameter(self.rng.normal((4, 5)))
        _fd_check(lambda ps: (matmul(ps[0], ps[1]) ** 2.0).sum(), [a, w])

    def test_reductions_and_shape_ops(self):
        a = parameter(self.rng.normal((2, 3, 4)))
        _fd_check(
            lambda ps: (ps[0].swapaxes(1, 2).reshape((2, 12)).sum(axis=1) ** 2.0).sum(),
            [a],
        )

    def test_elementwise_chain(self):
        a = parameter(self.rng.normal((5,)) * 0.5)
        _fd_check(lambda ps: ((ps[0].tanh() + 2.0).log() * ps[0].exp()).sum(), [a])

    def test_getitem(self):
        a = parameter(self.rng.normal((4, 3)))
        _fd_check(lambda ps: (ps[0][1:3] * ps[0][0]).sum(), [a])

    def test_concat(self):
        a = parameter(self.rng.normal((2, 3)))
        b = parameter(self.rng.normal((4, 3)))
        _fd_check(lambda ps: (concat([ps[0], ps[1]], axis=0) ** 2.0).sum(), [a, b])

    def test_masked_softmax(self):
        a = parameter(self.rng.normal((3, 5)))
        mask = (self.rng.random((3, 5)) < 0.7).astype(float)
        mask[:, 0] = 1.0
        w = self.rng.normal((3, 5))
        _fd_check(lambda ps: (masked_softmax(ps[0], mask) * Tensor(w)).sum(), [a])

    def test_unfold1d(self):
        a = parameter(self.rng.normal((2, 3, 11)))
        _fd_check(lambda ps: (unfold1d(ps[0], 4, 2) ** 2.0).sum(), [a])

    def test_unfold2d(self):
        a = parameter(self.rng.normal((2, 2, 7, 7)))
        _fd_check(lambda ps: (unfold2d(ps[0], 3, 2) ** 2.0).sum(), [a])

    def test_conv1d(self):
        x = parameter(self.rng.normal((2, 2, 12)))
        w = parameter(self.rng.normal((3, 2, 5)) * 0.3)
        b = parameter(self.rng.normal((3,)) * 0.1)
        _fd_check(lambda ps: (conv1d(ps[0], ps[1], ps[2], 2) ** 2.0).sum(), [x, w, b])

    def test_conv2d(self):
        x = parameter(self.rng.normal((2, 1, 8, 8)))
        w = parameter(self.rng.normal((2, 1, 3, 3)) * 0.3)
        b = parameter(self.rng.normal((2,)) * 0.1)
        _fd_check(lambda ps: (conv2d(ps[0], ps[1], ps[2], 2) ** 2.0).sum(), [x, w, b])

    def test_gelu_layer_norm_logsumexp(self):
        x = parameter(self.rng.normal((3, 6)))
        g = parameter(np.ones(6) + 0.1 * self.rng.normal(6))
        b = parameter(0.1 * self.rng.normal(6))
        _fd_check(lambda ps: logsumexp(gelu(layer_norm(ps[0], ps[1], ps[2]))).sum(), [x, g, b])

    def test_shared_node_accumulates(self):
        x = parameter(np.array([2.0]))
        y = x * x  # reused twice
        z = (y * y).sum()
        z.backward()
        assert x.grad is not None and abs(x.grad[0] - 32.0) < 1e-12  # d(x^4)/dx = 4x^3


class TestConvForwardOracle:
    def test_conv1d_matches_direct_loops(self):
        rng = RandomStream(5)
        x, w, b = rng.normal((2, 3, 10)), rng.normal((4, 3, 3)), rng.normal((4,))
        out = conv1d(Tensor(x), Tensor(w), Tensor(b), 2).data
        l_out = (10 - 3) // 2 + 1
        expected = np.zeros((2, 4, l_out))
        for bi in range(2):
            for f in range(4):
                for j in range(l_out):
                    expected[bi, f, j] = (x[bi, :, 2 * j : 2 * j + 3] * w[f]).sum() + b[f]
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_conv2d_matches_direct_loops(self):
        rng = RandomStream(6)
        x, w, b = rng.normal((2, 2, 7, 7)), rng.normal((3, 2, 3, 3)), rng.normal((3,))
        out = conv2d(Tensor(x), Tensor(w), Tensor(b), 2).data
        n = (7 - 3) // 2 + 1
        expected = np.zeros((2, 3, n, n))
        for bi in range(2):
            for f in range(3):
                for i in range(n):
                    for j in range(n):
                        patch = x[bi, :, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3]
                        expected[bi, f, i, j] = (patch * w[f]).sum() + b[f]
        np.testing.assert_allclose(out, expected, atol=1e-12)
