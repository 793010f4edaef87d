import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from opendx.numerics import NumericsError, entropy, entropy_rows, log_softmax, matmul, softmax, sym_eigen


def triple_loop(a, b):
    n, k = len(a), len(b)
    m = len(b[0])
    out = [[0.0] * m for _ in range(n)]
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += a[i][t] * b[t][j]
            out[i][j] = s
    return np.array(out)


class TestMatmul:
    def test_identity(self, rng):
        m = rng.normal(size=(3, 4))
        assert np.array_equal(matmul(np.eye(3), m), m)

    def test_hand_product(self):
        assert matmul([[1, 2], [3, 4]], [[0], [1]]).tolist() == [[2.0], [4.0]]

    def test_triple_loop_oracle(self, rng):
        a, b = rng.normal(size=(5, 7)), rng.normal(size=(7, 3))
        np.testing.assert_allclose(matmul(a, b), triple_loop(a.tolist(), b.tolist()),
                                   rtol=0, atol=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(NumericsError):
            matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_rejects_vectors(self):
        with pytest.raises(NumericsError):
            matmul(np.ones(3), np.ones((3, 1)))

    @given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6), st.integers(1, 6),
           st.integers(0, 2**32 - 1))
    def test_associativity(self, n, k, m, p, seed):
        r = np.random.default_rng(seed)
        a, b, c = r.normal(size=(n, k)), r.normal(size=(k, m)), r.normal(size=(m, p))
        left, right = matmul(matmul(a, b), c), matmul(a, matmul(b, c))
        scale = max(1.0, np.abs(left).max())
        assert np.abs(left - right).max() <= 1e-9 * scale


class TestSymEigen:
    def test_diagonal(self):
        w, v = sym_eigen(np.diag([3.0, 1.0, 2.0]))
        assert w.tolist() == [3.0, 2.0, 1.0]
        np.testing.assert_array_equal(np.abs(v), np.eye(3)[:, [0, 2, 1]])

    def test_textbook_2x2(self):
        w, v = sym_eigen([[2.0, 1.0], [1.0, 2.0]])
        np.testing.assert_allclose(w, [3.0, 1.0], atol=1e-12)
        s = 1 / math.sqrt(2)
        np.testing.assert_allclose(np.abs(v[:, 0]), [s, s], atol=1e-12)
        assert abs(abs(v[:, 1] @ np.array([s, -s])) - 1) < 1e-12

    def test_reconstruction_10x10(self, rng):
        a = rng.normal(size=(10, 10))
        a = a + a.T
        w, v = sym_eigen(a)
        assert np.linalg.norm(v @ np.diag(w) @ v.T - a) <= 1e-8

    def test_against_lapack(self, rng):
        a = rng.normal(size=(25, 25))
        a = a @ a.T
        w, _ = sym_eigen(a)
        np.testing.assert_allclose(w, np.linalg.eigvalsh(a)[::-1], rtol=1e-10, atol=1e-10)

    @given(st.integers(1, 12), st.integers(0, 2**32 - 1))
    def test_properties(self, n, seed):
        r = np.random.default_rng(seed)
        a = r.normal(size=(n, n)) * r.choice([1e-3, 1.0, 1e3])
        a = a + a.T
        w, v = sym_eigen(a)
        assert np.all(np.diff(w) <= 0)
        assert np.abs(v.T @ v - np.eye(n)).max() <= 1e-8
        scale = max(1.0, np.abs(w).max())
        for i in range(n):
            assert np.linalg.norm(a @ v[:, i] - w[i] * v[:, i]) <= 1e-7 * scale

    def test_asymmetric(self):
        with pytest.raises(NumericsError, match="symmetric"):
            sym_eigen([[1.0, 2.0], [0.0, 1.0]])

    def test_non_square(self):
        with pytest.raises(NumericsError):
            sym_eigen(np.ones((2, 3)))

    def test_sweep_cap(self, rng):
        a = rng.normal(size=(8, 8))
        with pytest.raises(NumericsError, match="did not converge"):
            sym_eigen(a + a.T, max_sweeps=1)


class TestSoftmax:
    def test_zero_pair(self):
        assert softmax([0.0, 0.0]).tolist() == [0.5, 0.5]

    def test_no_overflow(self):
        p = softmax([1000.0, 0.0])
        assert np.all(np.isfinite(p))
        assert p[0] == pytest.approx(1.0) and p[1] < 1e-300

    def test_small_oracle(self):
        e = np.exp([1.0, 2.0, 3.0])
        np.testing.assert_allclose(softmax([1.0, 2.0, 3.0]), e / e.sum(), rtol=0, atol=1e-12)

    @given(arrays(np.float64, st.integers(1, 20), elements=st.floats(-50, 50)),
           st.floats(-1e3, 1e3))
    def test_shift_invariance(self, x, c):
        p = softmax(x)
        assert abs(p.sum() - 1) <= 1e-12
        np.testing.assert_allclose(softmax(x + c), p, rtol=0, atol=1e-12)

    def test_log_softmax_consistent(self, rng):
        z = rng.normal(size=(4, 6)) * 10
        np.testing.assert_allclose(np.exp(log_softmax(z)), softmax(z), atol=1e-14)


class TestEntropy:
    def test_one_hot(self):
        assert entropy([0.0, 1.0, 0.0]) == 0.0

    def test_uniform(self):
        assert entropy(np.full(7, 1 / 7)) == pytest.approx(math.log(7), abs=1e-12)

    def test_hand_value(self):
        assert entropy([0.5, 0.25, 0.25]) == pytest.approx(1.5 * math.log(2), abs=1e-12)
        assert entropy([0.5, 0.25, 0.25]) == pytest.approx(1.0397, abs=1e-4)

    @pytest.mark.parametrize("bad", [[0.5, 0.6], [1.2, -0.2], []])
    def test_rejects_non_distributions(self, bad):
        with pytest.raises(NumericsError):
            entropy(bad)

    @given(arrays(np.float64, st.integers(1, 15), elements=st.floats(0, 1)))
    def test_bounds(self, w):
        if w.sum() <= 0:
            return
        p = w / w.sum()
        h = entropy(p)
        assert 0.0 <= h <= math.log(p.size) + 1e-12
        assert entropy_rows(p[None, :])[0] == pytest.approx(h, abs=1e-12)
