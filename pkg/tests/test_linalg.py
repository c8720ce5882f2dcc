import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import block_ones, fd_grad, rel_err
from gmpool import autodiff as ad
from gmpool.linalg import (
    ConvergenceError,
    EigBackwardConfig,
    eigh,
    sqrt_clamped,
    sqrt_clamped_op,
    sym_eig,
    sym_eig_backward,
)


def _random_sym(rng, n, scale=1.0):
    a = rng.normal(scale=scale, size=(n, n))
    return 0.5 * (a + a.T)


def _with_spectrum(rng, lam):
    q, _ = np.linalg.qr(rng.normal(size=(len(lam), len(lam))))
    return (q * np.asarray(lam, float)) @ q.T


class TestSymEig:
    def test_identity(self):
        eig = sym_eig(np.eye(3))
        np.testing.assert_array_equal(eig.values, [1.0, 1.0, 1.0])
        np.testing.assert_allclose(eig.basis.T @ eig.basis, np.eye(3), atol=1e-12)

    def test_block_eigenvalues_match_characteristic_polynomial(self):
        m = block_ones(2, 1)
        # roots of det(xI - M) from numpy's companion-matrix solver
        oracle = np.sort(np.roots(np.poly(m)).real)[::-1]
        np.testing.assert_allclose(oracle, [2.0, 1.0, 0.0], atol=1e-12)
        np.testing.assert_allclose(sym_eig(m).values, oracle, atol=1e-12)

    def test_random_reconstruction(self, rng):
        m = _random_sym(rng, 6)
        assert np.linalg.norm(sym_eig(m).reconstruct() - m) < 1e-10

    def test_agrees_with_lapack(self, rng):
        m = _random_sym(rng, 12)
        np.testing.assert_allclose(sym_eig(m).values, np.linalg.eigvalsh(m)[::-1], atol=1e-10)

    @given(st.integers(1, 64), st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3))
    def test_invariants(self, n, seed, scale):
        rng = np.random.default_rng(seed)
        m = _random_sym(rng, n)
        m *= scale / max(np.linalg.norm(m), 1e-300)
        eig = sym_eig(m)
        assert np.linalg.norm(eig.basis.T @ eig.basis - np.eye(n)) <= 1e-10
        assert np.linalg.norm(eig.reconstruct() - m) <= 1e-8
        assert np.all(np.diff(eig.values) <= 0)

    def test_sign_gauge(self, rng):
        eig = sym_eig(_random_sym(rng, 7))
        for k in range(7):
            col = eig.basis[:, k]
            first = col[np.flatnonzero(np.abs(col) > 1e-12)[0]]
            assert first > 0

    def test_symmetrises_tiny_asymmetry(self, rng):
        m = _random_sym(rng, 4)
        m[0, 1] += 1e-12
        sym = 0.5 * (m + m.T)
        assert np.linalg.norm(sym_eig(m).reconstruct() - sym) < 1e-10

    def test_errors(self):
        with pytest.raises(ValueError):
            sym_eig(np.ones((2, 3)))
        with pytest.raises(ValueError):
            sym_eig(np.array([[0.0, 1.0], [0.0, 0.0]]))

    def test_sweep_cap_reports_residual(self, rng):
        with pytest.raises(ConvergenceError) as info:
            sym_eig(_random_sym(rng, 10), max_sweeps=1)
        assert info.value.residual > 0 and info.value.sweeps == 1


class TestEigBackward:
    def test_trace_gradient_is_identity(self, rng):
        eig = sym_eig(_random_sym(rng, 5))
        g = sym_eig_backward(eig, np.zeros((5, 5)), np.ones(5))
        np.testing.assert_allclose(g, np.eye(5), atol=1e-12)

    def test_sum_of_squares_matches_fd(self, rng):
        m = _with_spectrum(rng, [5.0, 3.5, 2.0, 0.5, -1.0])
        eig = sym_eig(m)
        got = sym_eig_backward(eig, None, 2 * eig.values)
        num = fd_grad(lambda: float(np.sum(sym_eig(0.5 * (m + m.T)).values ** 2)), m, eps=1e-6)
        # perturbing m[i, j] moves both symmetric entries, so compare the symmetric part
        assert rel_err(got, 0.5 * (num + num.T)) < 1e-5

    def test_basis_gradient_matches_fd(self, rng):
        m = _with_spectrum(rng, [4.0, 2.0, 1.0, -0.5])
        w = rng.normal(size=(4, 4))
        a = ad.tensor(m, requires_grad=True)

        def loss():
            _, basis, values = eigh(ad.scale(ad.add(a, ad.transpose(a)), 0.5))
            return ad.add(ad.sum_all(ad.mul(basis, ad.constant(w))), ad.sum_all(ad.reshape(values, (1, 4))))

        ad.backward(loss())
        num = fd_grad(lambda: float(loss().values), a.values)
        assert rel_err(a.grad, num) < 1e-4

    @pytest.mark.parametrize("n", [2, 5, 16])
    def test_degenerate_identity_is_bounded(self, rng, n):
        cfg = EigBackwardConfig()
        eig = sym_eig(np.eye(n))
        up = rng.normal(size=(n, n))
        g = sym_eig_backward(eig, up, None, cfg)
        assert np.all(np.isfinite(g))
        assert np.max(np.abs(g)) <= cfg.k_cap * np.linalg.norm(up)

    def test_near_degenerate_gap_is_clamped(self, rng):
        cfg = EigBackwardConfig(1e-4)
        m = _with_spectrum(rng, [1.0 + 1e-9, 1.0, -2.0])
        eig = sym_eig(m)
        up = rng.normal(size=(3, 3))
        g = sym_eig_backward(eig, up, None, cfg)
        assert np.max(np.abs(g)) <= cfg.k_cap * np.linalg.norm(up)

    def test_result_is_symmetric(self, rng):
        eig = sym_eig(_random_sym(rng, 6))
        g = sym_eig_backward(eig, rng.normal(size=(6, 6)), rng.normal(size=6))
        np.testing.assert_array_equal(g, g.T)

    def test_shape_mismatch(self, rng):
        eig = sym_eig(_random_sym(rng, 3))
        with pytest.raises(ValueError):
            sym_eig_backward(eig, np.zeros((2, 2)), None)

    def test_config_validation(self):
        assert EigBackwardConfig(1e-3).k_cap == pytest.approx(1e3)
        with pytest.raises(ValueError):
            EigBackwardConfig(0.0)
        with pytest.raises(ValueError):
            EigBackwardConfig(1e-4, k_cap=5.0)


class TestSqrtClamped:
    def test_values(self):
        np.testing.assert_array_equal(sqrt_clamped([4.0, 1.0, 0.0]), [2.0, 1.0, 0.0])
        np.testing.assert_array_equal(sqrt_clamped([2.0, -0.3]), [np.sqrt(2.0), 0.0])

    def test_derivative_at_four(self):
        # d sqrt(x)/dx = 1 / (2 sqrt(x)) = 0.25 at x = 4, confirmed by central differences
        lam = ad.tensor([4.0], requires_grad=True)
        ad.backward(ad.sum_all(ad.reshape(sqrt_clamped_op(lam), (1, 1))))
        num = fd_grad(lambda: float(np.sqrt(lam.values[0])), lam.values)
        assert num[0] == pytest.approx(0.25, rel=1e-8)
        assert lam.grad[0] == 0.25

    def test_clamped_entries_have_zero_gradient(self):
        lam = ad.tensor([-1.0, 0.0, 1e-12], requires_grad=True)
        ad.backward(ad.sum_all(ad.reshape(sqrt_clamped_op(lam), (1, 3))))
        assert lam.grad[0] == 0.0 and lam.grad[1] == 0.0
        assert np.isfinite(lam.grad[2]) and lam.grad[2] <= 0.5 / np.sqrt(1e-4)
