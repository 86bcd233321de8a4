"""Tests for matrix splits, gain design, and kernel bases."""

from __future__ import annotations

import numpy as np
import pytest

from blendnet.errors import NotObservable, NotPsd, NotSymmetric
from blendnet.linalg import (
    is_hurwitz,
    kernel_basis,
    observability_split,
    psd_split,
    stabilizing_injection,
)


class TestPsdSplit:
    def test_identity(self):
        split = psd_split(np.eye(2))
        assert split.rank == 2
        assert split.z.shape == (2, 0)
        np.testing.assert_allclose(split.lam, np.eye(2), atol=1e-12)
        np.testing.assert_allclose(np.abs(split.w), np.eye(2), atol=1e-12)

    def test_diag_4_0(self):
        split = psd_split(np.diag([4.0, 0.0]))
        assert split.rank == 1
        np.testing.assert_allclose(split.w, [[1.0], [0.0]], atol=1e-12)
        np.testing.assert_allclose(split.lam, [[2.0]], atol=1e-12)
        np.testing.assert_allclose(split.z, [[0.0], [1.0]], atol=1e-12)

    def test_round_trip_low_rank(self):
        rng = np.random.default_rng(3)
        m = rng.normal(size=(5, 2))
        b = m @ m.T
        split = psd_split(b)
        assert split.rank == 2
        np.testing.assert_allclose(split.w @ split.lam**2 @ split.w.T, b, atol=1e-10)

    def test_round_trip_property(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            n = int(rng.integers(1, 6))
            r = int(rng.integers(0, n + 1))
            m = rng.normal(size=(n, r)) if r else np.zeros((n, 1))
            b = m @ m.T
            split = psd_split(b)
            err = np.linalg.norm(split.w @ split.lam**2 @ split.w.T - b)
            assert err < 1e-9 * max(1.0, np.linalg.norm(b))
            basis = np.hstack([split.w, split.z])
            np.testing.assert_allclose(basis.T @ basis, np.eye(n), atol=1e-10)
            assert np.all(np.diff(np.diag(split.lam)) <= 1e-12)

    def test_not_symmetric(self):
        with pytest.raises(NotSymmetric):
            psd_split(np.array([[1.0, 2.0], [0.0, 1.0]]))

    def test_not_psd(self):
        with pytest.raises(NotPsd):
            psd_split(np.diag([1.0, -1.0]))


class TestObservabilitySplit:
    def test_fully_observable(self):
        s = np.array([[0.0, 1.0], [-1.0, 0.0]])
        split = observability_split(s, np.eye(2))
        assert split.p == 0
        assert split.z_basis.shape == (2, 2)
        assert split.w_basis.shape == (2, 0)

    def test_partially_observable_diag(self):
        # Oracle: observability matrix of (diag(1,2), [1 0]) is
        # [[1,0],[1,0]], rank 1, kernel span{e2}.
        s = np.diag([1.0, 2.0])
        g = np.array([[1.0, 0.0]])
        split = observability_split(s, g)
        assert split.p == 1
        np.testing.assert_allclose(np.abs(split.w_basis), [[0.0], [1.0]], atol=1e-12)
        np.testing.assert_allclose(split.s_bar, [[1.0]], atol=1e-12)
        np.testing.assert_allclose(np.abs(split.g_bar), [[1.0]], atol=1e-12)

    def test_zero_output(self):
        s = np.diag([1.0, 2.0, 3.0])
        split = observability_split(s, np.zeros((1, 3)))
        assert split.p == 3
        assert split.z_basis.shape == (3, 0)
        assert split.s_bar.shape == (0, 0)
        assert split.u_bar.shape == (0, 1)

    def test_block_structure_property(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            n = int(rng.integers(2, 6))
            q = int(rng.integers(1, 3))
            s = rng.normal(size=(n, n))
            # Mix fully random pairs with structurally unobservable ones.
            g = rng.normal(size=(q, n))
            if rng.random() < 0.5:
                g[:, rng.integers(0, n)] = 0.0
                s = np.diag(rng.normal(size=n))
            split = observability_split(s, g)
            basis = np.hstack([split.z_basis, split.w_basis])
            np.testing.assert_allclose(basis.T @ basis, np.eye(n), atol=1e-9)
            # G annihilates the unobservable directions.
            np.testing.assert_allclose(
                g @ split.w_basis, np.zeros((q, split.p)), atol=1e-9
            )
            # The unobservable subspace is S-invariant, so Z^T S W = 0.
            np.testing.assert_allclose(
                split.z_basis.T @ s @ split.w_basis,
                np.zeros((n - split.p, split.p)),
                atol=1e-8,
            )


class TestStabilizingInjection:
    def test_scalar_placement(self):
        gain = stabilizing_injection(np.array([[1.0]]), np.array([[1.0]]))
        np.testing.assert_allclose(gain, [[2.0]], atol=1e-10)

    def test_double_integrator_placement(self):
        s = np.array([[0.0, 1.0], [0.0, 0.0]])
        g = np.array([[1.0, 0.0]])
        gain = stabilizing_injection(s, g)
        eigs = np.sort(np.linalg.eigvals(s - gain @ g).real)
        np.testing.assert_allclose(eigs, [-2.0, -1.0], atol=1e-8)

    def test_unobservable_rejected(self):
        s = -np.eye(2)
        g = np.zeros((1, 2))
        with pytest.raises(NotObservable):
            stabilizing_injection(s, g)

    def test_multi_output_margin(self):
        rng = np.random.default_rng(9)
        for _ in range(20):
            n = int(rng.integers(2, 5))
            s = rng.normal(size=(n, n))
            g = rng.normal(size=(2, n))
            gain = stabilizing_injection(s, g)
            closed = s - gain @ g
            assert np.max(np.linalg.eigvals(closed).real) <= -0.5 + 1e-9

    def test_margin_invariant_over_random_observable_pairs(self):
        rng = np.random.default_rng(23)
        for _ in range(50):
            n = int(rng.integers(1, 6))
            q = int(rng.integers(1, 3))
            s = rng.normal(size=(n, n))
            g = rng.normal(size=(q, n))
            gain = stabilizing_injection(s, g)
            assert is_hurwitz(s - gain @ g, margin=0.4)


class TestIsHurwitz:
    def test_negative_identity(self):
        assert is_hurwitz(-np.eye(3))

    def test_oscillator_not_hurwitz_at_zero_margin(self):
        assert not is_hurwitz(np.array([[0.0, 1.0], [-1.0, 0.0]]), margin=0.0)

    def test_spectral_shift(self):
        rng = np.random.default_rng(17)
        for _ in range(20):
            a = rng.normal(size=(4, 4))
            rho = np.max(np.abs(np.linalg.eigvals(a)))
            assert is_hurwitz(a - (rho + 1.0) * np.eye(4))

    def test_empty_matrix(self):
        assert is_hurwitz(np.zeros((0, 0)))


class TestKernelBasis:
    def test_row_vector(self):
        basis = kernel_basis(np.array([[1.0, 1.0]]))
        assert basis.shape == (2, 1)
        expected = np.array([1.0, -1.0]) / np.sqrt(2.0)
        assert np.allclose(basis[:, 0], expected) or np.allclose(basis[:, 0], -expected)

    def test_invertible_matrix(self):
        basis = kernel_basis(np.array([[2.0, 1.0], [0.0, 1.0]]))
        assert basis.shape == (2, 0)

    def test_laplacian_kron_kernel(self):
        # Oracle: ker(L_K3 kron I_2) = span(ones kron I_2), dimension 2.
        lap = 3.0 * np.eye(3) - np.ones((3, 3))
        m = np.kron(lap, np.eye(2))
        basis = kernel_basis(m)
        assert basis.shape == (6, 2)
        np.testing.assert_allclose(m @ basis, np.zeros((6, 2)), atol=1e-12)
        np.testing.assert_allclose(basis.T @ basis, np.eye(2), atol=1e-12)
        target = np.kron(np.ones((3, 1)) / np.sqrt(3.0), np.eye(2))
        # Same span: projection of target onto basis recovers target.
        np.testing.assert_allclose(basis @ (basis.T @ target), target, atol=1e-10)

    def test_orthonormal_columns_property(self):
        rng = np.random.default_rng(31)
        for _ in range(50):
            rows = int(rng.integers(1, 6))
            cols = int(rng.integers(1, 6))
            rank = int(rng.integers(0, min(rows, cols) + 1))
            m = (
                rng.normal(size=(rows, rank)) @ rng.normal(size=(rank, cols))
                if rank
                else np.zeros((rows, cols))
            )
            basis = kernel_basis(m)
            assert basis.shape == (cols, cols - rank)
            if basis.shape[1]:
                np.testing.assert_allclose(
                    basis.T @ basis, np.eye(basis.shape[1]), atol=1e-9
                )
                np.testing.assert_allclose(
                    m @ basis, np.zeros((rows, basis.shape[1])), atol=1e-8
                )
