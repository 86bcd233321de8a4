"""Matrix decompositions and gain design for observers and rank-deficient coupling.

Three pieces of machinery live here:

* ``psd_split``: orthogonal split of a PSD matrix B into its range (with
  the square roots of the positive eigenvalues) and its kernel.
* ``observability_split``: orthogonal split of the state space of a pair
  (G, S) into the unobservable subspace and its complement, with a
  stabilizing output-injection gain for the reduced pair.  The split is
  by the unobservable subspace, which is a conservative stand-in for the
  undetectable one: the reduced pair ends up observable, hence
  detectable, and the construction stays purely rank-based.
* ``stabilizing_injection``: deterministic observer-gain design, by pole
  placement for single-output pairs and by a shifted algebraic Riccati
  equation (solved through the Hamiltonian eigenvector method) for
  multi-output pairs.

All routines are pure functions of dense numpy arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NotObservable, NotPsd, NotSymmetric

__all__ = [
    "PsdSplit",
    "ObserverSplit",
    "psd_split",
    "observability_split",
    "stabilizing_injection",
    "is_hurwitz",
    "kernel_basis",
]

_DEFAULT_RELATIVE_TOL = 1e-9


@dataclass(frozen=True)
class PsdSplit:
    """Orthogonal range/kernel split of a symmetric PSD matrix.

    ``w`` (n, p) spans the range, ``z`` (n, n-p) the kernel, and ``lam``
    is the p-by-p diagonal of square roots of the positive eigenvalues in
    descending order, so that B = W lam^2 W^T and [W Z] is orthogonal.
    """

    w: np.ndarray
    z: np.ndarray
    lam: np.ndarray
    rank: int


@dataclass(frozen=True)
class ObserverSplit:
    """Unobservable-subspace split of a pair (G, S) plus an injection gain.

    ``z_basis`` (n, n-p) spans the complement of the unobservable
    subspace, ``w_basis`` (n, p) the unobservable subspace itself.  The
    reduced pair is s_bar = Z^T S Z, g_bar = G Z, and u_bar makes
    s_bar - u_bar g_bar Hurwitz.  ``p`` is the unobservable dimension.
    """

    z_basis: np.ndarray
    w_basis: np.ndarray
    s_bar: np.ndarray
    g_bar: np.ndarray
    u_bar: np.ndarray
    p: int


def psd_split(b: np.ndarray, tol: float | None = None) -> PsdSplit:
    """Split a symmetric PSD matrix into range and kernel factors.

    Parameters
    ----------
    b : (n, n) symmetric positive-semidefinite matrix.
    tol : eigenvalue cutoff; defaults to 1e-9 times the largest
        eigenvalue magnitude.

    Raises
    ------
    NotSymmetric : if b deviates from its transpose beyond tolerance.
    NotPsd : if an eigenvalue is below -tol.
    """
    b = np.asarray(b, dtype=float)
    if b.ndim != 2 or b.shape[0] != b.shape[1]:
        raise NotSymmetric(f"expected a square matrix, got shape {b.shape}")
    scale = max(1.0, float(np.abs(b).max()) if b.size else 0.0)
    sym_tol = (tol if tol is not None else _DEFAULT_RELATIVE_TOL) * scale
    if b.size and float(np.abs(b - b.T).max()) > sym_tol:
        raise NotSymmetric("matrix is not symmetric within tolerance")
    b = 0.5 * (b + b.T)
    eigvals, eigvecs = np.linalg.eigh(b)
    cutoff = tol if tol is not None else _DEFAULT_RELATIVE_TOL * max(
        1e-300, float(np.abs(eigvals).max()) if eigvals.size else 0.0
    )
    if eigvals.size and eigvals[0] < -cutoff:
        raise NotPsd(f"eigenvalue {eigvals[0]} below -{cutoff}")
    positive = eigvals > cutoff
    # Descending order over the positive part; stable so that degenerate
    # eigenvalues keep the eigensolver's column order.
    order = np.argsort(-eigvals[positive], kind="stable")
    w = _fix_signs(eigvecs[:, positive][:, order])
    z = _fix_signs(eigvecs[:, ~positive])
    lam = np.diag(np.sqrt(eigvals[positive][order]))
    return PsdSplit(w=w, z=z, lam=lam, rank=int(positive.sum()))


def observability_split(s: np.ndarray, g: np.ndarray, tol: float | None = None) -> ObserverSplit:
    """Split the state space of (G, S) by the unobservable subspace.

    The observability matrix col(G, GS, ..., GS^{n-1}) is factored by a
    singular value decomposition; its kernel is the unobservable
    subspace.  A stabilizing injection gain for the reduced pair is
    computed unless the reduced pair is empty.
    """
    s = np.asarray(s, dtype=float)
    g = np.atleast_2d(np.asarray(g, dtype=float))
    n = s.shape[0]
    if s.shape != (n, n) or g.shape[1] != n:
        raise NotSymmetric(f"inconsistent shapes S{s.shape}, G{g.shape}")
    obs = _observability_matrix(s, g)
    _, sing, vt = np.linalg.svd(obs)
    cutoff = tol if tol is not None else _DEFAULT_RELATIVE_TOL * max(
        1e-300, float(sing.max()) if sing.size else 0.0
    )
    r = int((sing > cutoff).sum())
    z_basis = _fix_signs(vt[:r].T)
    w_basis = _fix_signs(vt[r:].T)
    s_bar = z_basis.T @ s @ z_basis
    g_bar = g @ z_basis
    u_bar = stabilizing_injection(s_bar, g_bar)
    return ObserverSplit(
        z_basis=z_basis,
        w_basis=w_basis,
        s_bar=s_bar,
        g_bar=g_bar,
        u_bar=u_bar,
        p=n - r,
    )


def stabilizing_injection(s_bar: np.ndarray, g_bar: np.ndarray) -> np.ndarray:
    """Gain U such that s_bar - U g_bar has spectrum with real part <= -0.5.

    Single-output pairs are placed at {-1, -2, ...} by Ackermann's
    formula.  Multi-output pairs solve the dual algebraic Riccati
    equation with Q = R = I on the half-plane-shifted pair, through the
    Hamiltonian eigenvector method, and use U = P g_bar^T.  The shift
    guarantees the stated stability margin.

    Raises NotObservable when (g_bar, s_bar) is not observable.
    """
    s_bar = np.asarray(s_bar, dtype=float)
    g_bar = np.atleast_2d(np.asarray(g_bar, dtype=float))
    m = s_bar.shape[0]
    q = g_bar.shape[0]
    if m == 0:
        return np.zeros((0, q))
    obs = _observability_matrix(s_bar, g_bar)
    sing = np.linalg.svd(obs, compute_uv=False)
    if int((sing > _DEFAULT_RELATIVE_TOL * max(1e-300, float(sing.max()))).sum()) < m:
        raise NotObservable(f"pair with state dim {m} is not observable")
    if q == 1:
        gain = _ackermann_observer(s_bar, g_bar)
    else:
        gain = _riccati_observer(s_bar, g_bar, shift=0.5)
    return gain


def is_hurwitz(a: np.ndarray, margin: float = 0.0) -> bool:
    """True iff every eigenvalue of a has real part < -margin."""
    a = np.asarray(a, dtype=float)
    if a.size == 0:
        return True
    return bool(np.max(np.linalg.eigvals(a).real) < -margin)


def kernel_basis(m: np.ndarray, tol: float | None = None) -> np.ndarray:
    """Orthonormal basis of ker(m) as columns; width may be zero."""
    m = np.atleast_2d(np.asarray(m, dtype=float))
    rows, cols = m.shape
    if cols == 0:
        return np.zeros((0, 0))
    if rows == 0:
        return np.eye(cols)
    _, sing, vt = np.linalg.svd(m)
    cutoff = tol if tol is not None else _DEFAULT_RELATIVE_TOL * max(
        1e-300, float(sing.max()) if sing.size else 0.0
    )
    r = int((sing > cutoff).sum())
    return _fix_signs(vt[r:].T)


# ---------------------------------------------------------------------------
# helpers


def _observability_matrix(s: np.ndarray, g: np.ndarray) -> np.ndarray:
    n = s.shape[0]
    blocks = []
    power = np.eye(n)
    for _ in range(max(n, 1)):
        blocks.append(g @ power)
        power = power @ s
    return np.vstack(blocks) if blocks else np.zeros((0, n))


def _ackermann_observer(s_bar: np.ndarray, g_bar: np.ndarray) -> np.ndarray:
    """Place the observer spectrum at {-1, ..., -m} for a single output."""
    m = s_bar.shape[0]
    # Desired characteristic polynomial prod(lambda + i) evaluated at s_bar.
    phi = np.eye(m)
    for i in range(1, m + 1):
        phi = phi @ (s_bar + i * np.eye(m))
    obs = _observability_matrix(s_bar, g_bar)[:m]
    e_last = np.zeros(m)
    e_last[-1] = 1.0
    gain = phi @ np.linalg.solve(obs, e_last)
    return gain.reshape(m, 1)


def _riccati_observer(s_bar: np.ndarray, g_bar: np.ndarray, shift: float) -> np.ndarray:
    """Dual ARE gain via the Hamiltonian eigenvector method.

    Solves A^T X + X A - X B B^T X + I = 0 for the shifted dual pair
    A = s_bar^T + shift I, B = g_bar^T, and returns X g_bar^T.  The
    closed-loop spectrum of the unshifted pair then sits left of -shift.
    """
    m = s_bar.shape[0]
    a = s_bar.T + shift * np.eye(m)
    b = g_bar.T
    ham = np.block([
        [a, -b @ b.T],
        [-np.eye(m), -a.T],
    ])
    eigvals, eigvecs = np.linalg.eig(ham)
    stable = eigvals.real < 0
    basis = eigvecs[:, stable]
    if basis.shape[1] != m:
        raise NotObservable("Hamiltonian matrix has no n-dimensional stable subspace")
    u1 = basis[:m]
    u2 = basis[m:]
    x = np.linalg.solve(u1.T, u2.T).T
    x = np.real(0.5 * (x + x.conj().T))
    return x @ g_bar.T


def _solve_lyapunov(a: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Solve A P + P A^T + Q = 0 for P by the Kronecker-sum linear system."""
    n = a.shape[0]
    if n == 0:
        return np.zeros((0, 0))
    lhs = np.kron(np.eye(n), a) + np.kron(a, np.eye(n))
    p = np.linalg.solve(lhs, -q.reshape(-1, order="F")).reshape((n, n), order="F")
    return 0.5 * (p + p.T)


def _fix_signs(vectors: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    out = np.array(vectors, dtype=float, copy=True)
    for col in range(out.shape[1]):
        v = out[:, col]
        nonzero = np.nonzero(np.abs(v) > tol)[0]
        if nonzero.size and v[nonzero[0]] < 0:
            out[:, col] = -v
    return out
