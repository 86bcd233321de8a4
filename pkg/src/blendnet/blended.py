"""Slow (averaged) models of strongly coupled networks.

When diffusive coupling is strong, the network state hugs the
synchronization manifold and the collective motion is governed by the
average of the agents' vector fields.  This module builds that reduced
model for each coupling family:

* state coupling: a single slow state s with ds = mean_i f_i(t, s);
* output coupling: each agent keeps its private z block, driven by the
  shared slow output s, whose rate is the average of the output fields;
* rank-deficient coupling: only the directions in the common image of
  the B_i synchronize; the reduced state is (z_1, ..., z_N, s) where
  z_i are the per-agent unsynchronized coordinates and s spans the
  shared directions.

It also provides the orthogonal decomposition behind the rank-deficient
reduction, a sampled contraction estimate, and the implicit emergent
field realized by node-wise funnel coupling.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import (
    BlendnetError,
    DimensionMismatch,
    NoBracket,
    NonFiniteJacobian,
    NotMonotone,
)
from .graph import Graph
from .linalg import PsdSplit, kernel_basis, psd_split
from .netsim import (
    CoupledFieldFamily,
    FieldFamily,
    NetworkSystem,
    VectorField,
    _eval_fields,
)

__all__ = [
    "BlendedModel",
    "DecompositionData",
    "blended_state",
    "blended_output",
    "build_decomposition",
    "blended_rank_deficient",
    "contraction_estimate",
    "emergent_node_funnel",
    "as_network_system",
]

_POSTCONDITION_TOL = 1e-9


@dataclass(frozen=True)
class BlendedModel:
    """Reduced slow model plus maps between slow and stacked coordinates.

    reconstruct maps a slow state to the synchronized stacked network
    state it predicts; project maps a stacked network state to the slow
    coordinates (its left inverse on the synchronization manifold).
    """

    reduced_field: VectorField
    reconstruct: Callable[[np.ndarray], np.ndarray]
    family: str
    project: Callable[[np.ndarray], np.ndarray] | None = None


@dataclass(frozen=True)
class DecompositionData:
    """Orthogonal machinery for the rank-deficient reduction.

    splits holds each agent's PSD factorization B_i = W_i Λ_i² W_iᵀ with
    Z_i spanning ker(B_i).  v (p̄ × p_s) collects the synchronized
    directions in the stacked W coordinates, v_bar its orthonormal
    complement, q the positive-definite Gram matrix of the complement
    under the Laplacian metric, m the common n × p_s block W_i Λ_i V_i,
    and l the correction matrix whose agent blocks feed the slow model.
    """

    splits: tuple[PsdSplit, ...]
    v: np.ndarray
    v_bar: np.ndarray
    q: np.ndarray
    m: np.ndarray
    l: np.ndarray
    p_s: int
    p_bar: int

    @property
    def n_agents(self) -> int:
        return len(self.splits)

    def _offset(self, i: int) -> tuple[int, int]:
        start = sum(s.rank for s in self.splits[:i])
        return start, start + self.splits[i].rank

    def v_block(self, i: int) -> np.ndarray:
        """Rows of v belonging to agent i (p_i × p_s)."""
        a, b = self._offset(i)
        return self.v[a:b, :]

    def l_block(self, i: int) -> np.ndarray:
        """Rows of l belonging to agent i (p_i × total kernel dim)."""
        a, b = self._offset(i)
        return self.l[a:b, :]


# ---------------------------------------------------------------------------
# averaged models


def blended_state(fields) -> BlendedModel:
    """Average of same-dimension agent fields on the shared slow state."""
    n_agents, dim = _uniform_shape(fields)

    def reduced(t, s):
        stacked = np.broadcast_to(s, (n_agents,) + s.shape).copy()
        return _eval_fields(fields, t, stacked).mean(axis=0)

    def reconstruct(s):
        s = np.asarray(s, dtype=float)
        reps = (n_agents,) + (1,) * (s.ndim - 1)
        return np.tile(s, reps)

    def project(x):
        x = np.asarray(x, dtype=float)
        return x.reshape((n_agents, dim) + x.shape[1:]).mean(axis=0)

    return BlendedModel(
        reduced_field=VectorField(dim=dim, eval=reduced, label="blended-state"),
        reconstruct=reconstruct,
        family="state",
        project=project,
    )


def blended_output(z_fields, y_fields) -> BlendedModel:
    """Slow model for output coupling: private z blocks plus shared s.

    Slow layout is (z_1, ..., z_N, s); each z_i keeps its own dimension
    m_i and s has the shared output dimension.  The z blocks see the
    synchronized output s instead of their own y_i; s moves with the
    average of the output fields evaluated at the z blocks.
    """
    z_family = isinstance(z_fields, CoupledFieldFamily)
    y_family = isinstance(y_fields, CoupledFieldFamily)
    if y_family:
        n_agents, n = y_fields.n_agents, y_fields.dim
    else:
        y_fields = list(y_fields)
        n_agents = len(y_fields)
        dims = {f.dim for f in y_fields}
        if len(dims) != 1:
            raise DimensionMismatch(f"output dims differ: {sorted(dims)}")
        n = dims.pop()
    m_list = ([z_fields.dim] * n_agents if z_family
              else [f.dim for f in z_fields])
    if len(m_list) != n_agents:
        raise DimensionMismatch(f"{len(m_list)} z fields for {n_agents} agents")
    uniform_m = z_family or len(set(m_list)) <= 1
    z_offsets = np.concatenate([[0], np.cumsum(m_list)]).astype(int)
    total_z = int(z_offsets[-1])
    slow_dim = total_z + n

    def reduced(t, slow):
        s = slow[total_z:]
        out = np.zeros_like(slow)
        s_stack = np.broadcast_to(s, (n_agents,) + s.shape).copy()
        if z_family:
            z_stack = slow[:total_z].reshape((n_agents, m_list[0]) + slow.shape[1:])
            dz = np.asarray(z_fields.eval_stacked(t, z_stack, s_stack))
            out[:total_z] = dz.reshape((-1,) + slow.shape[1:])
        else:
            for i in range(n_agents):
                if m_list[i] == 0:
                    continue
                zi = slow[z_offsets[i]:z_offsets[i + 1]]
                out[z_offsets[i]:z_offsets[i + 1]] = _eval_one_pair(
                    z_fields[i].eval, t, zi, s
                )
        if y_family:
            z_stack = (slow[:total_z].reshape((n_agents, m_list[0]) + slow.shape[1:])
                       if uniform_m and total_z else None)
            dy = np.asarray(y_fields.eval_stacked(t, s_stack, z_stack))
            out[total_z:] = dy.mean(axis=0)
        else:
            acc = np.zeros_like(s)
            for i in range(n_agents):
                zi = slow[z_offsets[i]:z_offsets[i + 1]]
                acc = acc + _eval_one_pair(y_fields[i].eval, t, s, zi)
            out[total_z:] = acc / n_agents
        return out

    def reconstruct(slow):
        slow = np.asarray(slow, dtype=float)
        s = slow[total_z:]
        parts = []
        for i in range(n_agents):
            parts.append(slow[z_offsets[i]:z_offsets[i + 1]])
            parts.append(s)
        return np.concatenate(parts, axis=0)

    def project(x):
        x = np.asarray(x, dtype=float)
        parts = []
        y_acc = None
        pos = 0
        for i in range(n_agents):
            parts.append(x[pos:pos + m_list[i]])
            pos += m_list[i]
            yi = x[pos:pos + n]
            pos += n
            y_acc = yi if y_acc is None else y_acc + yi
        parts.append(y_acc / n_agents)
        return np.concatenate(parts, axis=0)

    return BlendedModel(
        reduced_field=VectorField(dim=slow_dim, eval=reduced,
                                  label="blended-output"),
        reconstruct=reconstruct,
        family="output",
        project=project,
    )


# ---------------------------------------------------------------------------
# rank-deficient machinery


def build_decomposition(g: Graph, b_list) -> DecompositionData:
    """Orthogonal decomposition of a rank-deficient coupling structure.

    Factors each B_i, stacks the image bases, and splits the stacked
    coordinates into the directions that synchronize (those annihilated
    by the Laplacian acting through the weighted bases) and their
    complement.  All postconditions are verified on every call.
    """
    splits = tuple(psd_split(b) for b in b_list)
    if len(splits) != g.n_agents:
        raise DimensionMismatch(f"{len(splits)} B matrices for {g.n_agents} agents")
    dims = {s.w.shape[0] for s in splits}
    if len(dims) != 1:
        raise DimensionMismatch(f"B dims differ: {sorted(dims)}")
    n = dims.pop()
    n_agents = g.n_agents

    p_bar = sum(s.rank for s in splits)
    w_net = _stack_block_diag([s.w for s in splits])
    lam_net = _stack_block_diag([s.lam for s in splits])
    z_net = _stack_block_diag([s.z for s in splits])

    lap_kron = np.kron(g.laplacian(), np.eye(n))
    wl = w_net @ lam_net
    v = kernel_basis(lap_kron @ wl)
    p_s = v.shape[1]
    v_bar = kernel_basis(v.T) if p_bar else np.zeros((0, 0))

    a = wl @ v_bar
    q = a.T @ lap_kron @ a
    q = 0.5 * (q + q.T)
    if q.shape[0]:
        l = v_bar @ np.linalg.solve(q, a.T @ lap_kron @ z_net)
    else:
        l = np.zeros((p_bar, z_net.shape[1]))

    # the common block W_i Λ_i V_i
    blocks = []
    row = 0
    for s in splits:
        blocks.append(s.w @ s.lam @ v[row:row + s.rank, :])
        row += s.rank
    m = (sum(blocks) / n_agents) if blocks else np.zeros((n, p_s))

    data = DecompositionData(
        splits=splits, v=v, v_bar=v_bar, q=q, m=np.asarray(m), l=l,
        p_s=p_s, p_bar=p_bar,
    )
    _verify_decomposition(data, lap_kron, wl, blocks)
    return data


def _stack_block_diag(mats):
    rows = sum(a.shape[0] for a in mats)
    cols = sum(a.shape[1] for a in mats)
    out = np.zeros((rows, cols))
    r = c = 0
    for a in mats:
        out[r:r + a.shape[0], c:c + a.shape[1]] = a
        r += a.shape[0]
        c += a.shape[1]
    return out


def _verify_decomposition(data: DecompositionData, lap_kron, wl, blocks):
    scale = max(1.0, float(np.abs(lap_kron).max()))
    if wl.size:
        scale = max(scale, float(np.abs(wl).max()) ** 2)
    tol = _POSTCONDITION_TOL * scale
    if data.p_s and float(np.abs(lap_kron @ wl @ data.v).max()) > tol:
        raise BlendnetError("decomposition: kernel property failed")
    basis = np.hstack([data.v, data.v_bar]) if data.p_bar else np.zeros((0, 0))
    if data.p_bar:
        gram = basis.T @ basis - np.eye(data.p_bar)
        if float(np.abs(gram).max()) > _POSTCONDITION_TOL:
            raise BlendnetError("decomposition: [V V̄] not orthogonal")
    if data.p_s:
        for b in blocks:
            if float(np.abs(b - data.m).max()) > tol:
                raise BlendnetError("decomposition: W_i Λ_i V_i blocks differ")
    if data.p_s:
        sv = np.linalg.svd(data.m, compute_uv=False)
        rank_m = int(np.sum(sv > _POSTCONDITION_TOL * max(1.0, float(sv[0]))))
        if rank_m != data.p_s:
            raise BlendnetError("decomposition: rank(M) != p_s")
    if data.q.shape[0]:
        q_eigs = np.linalg.eigvalsh(data.q)
        if q_eigs[0] <= 0:
            raise BlendnetError("decomposition: Q not positive definite")
    p_min = min(s.rank for s in data.splits)
    if data.p_s > p_min:
        raise BlendnetError("decomposition: p_s exceeds min rank")


def blended_rank_deficient(fields, dec: DecompositionData) -> BlendedModel:
    """Slow model for rank-deficient coupling.

    Slow layout is (z_1, ..., z_N, s): z_i are agent i's kernel
    coordinates (dimension n - p_i) and s the shared synchronized
    coordinates (dimension p_s).  Each agent's field is evaluated at the
    reconstructed point Z_i z_i - W_i Λ_i L_i z + N M s.
    """
    splits = dec.splits
    n_agents = len(splits)
    n = splits[0].w.shape[0]
    if isinstance(fields, FieldFamily):
        fields = fields.fields()
    fields = list(fields)
    if len(fields) != n_agents:
        raise DimensionMismatch(f"{len(fields)} fields for {n_agents} agents")
    if any(f.dim != n for f in fields):
        raise DimensionMismatch("field dims do not match the B matrices")

    z_dims = [n - s.rank for s in splits]
    z_offsets = np.concatenate([[0], np.cumsum(z_dims)]).astype(int)
    total_z = int(z_offsets[-1])
    slow_dim = total_z + dec.p_s
    nm = n_agents * dec.m
    wlam = [s.w @ s.lam for s in splits]
    # V_i Λ_i^{-1} W_iᵀ, the weights of the slow average
    slow_w = []
    for i, s in enumerate(splits):
        if s.rank:
            lam_inv = np.diag(1.0 / np.diag(s.lam))
            slow_w.append(dec.v_block(i).T @ lam_inv @ s.w.T)
        else:
            slow_w.append(np.zeros((dec.p_s, n)))

    def agent_points(t, slow):
        z = slow[:total_z]
        s = slow[total_z:]
        pts = []
        for i, sp in enumerate(splits):
            zi = z[z_offsets[i]:z_offsets[i + 1]]
            xi = nm @ s
            if z_dims[i]:
                xi = xi + sp.z @ zi
            if sp.rank:
                xi = xi - wlam[i] @ (dec.l_block(i) @ z)
            pts.append(xi)
        return pts

    def reduced(t, slow):
        out = np.zeros_like(slow)
        ds = np.zeros_like(slow[total_z:])
        for i, xi in enumerate(agent_points(t, slow)):
            fv = _eval_one(fields[i], t, xi)
            if z_dims[i]:
                out[z_offsets[i]:z_offsets[i + 1]] = splits[i].z.T @ fv
            ds = ds + slow_w[i] @ fv
        out[total_z:] = ds / n_agents
        return out

    z_net = _stack_block_diag([s.z for s in splits])
    wl_net = _stack_block_diag(wlam)
    rec_z = z_net - wl_net @ dec.l
    rec_s = n_agents * (wl_net @ dec.v)

    def reconstruct(slow):
        slow = np.asarray(slow, dtype=float)
        return rec_z @ slow[:total_z] + rec_s @ slow[total_z:]

    def project(x):
        x = np.asarray(x, dtype=float)
        stacked = x.reshape((n_agents, n) + x.shape[1:])
        parts = [splits[i].z.T @ stacked[i] for i in range(n_agents)]
        s = sum(slow_w[i] @ stacked[i] for i in range(n_agents)) / n_agents
        parts.append(s)
        return np.concatenate(parts, axis=0)

    return BlendedModel(
        reduced_field=VectorField(dim=slow_dim, eval=reduced,
                                  label="blended-rank-deficient"),
        reconstruct=reconstruct,
        family="rank_deficient",
        project=project,
    )


# ---------------------------------------------------------------------------
# analysis helpers


def contraction_estimate(field: VectorField, samples, metric=None) -> float:
    """Largest eigenvalue of ΘJ + JᵀΘ over the sampled (t, x) set.

    J is the central-difference Jacobian of the field at each sample and
    Θ the optional constant metric (identity by default).  A negative
    return certifies contraction on the sampled set only; it says
    nothing about unsampled regions.
    """
    dim = field.dim
    theta = np.eye(dim) if metric is None else np.asarray(metric, dtype=float)
    if theta.shape != (dim, dim):
        raise DimensionMismatch(f"metric shape {theta.shape} for dim {dim}")
    worst = -np.inf
    for t, x in samples:
        x = np.asarray(x, dtype=float).reshape(dim)
        jac = _numerical_jacobian(field.eval, t, x)
        if not np.all(np.isfinite(jac)):
            raise NonFiniteJacobian(
                f"Jacobian not finite at t={t}, x={np.array2string(x)}"
            )
        sym = theta @ jac + jac.T @ theta
        worst = max(worst, float(np.linalg.eigvalsh(sym)[-1]))
    return worst


def _numerical_jacobian(fn, t, x):
    dim = x.shape[0]
    jac = np.empty((dim, dim))
    for j in range(dim):
        h = 1e-6 * max(1.0, abs(float(x[j])))
        plus = x.copy()
        minus = x.copy()
        plus[j] += h
        minus[j] -= h
        jac[:, j] = (np.asarray(fn(t, plus)) - np.asarray(fn(t, minus))) / (2.0 * h)
    return jac


def emergent_node_funnel(fields, inverse_maps) -> VectorField:
    """Implicit slow field realized by node-wise funnel coupling.

    At a synchronized value s, the network moves at the common rate c
    solving sum_i V_i(t, c - f_i(t, s)) = 0, where V_i inverts agent
    i's gain map.  The root is found by bisection over
    [min_i f_i, max_i f_i] to 1e-12; with arctan-family maps and small
    delta it approaches the median of the f_i.
    """
    fields = list(fields)
    maps = list(inverse_maps)
    if len(fields) != len(maps):
        raise DimensionMismatch(f"{len(fields)} fields, {len(maps)} inverse maps")
    if any(f.dim != 1 for f in fields):
        raise DimensionMismatch("emergent field needs scalar agents")

    def f_s(t, s):
        s_arr = np.asarray(s, dtype=float).reshape(1)
        vals = np.array([
            float(np.asarray(f.eval(t, s_arr)).reshape(-1)[0]) for f in fields
        ])
        lo, hi = float(vals.min()), float(vals.max())
        if hi - lo < 1e-15:
            return np.array([lo])

        def phi(c):
            return float(sum(m(t, c - fv) for m, fv in zip(maps, vals)))

        grid = np.linspace(lo, hi, 9)
        probe = [phi(c) for c in grid]
        p_scale = max(1.0, max(abs(p) for p in probe))
        for a, b in zip(probe, probe[1:]):
            if b < a - 1e-12 * p_scale:
                raise NotMonotone(
                    "summed inverse maps decrease across the bracket"
                )
        if probe[0] > 0.0 or probe[-1] < 0.0:
            raise NoBracket(
                f"no sign change on [{lo}, {hi}]: phi spans "
                f"[{probe[0]:.3e}, {probe[-1]:.3e}]"
            )
        a, b = lo, hi
        fa = probe[0]
        while b - a > 1e-12:
            mid = 0.5 * (a + b)
            fm = phi(mid)
            if (fm < 0.0) == (fa < 0.0) and fm != 0.0:
                a, fa = mid, fm
            else:
                b = mid
        return np.array([0.5 * (a + b)])

    return VectorField(dim=1, eval=f_s, label="emergent-node-funnel")


def as_network_system(model: BlendedModel) -> NetworkSystem:
    """Wrap a reduced model so the integrator can run it directly."""
    dim = model.reduced_field.dim

    def rhs(t, x):
        return np.asarray(model.reduced_field.eval(t, x))

    return NetworkSystem(
        total_dim=dim,
        rhs=rhs,
        coupling_kind="blended",
        k=None,
        agent_slices=[slice(0, dim)],
        stiffness_scale=0.0,
        n_agents=1,
        sync_indices=None,
        label=f"blended-{model.family}",
    )


# ---------------------------------------------------------------------------
# shared helpers


def _uniform_shape(fields) -> tuple[int, int]:
    if isinstance(fields, FieldFamily):
        return fields.n_agents, fields.dim
    fields = list(fields)
    if not fields:
        raise DimensionMismatch("need at least one field")
    dims = {f.dim for f in fields}
    if len(dims) != 1:
        raise DimensionMismatch(f"agent dims differ: {sorted(dims)}")
    return len(fields), dims.pop()


def _eval_one(field: VectorField, t, x):
    if x.ndim == 1:
        return np.asarray(field.eval(t, x))
    out = np.empty_like(x)
    for b in range(x.shape[1]):
        out[:, b] = np.asarray(field.eval(t, x[:, b]))
    return out


def _eval_one_pair(fn, t, own, other):
    if own.ndim == 1:
        return np.asarray(fn(t, own, other))
    out = np.empty_like(own)
    for b in range(own.shape[1]):
        out[:, b] = np.asarray(fn(t, own[:, b], other[:, b]))
    return out
