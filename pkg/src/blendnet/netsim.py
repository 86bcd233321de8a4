"""Network assembly and deterministic integration.

This module turns per-agent vector fields plus a graph into one stacked
right-hand side for each coupling family (state, output, rank-deficient,
edge funnel, node funnel), and integrates the result with fixed-step RK4
or adaptive RKF45.

Layout conventions
------------------
The stacked state is agent-major: agent i occupies the contiguous range
``agent_slices[i]``.  Right-hand sides accept either a flat state of
shape (total_dim,) or a batch of shape (total_dim, B); batches integrate
B independent copies of the system in lockstep, which is how Monte-Carlo
trials are run cheaply.

Stiffness
---------
Strong coupling makes the fast consensus modes stiff, with rate about
k * lambda_max(L) (times lambda_max of the coupling weight where one
applies).  The integrator caps its step at
``stiffness_safety / stiffness_scale``; the default safety of 0.2 is
conservative for explicit Runge-Kutta methods, and scenarios that only
care about the slow dynamics may raise it (RK4 remains stable up to
about 2.8).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import (
    ConfigError,
    DimensionMismatch,
    FunnelViolationAtStart,
    NonFiniteState,
    StepUnderflow,
    WeightNotPd,
)
from .graph import Graph
from .linalg import psd_split

__all__ = [
    "VectorField",
    "FieldFamily",
    "CoupledField",
    "CoupledFieldFamily",
    "FunnelSpec",
    "NetworkSystem",
    "SolverOptions",
    "Trajectory",
    "assemble_state_coupled",
    "assemble_output_coupled",
    "assemble_rank_deficient",
    "assemble_edge_funnel",
    "assemble_node_funnel",
    "integrate",
    "sync_error",
]

_FUNNEL_CLAMP = 1.0 - 1e-9


@dataclass(frozen=True)
class VectorField:
    """A single agent's dynamics: eval(t, x) -> dx, with x of shape (dim,)."""

    dim: int
    eval: Callable[[float, np.ndarray], np.ndarray]
    label: str = ""


@dataclass(frozen=True)
class FieldFamily:
    """Vectorized dynamics for N same-dimension agents.

    ``eval_stacked(t, X)`` receives X of shape (N, dim) or (N, dim, B)
    and must return the same shape.  Assemblers use it to avoid a Python
    loop over agents in the hot integration path.
    """

    n_agents: int
    dim: int
    eval_stacked: Callable[[float, np.ndarray], np.ndarray]
    label: str = ""

    def fields(self) -> list[VectorField]:
        """Per-agent views, for code that wants individual fields."""
        out = []
        for i in range(self.n_agents):
            def one(t, x, _i=i):
                stacked = np.zeros((self.n_agents, self.dim))
                stacked[_i] = x
                return np.asarray(self.eval_stacked(t, stacked))[_i]
            out.append(VectorField(dim=self.dim, eval=one, label=f"{self.label}[{i}]"))
        return out


@dataclass(frozen=True)
class CoupledField:
    """One agent's half of an output-coupled pair: eval(t, own, other)."""

    dim: int
    eval: Callable[[float, np.ndarray, np.ndarray], np.ndarray]
    label: str = ""


@dataclass(frozen=True)
class CoupledFieldFamily:
    """Vectorized eval(t, OWN, OTHER) over (N, dim[, B]) stacks."""

    n_agents: int
    dim: int
    eval_stacked: Callable[[float, np.ndarray, np.ndarray], np.ndarray]
    label: str = ""


@dataclass(frozen=True)
class FunnelSpec:
    """Shrinking performance envelope and its gain function.

    The envelope follows the exponential family
    psi(t) = (psi_bar - eta) * exp(-lambda_rate * (t - t_ref)) + eta,
    which stays positive and decays to eta.  Two gain families are
    built in: "reciprocal" gives gamma(s) = 1/(1-s) and "tan" gives
    gamma(s) = (delta/s) tan(pi s / 2) with gamma(0) = pi delta / 2.
    Both are strictly increasing and blow up as s -> 1.
    """

    family: str  # "edge" | "node"
    psi_bar: float
    eta: float
    lambda_rate: float
    gamma_kind: str = "reciprocal"
    delta: float = 1e-3
    t_ref: float = 0.0

    def __post_init__(self):
        if self.family not in ("edge", "node"):
            raise ConfigError(f"unknown funnel family {self.family!r}")
        if self.eta <= 0:
            raise ConfigError("funnel eta must be positive")
        if self.psi_bar < self.eta:
            raise ConfigError("psi_bar must be at least eta")
        if self.lambda_rate < 0:
            raise ConfigError("lambda_rate must be nonnegative")
        if self.gamma_kind not in ("reciprocal", "tan"):
            raise ConfigError(f"unknown gamma kind {self.gamma_kind!r}")
        if self.gamma_kind == "tan" and self.delta <= 0:
            raise ConfigError("tan gain needs delta > 0")

    @classmethod
    def edge(cls, psi_bar: float, eta: float, lambda_rate: float,
             gamma_kind: str = "reciprocal", delta: float = 1e-3) -> FunnelSpec:
        return cls("edge", psi_bar, eta, lambda_rate, gamma_kind, delta)

    @classmethod
    def node(cls, psi_bar: float, eta: float, lambda_rate: float,
             delta: float = 1e-3, gamma_kind: str = "tan") -> FunnelSpec:
        return cls("node", psi_bar, eta, lambda_rate, gamma_kind, delta)

    def psi(self, t: float) -> float:
        return (self.psi_bar - self.eta) * float(
            np.exp(-self.lambda_rate * (t - self.t_ref))
        ) + self.eta

    def gamma(self, s):
        s = np.asarray(s, dtype=float)
        if self.gamma_kind == "reciprocal":
            return 1.0 / (1.0 - s)
        small = s < 1e-12
        safe = np.where(small, 1.0, s)
        out = (self.delta / safe) * np.tan(0.5 * np.pi * safe)
        return np.where(small, 0.5 * np.pi * self.delta, out)

    def coupling(self, t: float, nu):
        """Gain-shaped coupling gamma(|nu|/psi) * nu / psi, clamped near 1."""
        rho = np.asarray(nu, dtype=float) / self.psi(t)
        s = np.minimum(np.abs(rho), _FUNNEL_CLAMP)
        return self.gamma(s) * rho

    def inverse(self, t: float, u):
        """Inverse of nu -> coupling value, for the built-in families."""
        u = np.asarray(u, dtype=float)
        if self.gamma_kind == "tan":
            return (2.0 * self.psi(t) / np.pi) * np.arctan(u / self.delta)
        # reciprocal: |u| = s/(1-s) with s = |nu|/psi
        return self.psi(t) * u / (1.0 + np.abs(u))

    def shifted(self, psi_bar: float, t_ref: float) -> FunnelSpec:
        """Copy with a new opening radius and time origin (join handshakes)."""
        return FunnelSpec(self.family, psi_bar, self.eta, self.lambda_rate,
                          self.gamma_kind, self.delta, t_ref)


@dataclass
class NetworkSystem:
    """Assembled stacked dynamics plus coupling metadata."""

    total_dim: int
    rhs: Callable[[float, np.ndarray], np.ndarray]
    coupling_kind: str
    k: float | None
    agent_slices: list[slice]
    stiffness_scale: float
    n_agents: int
    sync_indices: np.ndarray | None = None
    funnel_ratios: Callable[[float, np.ndarray], np.ndarray] | None = None
    funnel_margins: Callable[[float, np.ndarray], np.ndarray] | None = None
    label: str = ""
    extra: dict = field(default_factory=dict)


@dataclass(frozen=True)
class SolverOptions:
    """Integration options; see module docstring for the stiffness cap."""

    method: str = "rk4"
    h: float = 1e-3
    rtol: float = 1e-8
    atol: float = 1e-10
    stiffness_safety: float = 0.2
    min_step: float = 1e-12
    record_every: int = 1


@dataclass
class Trajectory:
    """Recorded integration output.

    ``states`` has shape (T, total_dim), or (T, total_dim, B) for a
    batched run, in which case the pairwise diagnostics are skipped.
    """

    times: np.ndarray
    states: np.ndarray
    agent_slices: list[slice]
    sync_indices: np.ndarray | None
    disagreement: np.ndarray | None
    funnel_margin: np.ndarray | None
    metadata: dict


# ---------------------------------------------------------------------------
# assembly


def assemble_state_coupled(fields, g: Graph, k: float) -> NetworkSystem:
    """Diffusive state coupling: dx_i = f_i(t, x_i) - k (L x)_i blockwise."""
    n_agents, dim = _check_uniform(fields, g)
    if k <= 0:
        raise DimensionMismatch(f"coupling gain must be positive, got {k}")
    lap = g.laplacian()
    lam_max = float(np.linalg.eigvalsh(lap)[-1])

    def rhs(t, x):
        stacked = _to_agents(x, n_agents, dim)
        dx = _eval_fields(fields, t, stacked)
        dx = dx - k * np.tensordot(lap, stacked, axes=(1, 0))
        return dx.reshape(x.shape)

    return NetworkSystem(
        total_dim=n_agents * dim,
        rhs=rhs,
        coupling_kind="state",
        k=k,
        agent_slices=[slice(i * dim, (i + 1) * dim) for i in range(n_agents)],
        stiffness_scale=k * lam_max,
        n_agents=n_agents,
        sync_indices=np.arange(n_agents * dim).reshape(n_agents, dim),
        label="state-coupled",
    )


def assemble_output_coupled(z_fields, y_fields, weight: np.ndarray, g: Graph,
                            k: float) -> NetworkSystem:
    """Output coupling: only the y block of each agent exchanges information.

    Agent i's state is (z_i, y_i) with z_i of any dimension m_i and y_i of
    the shared dimension n = weight.shape[0].  The coupling enters as
    dy_i += -k * weight @ (L Y)_i.
    """
    weight = np.asarray(weight, dtype=float)
    n = weight.shape[0]
    if weight.shape != (n, n) or np.abs(weight - weight.T).max() > 1e-9 * max(
        1.0, np.abs(weight).max()
    ):
        raise WeightNotPd("coupling weight must be symmetric")
    w_eigs = np.linalg.eigvalsh(0.5 * (weight + weight.T))
    if w_eigs[0] <= 0:
        raise WeightNotPd(f"coupling weight has nonpositive eigenvalue {w_eigs[0]}")
    if k <= 0:
        raise DimensionMismatch(f"coupling gain must be positive, got {k}")

    n_agents = g.n_agents
    z_family = isinstance(z_fields, CoupledFieldFamily)
    y_family = isinstance(y_fields, CoupledFieldFamily)
    m_list = ([z_fields.dim] * n_agents if z_family
              else [f.dim for f in z_fields])
    if len(m_list) != n_agents:
        raise DimensionMismatch(
            f"{len(m_list)} z fields for {n_agents} agents"
        )
    if not y_family and len(y_fields) != n_agents:
        raise DimensionMismatch(f"{len(y_fields)} y fields for {n_agents} agents")

    slices, z_idx, y_idx = _output_layout(m_list, n)
    total = y_idx.max() + 1 if y_idx.size else 0
    uniform_m = z_family or len(set(m_list)) <= 1
    m0 = m_list[0] if m_list else 0

    lap = g.laplacian()
    lam_max = float(np.linalg.eigvalsh(lap)[-1])

    def rhs(t, x):
        dx = np.zeros_like(x)
        y = x[y_idx.reshape(-1)].reshape(y_idx.shape + x.shape[1:])
        if uniform_m and m0 > 0:
            z_flat = np.concatenate([idx for idx in z_idx])
            z = x[z_flat].reshape((n_agents, m0) + x.shape[1:])
        else:
            z = None
        # agent dynamics
        if z_family:
            dz = np.asarray(z_fields.eval_stacked(t, z, y))
            dx[np.concatenate(z_idx)] = dz.reshape((-1,) + x.shape[1:])
        else:
            for i, f in enumerate(z_fields):
                if m_list[i] == 0:
                    continue
                zi = x[z_idx[i]]
                dx[z_idx[i]] = _apply_pair(f.eval, t, zi, y[i])
        if y_family:
            dy = np.asarray(y_fields.eval_stacked(t, y, z))
        else:
            dy = np.empty_like(y)
            for i, f in enumerate(y_fields):
                zi = x[z_idx[i]] if m_list[i] else np.zeros((0,) + x.shape[1:])
                dy[i] = _apply_pair(f.eval, t, y[i], zi)
        coupled = np.tensordot(lap, y, axes=(1, 0))
        dy = dy - k * np.einsum("ab,ib...->ia...", weight, coupled)
        dx[y_idx.reshape(-1)] = dy.reshape((-1,) + x.shape[1:])
        return dx

    return NetworkSystem(
        total_dim=int(total),
        rhs=rhs,
        coupling_kind="output",
        k=k,
        agent_slices=slices,
        stiffness_scale=k * lam_max * float(w_eigs[-1]),
        n_agents=n_agents,
        sync_indices=y_idx,
        label="output-coupled",
    )


def assemble_rank_deficient(fields, g: Graph, k: float, b_list) -> NetworkSystem:
    """Diffusive coupling filtered per agent through a PSD matrix B_i."""
    n_agents, dim = _check_uniform(fields, g)
    if len(b_list) != n_agents:
        raise DimensionMismatch(f"{len(b_list)} B matrices for {n_agents} agents")
    b_stack = np.empty((n_agents, dim, dim))
    b_lam_max = 0.0
    for i, b in enumerate(b_list):
        b = np.asarray(b, dtype=float)
        if b.shape != (dim, dim):
            raise DimensionMismatch(f"B_{i + 1} has shape {b.shape}, expected {(dim, dim)}")
        split = psd_split(b)  # raises NotSymmetric / NotPsd
        b_stack[i] = 0.5 * (b + b.T)
        if split.rank:
            b_lam_max = max(b_lam_max, float(np.max(np.diag(split.lam)) ** 2))
    if k <= 0:
        raise DimensionMismatch(f"coupling gain must be positive, got {k}")
    lap = g.laplacian()
    lam_max = float(np.linalg.eigvalsh(lap)[-1])

    def rhs(t, x):
        stacked = _to_agents(x, n_agents, dim)
        dx = _eval_fields(fields, t, stacked)
        coupled = np.tensordot(lap, stacked, axes=(1, 0))
        dx = dx - k * np.einsum("inm,im...->in...", b_stack, coupled)
        return dx.reshape(x.shape)

    return NetworkSystem(
        total_dim=n_agents * dim,
        rhs=rhs,
        coupling_kind="rank_deficient",
        k=k,
        agent_slices=[slice(i * dim, (i + 1) * dim) for i in range(n_agents)],
        stiffness_scale=k * lam_max * b_lam_max,
        n_agents=n_agents,
        sync_indices=np.arange(n_agents * dim).reshape(n_agents, dim),
        label="rank-deficient",
    )


def assemble_edge_funnel(fields, g: Graph, spec: FunnelSpec,
                         edge_specs: dict | None = None) -> NetworkSystem:
    """Edge-wise funnel coupling over scalar agents.

    Each edge (i, j) contributes gamma(|nu|/psi) * nu/psi to agent i and
    its negative to agent j, where nu = x_j - x_i.  ``edge_specs`` may
    override the funnel of individual edges (keys are 1-based sorted
    pairs), which join handshakes use.
    """
    n_agents, dim = _check_uniform(fields, g)
    if dim != 1:
        raise DimensionMismatch("edge funnel coupling needs scalar agents")
    if spec.family != "edge":
        raise ConfigError("spec family must be 'edge'")
    groups = _edge_groups(g, spec, edge_specs or {})

    def rhs(t, x):
        stacked = _to_agents(x, n_agents, 1)[:, 0]
        dx = _eval_fields(fields, t, stacked[:, None])[:, 0]
        u = np.zeros_like(stacked)
        for sp, ei, ej in groups:
            nu = stacked[ej] - stacked[ei]
            ge = sp.coupling(t, nu)
            np.add.at(u, ei, ge)
            np.add.at(u, ej, -ge)
        return (dx + u).reshape(x.shape)

    def ratios(t, x):
        stacked = _to_agents(x, n_agents, 1)[:, 0]
        out = []
        for sp, ei, ej in groups:
            out.append(np.abs(stacked[ej] - stacked[ei]) / sp.psi(t))
        return np.concatenate(out) if out else np.zeros(0)

    def margins(t, x):
        stacked = _to_agents(x, n_agents, 1)[:, 0]
        out = []
        for sp, ei, ej in groups:
            out.append(sp.psi(t) - np.abs(stacked[ej] - stacked[ei]))
        return np.concatenate(out) if out else np.zeros(0)

    return NetworkSystem(
        total_dim=n_agents,
        rhs=rhs,
        coupling_kind="edge_funnel",
        k=None,
        agent_slices=[slice(i, i + 1) for i in range(n_agents)],
        stiffness_scale=0.0,
        n_agents=n_agents,
        sync_indices=np.arange(n_agents).reshape(n_agents, 1),
        funnel_ratios=ratios,
        funnel_margins=margins,
        label="edge-funnel",
        extra={"edge_order": [(int(i), int(j)) for _, ei, ej in groups
                              for i, j in zip(ei + 1, ej + 1)]},
    )


def assemble_node_funnel(fields, g: Graph, spec: FunnelSpec,
                         node_specs: dict | None = None) -> NetworkSystem:
    """Node-wise funnel coupling over scalar agents.

    nu_i is the weighted disagreement sum -(L x)_i; the coupling is
    gamma(|nu_i|/psi_i) * nu_i/psi_i.  ``node_specs`` may override the
    funnel of individual agents (1-based keys).
    """
    n_agents, dim = _check_uniform(fields, g)
    if dim != 1:
        raise DimensionMismatch("node funnel coupling needs scalar agents")
    if spec.family != "node":
        raise ConfigError("spec family must be 'node'")
    overrides = dict(node_specs or {})
    per_node = [overrides.get(i + 1, spec) for i in range(n_agents)]
    lap = g.laplacian()

    def node_psis(t):
        return np.array([sp.psi(t) for sp in per_node])

    def rhs(t, x):
        stacked = _to_agents(x, n_agents, 1)[:, 0]
        dx = _eval_fields(fields, t, stacked[:, None])[:, 0]
        nu = -np.tensordot(lap, stacked, axes=(1, 0))
        psis = node_psis(t)
        psis = psis.reshape((n_agents,) + (1,) * (nu.ndim - 1))
        rho = nu / psis
        s = np.minimum(np.abs(rho), _FUNNEL_CLAMP)
        gains = np.empty_like(s)
        for i, sp in enumerate(per_node):
            gains[i] = sp.gamma(s[i])
        return (dx + gains * rho).reshape(x.shape)

    def ratios(t, x):
        stacked = _to_agents(x, n_agents, 1)[:, 0]
        nu = -np.tensordot(lap, stacked, axes=(1, 0))
        psis = node_psis(t).reshape((n_agents,) + (1,) * (nu.ndim - 1))
        return (np.abs(nu) / psis).reshape(-1)

    def margins(t, x):
        stacked = _to_agents(x, n_agents, 1)[:, 0]
        nu = -np.tensordot(lap, stacked, axes=(1, 0))
        psis = node_psis(t).reshape((n_agents,) + (1,) * (nu.ndim - 1))
        return (psis - np.abs(nu)).reshape(-1)

    return NetworkSystem(
        total_dim=n_agents,
        rhs=rhs,
        coupling_kind="node_funnel",
        k=None,
        agent_slices=[slice(i, i + 1) for i in range(n_agents)],
        stiffness_scale=0.0,
        n_agents=n_agents,
        sync_indices=np.arange(n_agents).reshape(n_agents, 1),
        funnel_ratios=ratios,
        funnel_margins=margins,
        label="node-funnel",
    )


# ---------------------------------------------------------------------------
# integration


def integrate(sys: NetworkSystem, x0, t0: float, t_end: float,
              opts: SolverOptions | None = None) -> Trajectory:
    """Integrate a NetworkSystem from t0 to t_end.

    Parameters
    ----------
    sys : assembled system.
    x0 : initial state, shape (total_dim,) or (total_dim, B) for a batch.
    t0, t_end : time span, t_end > t0.
    opts : SolverOptions; method "rk4" (fixed step with the stiffness
        cap) or "rkf45" (embedded 4(5) adaptive with the same cap).

    For funnel systems every accepted step is checked to stay strictly
    inside the envelope; steps that would leave it are halved.  The
    adaptive method additionally halves steps that newly cross above a
    ratio of 0.99 (a bounded number of times, so that trajectories whose
    equilibrium legitimately hugs the boundary still advance).

    Raises
    ------
    FunnelViolationAtStart, StepUnderflow, NonFiniteState.
    """
    opts = opts or SolverOptions()
    x = np.array(x0, dtype=float)
    batched = x.ndim == 2
    if x.shape[0] != sys.total_dim:
        raise DimensionMismatch(
            f"x0 has leading dim {x.shape[0]}, system needs {sys.total_dim}"
        )
    if t_end <= t0:
        raise DimensionMismatch("t_end must exceed t0")
    if opts.method not in ("rk4", "rkf45"):
        raise DimensionMismatch(f"unknown method {opts.method!r}")

    h_cap = np.inf
    if sys.stiffness_scale > 0:
        h_cap = opts.stiffness_safety / sys.stiffness_scale
    h_base = min(opts.h, h_cap, t_end - t0)

    funnel = sys.funnel_ratios is not None
    if funnel:
        start_ratio = float(np.max(sys.funnel_ratios(t0, x)))
        if start_ratio >= 1.0:
            raise FunnelViolationAtStart(
                f"initial funnel ratio {start_ratio:.6f} is not strictly below 1"
            )

    times = [t0]
    states = [x.copy()]
    margins = [sys.funnel_margins(t0, x)] if funnel and not batched else None
    min_margin = np.inf
    t = t0
    h = h_base
    steps = 0
    rejected = 0
    recorded_t = t0

    while t < t_end - 1e-14 * max(1.0, abs(t_end)):
        h = min(h, t_end - t)
        h_entry = h
        caution_budget = 12
        while True:
            # the floor applies to rejection-shrunk steps, not to the
            # naturally small final step that lands on t_end
            if h < opts.min_step and h < h_entry:
                raise StepUnderflow(
                    f"step {h:.3e} fell below the floor at t = {t:.6f}"
                )
            if opts.method == "rk4":
                x_new = _rk4_step(sys.rhs, t, x, h)
                err_ok = True
            else:
                x_new, err = _rkf45_step(sys.rhs, t, x, h)
                scale = opts.atol + opts.rtol * np.maximum(np.abs(x), np.abs(x_new))
                with np.errstate(invalid="ignore", divide="ignore"):
                    err_norm = float(np.max(np.abs(err) / scale))
                err_ok = np.isfinite(err_norm) and err_norm <= 1.0
            finite = bool(np.all(np.isfinite(x_new)))
            if not finite:
                if h / 2 < opts.min_step:
                    raise NonFiniteState(
                        f"state left the floating-point range at t = {t:.6f}"
                    )
                h *= 0.5
                rejected += 1
                continue
            if funnel:
                ratio_post = float(np.max(sys.funnel_ratios(t + h, x_new)))
                if ratio_post >= 1.0:
                    h *= 0.5
                    rejected += 1
                    continue
                if (
                    opts.method == "rkf45"
                    and ratio_post > 0.99
                    and float(np.max(sys.funnel_ratios(t, x))) <= 0.99
                    and caution_budget > 0
                ):
                    caution_budget -= 1
                    h *= 0.5
                    rejected += 1
                    continue
            if not err_ok:
                factor = 0.2 if err_norm > 100.0 else max(
                    0.2, 0.9 * err_norm ** -0.2
                )
                h *= factor
                rejected += 1
                continue
            break

        t = t + h
        x = x_new
        steps += 1
        if funnel and not batched:
            margin_now = sys.funnel_margins(t, x)
            min_margin = min(min_margin, float(np.min(margin_now)))
        if steps % opts.record_every == 0 or t >= t_end - 1e-14:
            times.append(t)
            states.append(x.copy())
            recorded_t = t
            if margins is not None:
                margins.append(margin_now)
        if opts.method == "rkf45":
            if err_norm > 1e-14:
                h = h * min(5.0, 0.9 * err_norm ** -0.2)
            else:
                h = h * 5.0
            h = min(h, h_cap)
        else:
            h = h_base

    if recorded_t < t_end - 1e-12:
        times.append(t)
        states.append(x.copy())
        if margins is not None:
            margins.append(sys.funnel_margins(t, x))

    times_arr = np.array(times)
    states_arr = np.array(states)
    disagreement = None
    if sys.sync_indices is not None and not batched:
        disagreement = _disagreement_series(states_arr, sys.sync_indices)
    return Trajectory(
        times=times_arr,
        states=states_arr,
        agent_slices=list(sys.agent_slices),
        sync_indices=sys.sync_indices,
        disagreement=disagreement,
        funnel_margin=np.array(margins) if margins is not None else None,
        metadata={
            "solver": opts.method,
            "steps": steps,
            "rejected": rejected,
            "h_cap": float(h_cap) if np.isfinite(h_cap) else None,
            "h_base": float(h_base),
            "stiffness_scale": sys.stiffness_scale,
            "batched": batched,
            "funnel_min_margin": (None if not funnel or batched
                                  else float(min_margin)),
        },
    )


def sync_error(traj: Trajectory) -> np.ndarray:
    """Per-time max pairwise disagreement over the coupled components."""
    if traj.disagreement is not None:
        return traj.disagreement
    if traj.sync_indices is None:
        raise DimensionMismatch("trajectory has no sync components recorded")
    if traj.states.ndim == 3:
        raise DimensionMismatch("sync_error is undefined for batched trajectories")
    return _disagreement_series(traj.states, traj.sync_indices)


# ---------------------------------------------------------------------------
# steppers and helpers


def _rk4_step(rhs, t, x, h):
    k1 = rhs(t, x)
    k2 = rhs(t + 0.5 * h, x + 0.5 * h * k1)
    k3 = rhs(t + 0.5 * h, x + 0.5 * h * k2)
    k4 = rhs(t + h, x + h * k3)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _rkf45_step(rhs, t, x, h):
    """One Fehlberg 4(5) step; returns the 5th-order state and the error."""
    k1 = rhs(t, x)
    k2 = rhs(t + h / 4.0, x + h * (k1 / 4.0))
    k3 = rhs(t + 3.0 * h / 8.0, x + h * (3.0 * k1 + 9.0 * k2) / 32.0)
    k4 = rhs(
        t + 12.0 * h / 13.0,
        x + h * (1932.0 * k1 - 7200.0 * k2 + 7296.0 * k3) / 2197.0,
    )
    k5 = rhs(
        t + h,
        x + h * (439.0 / 216.0 * k1 - 8.0 * k2 + 3680.0 / 513.0 * k3
                 - 845.0 / 4104.0 * k4),
    )
    k6 = rhs(
        t + h / 2.0,
        x + h * (-8.0 / 27.0 * k1 + 2.0 * k2 - 3544.0 / 2565.0 * k3
                 + 1859.0 / 4104.0 * k4 - 11.0 / 40.0 * k5),
    )
    x5 = x + h * (16.0 / 135.0 * k1 + 6656.0 / 12825.0 * k3
                  + 28561.0 / 56430.0 * k4 - 9.0 / 50.0 * k5 + 2.0 / 55.0 * k6)
    err = h * (1.0 / 360.0 * k1 - 128.0 / 4275.0 * k3 - 2197.0 / 75240.0 * k4
               + 1.0 / 50.0 * k5 + 2.0 / 55.0 * k6)
    return x5, err


def _check_uniform(fields, g: Graph) -> tuple[int, int]:
    if isinstance(fields, FieldFamily):
        if fields.n_agents != g.n_agents:
            raise DimensionMismatch(
                f"family covers {fields.n_agents} agents, graph has {g.n_agents}"
            )
        return g.n_agents, fields.dim
    fields = list(fields)
    if len(fields) != g.n_agents:
        raise DimensionMismatch(f"{len(fields)} fields for {g.n_agents} agents")
    dims = {f.dim for f in fields}
    if len(dims) != 1:
        raise DimensionMismatch(f"agent dims differ: {sorted(dims)}")
    return g.n_agents, dims.pop()


def _to_agents(x, n_agents, dim):
    return x.reshape((n_agents, dim) + x.shape[1:])


def _eval_fields(fields, t, stacked):
    """Evaluate per-agent dynamics on an agent-major stack (N, dim[, B])."""
    if isinstance(fields, FieldFamily):
        return np.asarray(fields.eval_stacked(t, stacked))
    if stacked.ndim == 2:
        return np.stack(
            [np.asarray(f.eval(t, stacked[i])) for i, f in enumerate(fields)]
        )
    out = np.empty_like(stacked)
    for i, f in enumerate(fields):
        for b in range(stacked.shape[2]):
            out[i, :, b] = np.asarray(f.eval(t, stacked[i, :, b]))
    return out


def _apply_pair(fn, t, own, other):
    if own.ndim == 1:
        return np.asarray(fn(t, own, other))
    out = np.empty_like(own)
    for b in range(own.shape[1]):
        out[:, b] = np.asarray(fn(t, own[:, b], other[:, b]))
    return out


def _output_layout(m_list, n):
    slices = []
    z_idx = []
    y_rows = []
    pos = 0
    for m in m_list:
        start = pos
        z_idx.append(np.arange(pos, pos + m))
        pos += m
        y_rows.append(np.arange(pos, pos + n))
        pos += n
        slices.append(slice(start, pos))
    return slices, z_idx, np.array(y_rows, dtype=int)


def _edge_groups(g: Graph, default: FunnelSpec, overrides: dict):
    by_spec: dict[int, tuple[FunnelSpec, list[int], list[int]]] = {}
    for (i, j, _w) in g.edges:
        key = (min(i, j), max(i, j))
        sp = overrides.get(key, default)
        if sp.family != "edge":
            raise ConfigError(f"override for edge {key} is not an edge funnel")
        bucket = by_spec.setdefault(id(sp), (sp, [], []))
        bucket[1].append(i - 1)
        bucket[2].append(j - 1)
    return [
        (sp, np.array(ei, dtype=int), np.array(ej, dtype=int))
        for sp, ei, ej in by_spec.values()
    ]


def _disagreement_series(states, sync_indices):
    n_agents = sync_indices.shape[0]
    out = np.zeros(states.shape[0])
    for ti in range(states.shape[0]):
        per_agent = states[ti][sync_indices.reshape(-1)].reshape(sync_indices.shape)
        worst = 0.0
        for i in range(n_agents):
            diff = per_agent[i + 1:] - per_agent[i]
            if diff.size:
                worst = max(worst, float(np.max(np.linalg.norm(diff, axis=1))))
        out[ti] = worst
    return out
