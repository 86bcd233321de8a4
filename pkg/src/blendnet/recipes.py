"""Built-in application recipes.

Each recipe packages a distributed-computation task as a scenario
builder returning the assembled network together with a decoder or an
independent oracle for what the synchronized network should compute:

* counting: the network converges to the number of participants;
* roster: convergence to a sum of powers of two encoding who is present;
* least_squares: distributed solution of a stacked least-squares fit;
* median: agents agree on the median of privately held values;
* dispatch: resource allocation with per-agent convex costs and bounds;
* lienard: coupled Lienard oscillators with an averaged limit cycle;
* observer_full / observer_rank_deficient: distributed state estimation
  where each agent measures only part of the plant.

Oracles are computed independently of the simulation (closed forms,
normal equations, sorted order statistics, dual bisection, or direct
plant integration), so tests compare two genuinely different routes to
the same number.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .blended import (
    BlendedModel,
    blended_output,
    blended_rank_deficient,
    blended_state,
    build_decomposition,
    contraction_estimate,
)
from .errors import (
    ConfigError,
    DimensionMismatch,
    Infeasible,
    NontrivialCommonUndetectable,
    NotConvex,
    NotDetectable,
    RankDeficientA,
)
from .graph import Graph
from .linalg import ObserverSplit, _solve_lyapunov, observability_split
from .netsim import (
    CoupledField,
    CoupledFieldFamily,
    FieldFamily,
    FunnelSpec,
    NetworkSystem,
    SolverOptions,
    VectorField,
    assemble_edge_funnel,
    assemble_node_funnel,
    assemble_output_coupled,
    assemble_rank_deficient,
    assemble_state_coupled,
    integrate,
)

__all__ = [
    "QuadraticCost",
    "CustomCost",
    "DispatchProblem",
    "DispatchSolution",
    "ObserverProblem",
    "LienardConfig",
    "MedianSet",
    "CycleInfo",
    "CouplingSpec",
    "ScenarioBundle",
    "counting_scenario",
    "roster_scenario",
    "least_squares_scenario",
    "median_scenario",
    "theta",
    "dispatch_scenario",
    "solve_dispatch",
    "lienard_scenario",
    "detect_limit_cycle",
    "observer_full_scenario",
    "observer_rank_deficient_scenario",
    "observer_full_cosim",
    "observer_rank_deficient_cosim",
    "RECIPES",
]


# ---------------------------------------------------------------------------
# cost models and problem types


@dataclass(frozen=True)
class QuadraticCost:
    """Cost a*lam^2 + b*lam with a > 0; derivative inverts in closed form."""

    a: float
    b: float

    def __post_init__(self):
        if self.a <= 0:
            raise NotConvex(f"quadratic coefficient must be positive, got {self.a}")

    def derivative(self, lam: float) -> float:
        return 2.0 * self.a * lam + self.b

    def derivative_inverse(self, s: float) -> float:
        return (s - self.b) / (2.0 * self.a)


@dataclass(frozen=True)
class CustomCost:
    """User-supplied strictly convex cost.

    Callers provide the derivative and its inverse; strict convexity
    (a strictly increasing derivative) is assumed, not checked.
    """

    derivative: Callable[[float], float]
    derivative_inverse: Callable[[float], float]


@dataclass(frozen=True)
class DispatchProblem:
    """Per-agent allocation problem: costs, demands, and box bounds."""

    costs: tuple
    demands: tuple
    lower: tuple
    upper: tuple

    def __post_init__(self):
        n = len(self.costs)
        if not (len(self.demands) == len(self.lower) == len(self.upper) == n):
            raise DimensionMismatch("dispatch lists must share a length")
        for lo, hi in zip(self.lower, self.upper):
            if lo > hi:
                raise ConfigError(f"bound pair ({lo}, {hi}) is inverted")
        total = float(sum(self.demands))
        if not (sum(self.lower) <= total <= sum(self.upper)):
            raise Infeasible(
                f"total demand {total} outside [{sum(self.lower)}, {sum(self.upper)}]"
            )

    @property
    def n_agents(self) -> int:
        return len(self.costs)


@dataclass(frozen=True)
class DispatchSolution:
    """Optimal dual value s_star and per-agent allocations theta_i(s_star)."""

    s_star: float
    lambda_star: np.ndarray


@dataclass(frozen=True)
class ObserverProblem:
    """Distributed estimation setup: plant S, per-agent outputs G_i.

    The stacked pair (col(G_i), S) must be detectable; individual pairs
    may see only part of the state.  kappa couples each agent's raw
    estimate to its partial observer (auto-selected when None); k is the
    network coupling gain.
    """

    s_matrix: np.ndarray
    g_blocks: tuple
    noise: tuple | None = None
    kappa: float | None = None
    k: float = 100.0

    def __post_init__(self):
        s = np.atleast_2d(np.asarray(self.s_matrix, dtype=float))
        object.__setattr__(self, "s_matrix", s)
        blocks = tuple(np.atleast_2d(np.asarray(b, dtype=float)) for b in self.g_blocks)
        object.__setattr__(self, "g_blocks", blocks)
        n = s.shape[0]
        if s.shape != (n, n):
            raise DimensionMismatch(f"plant matrix must be square, got {s.shape}")
        for i, b in enumerate(blocks):
            if b.shape[1] != n:
                raise DimensionMismatch(
                    f"output block {i + 1} has {b.shape[1]} columns, expected {n}"
                )
        stacked = np.vstack(blocks)
        _check_detectable(s, stacked)

    @property
    def n(self) -> int:
        return self.s_matrix.shape[0]


def _check_detectable(s: np.ndarray, g: np.ndarray) -> None:
    """Rank test on every eigenvalue of s with nonnegative real part."""
    n = s.shape[0]
    for lam in np.linalg.eigvals(s):
        if lam.real < -1e-12:
            continue
        pencil = np.vstack([lam * np.eye(n) - s, g.astype(complex)])
        if np.linalg.matrix_rank(pencil, tol=1e-9 * max(1.0, abs(lam))) < n:
            raise NotDetectable(
                f"mode {lam:.6g} is invisible to every output"
            )


@dataclass(frozen=True)
class LienardConfig:
    """Per-agent Lienard oscillators z'' + f_i(z) z' + g_i(z) = input.

    f_coeffs and g_coeffs hold ascending polynomial coefficients per
    agent; a > 0 sets the measured output o_i = a z_i + z'_i.
    """

    f_coeffs: tuple
    g_coeffs: tuple
    a: float = 1.0

    def __post_init__(self):
        if self.a <= 0:
            raise ConfigError(f"output coefficient a must be positive, got {self.a}")
        if len(self.f_coeffs) != len(self.g_coeffs):
            raise DimensionMismatch("need one damping and one restoring polynomial per agent")
        object.__setattr__(
            self, "f_coeffs", tuple(tuple(float(c) for c in cs) for cs in self.f_coeffs)
        )
        object.__setattr__(
            self, "g_coeffs", tuple(tuple(float(c) for c in cs) for cs in self.g_coeffs)
        )

    @property
    def n_agents(self) -> int:
        return len(self.f_coeffs)


@dataclass(frozen=True)
class MedianSet:
    """The median of a list: a point for odd counts, an interval for even."""

    lo: float
    hi: float

    def distance(self, x: float) -> float:
        return max(self.lo - x, x - self.hi, 0.0)

    def contains(self, x: float, tol: float = 0.0) -> bool:
        return self.distance(x) <= tol


def median_set(values) -> MedianSet:
    r = np.sort(np.asarray(values, dtype=float))
    n = r.shape[0]
    if n == 0:
        raise ConfigError("median of an empty list")
    if n % 2:
        mid = r[(n - 1) // 2]
        return MedianSet(float(mid), float(mid))
    return MedianSet(float(r[n // 2 - 1]), float(r[n // 2]))


@dataclass(frozen=True)
class CycleInfo:
    """Result of limit-cycle detection on a planar system."""

    found: bool
    period: float
    state: np.ndarray
    crossings: int


@dataclass(frozen=True)
class CouplingSpec:
    """How a scenario couples its agents: a gain or a funnel envelope."""

    kind: str = "state"
    k: float | None = None
    funnel: FunnelSpec | None = None

    def __post_init__(self):
        if self.kind in ("state",):
            if self.k is None or self.k <= 0:
                raise ConfigError("state coupling needs a positive gain k")
        elif self.kind in ("edge_funnel", "node_funnel"):
            if self.funnel is None:
                raise ConfigError(f"{self.kind} coupling needs a funnel spec")
        else:
            raise ConfigError(f"unknown coupling kind {self.kind!r}")


@dataclass
class ScenarioBundle:
    """Everything the harness needs to run and score one scenario."""

    name: str
    system: NetworkSystem
    graph: Graph
    fields: object
    decoder: Callable | None = None
    oracle: object = None
    blended: BlendedModel | None = None
    terminal_error: Callable[[np.ndarray], float] | None = None
    extras: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# counting and roster


def counting_scenario(g: Graph, k: float):
    """Network whose synchronized value approaches the number of agents.

    Agent 1 runs -x + 1 and everyone else the constant 1, so the average
    field is -s/N + 1 with fixed point N.  Returns the system and the
    nearest-integer decoder.
    """
    n = g.n_agents
    fields = _counting_family(n)
    sys = assemble_state_coupled(fields, g, k)
    sys.extra.update(recipe="counting", fields=fields, target=float(n))
    return sys, _round_decoder


def _counting_family(n: int) -> FieldFamily:
    def eval_stacked(t, x):
        out = np.ones_like(x)
        out[0] = 1.0 - x[0]
        return out

    return FieldFamily(n_agents=n, dim=1, eval_stacked=eval_stacked,
                       label="counting")


def _round_decoder(value: float) -> int:
    return int(round(float(value)))


def roster_scenario(g: Graph, ids, k: float):
    """Network converging to sum(2^(id-1)), a bitmask of who is present.

    The agent holding id 1 uses -x + 1; an agent with id i contributes
    the constant 2^(i-1).  The decoder rounds and expands the bits back
    into the sorted id set.
    """
    ids = [int(i) for i in ids]
    if len(ids) != g.n_agents:
        raise DimensionMismatch(f"{len(ids)} ids for {g.n_agents} agents")
    if len(set(ids)) != len(ids):
        raise ConfigError(f"ids must be distinct, got {ids}")
    if any(i < 1 for i in ids):
        raise ConfigError("ids are 1-based positive integers")
    if 1 not in ids:
        raise ConfigError("an agent holding id 1 must be present")
    fields = _roster_family(ids)
    sys = assemble_state_coupled(fields, g, k)
    sys.extra.update(recipe="roster", fields=fields, ids=tuple(ids),
                     target=float(sum(2 ** (i - 1) for i in ids)))
    return sys, _roster_decoder


def _roster_family(ids) -> FieldFamily:
    consts = np.array([float(2 ** (i - 1)) for i in ids])
    anchor = ids.index(1)

    def eval_stacked(t, x):
        out = np.broadcast_to(
            consts.reshape((len(ids),) + (1,) * (x.ndim - 1)), x.shape
        ).copy()
        out[anchor] = 1.0 - x[anchor]
        return out

    return FieldFamily(n_agents=len(ids), dim=1, eval_stacked=eval_stacked,
                       label="roster")


def _roster_decoder(value: float):
    v = int(round(float(value)))
    if v < 0:
        return tuple()
    return tuple(i + 1 for i in range(v.bit_length()) if (v >> i) & 1)


# ---------------------------------------------------------------------------
# least squares


def least_squares_scenario(a_blocks, b_blocks, g: Graph, k: float):
    """Distributed least squares: agent i descends its own residual.

    Agent fields are -A_i^T (A_i x - b_i); the average is a scaled
    gradient step on ||Ax - b||^2, whose unique minimizer (full column
    rank required) is the returned oracle.
    """
    a_list = [np.atleast_2d(np.asarray(a, dtype=float)) for a in a_blocks]
    b_list = [np.atleast_1d(np.asarray(b, dtype=float)) for b in b_blocks]
    if len(a_list) != g.n_agents or len(b_list) != g.n_agents:
        raise DimensionMismatch(
            f"{len(a_list)} blocks for {g.n_agents} agents"
        )
    n_cols = a_list[0].shape[1]
    for a, b in zip(a_list, b_list):
        if a.shape[1] != n_cols:
            raise DimensionMismatch("blocks disagree on the unknown's dimension")
        if a.shape[0] != b.shape[0]:
            raise DimensionMismatch("each block needs one rhs entry per row")
    a_full = np.vstack(a_list)
    b_full = np.concatenate(b_list)
    if np.linalg.matrix_rank(a_full) < n_cols:
        raise RankDeficientA(
            "stacked matrix has deficient column rank; the minimizer is "
            "not unique, which this recipe does not support"
        )
    oracle = np.linalg.solve(a_full.T @ a_full, a_full.T @ b_full)

    fields = _least_squares_fields(a_list, b_list)
    sys = assemble_state_coupled(fields, g, k)
    sys.extra.update(recipe="least_squares", fields=fields, target=oracle)
    return sys, oracle


def _least_squares_fields(a_list, b_list):
    rows = {a.shape[0] for a in a_list}
    if len(rows) == 1:
        a_stack = np.stack(a_list)
        b_stack = np.stack(b_list)

        def eval_stacked(t, x):
            resid = np.einsum("iqn,in...->iq...", a_stack, x)
            resid -= b_stack.reshape(b_stack.shape + (1,) * (x.ndim - 2))
            return -np.einsum("iqn,iq...->in...", a_stack, resid)

        return FieldFamily(n_agents=len(a_list), dim=a_list[0].shape[1],
                           eval_stacked=eval_stacked, label="least-squares")
    return [
        VectorField(
            dim=a.shape[1],
            eval=(lambda a, b: lambda t, x: -a.T @ (a @ x - b))(a, b),
            label=f"least-squares[{i}]",
        )
        for i, (a, b) in enumerate(zip(a_list, b_list))
    ]


# ---------------------------------------------------------------------------
# median


def median_scenario(r, g: Graph, k: float):
    """Median solver: agent fields sgn(r_i - x); oracle is the sorted median.

    sgn is evaluated exactly (sgn(0) = 0), so synchronized trajectories
    chatter within a band set by the step size.
    """
    values = np.asarray(r, dtype=float)
    if values.shape[0] != g.n_agents:
        raise DimensionMismatch(f"{values.shape[0]} values for {g.n_agents} agents")
    fields = _median_family(values)
    oracle = median_set(values)
    sys = assemble_state_coupled(fields, g, k)
    sys.extra.update(recipe="median", fields=fields, values=values, target=oracle)
    return sys, oracle


def _median_family(values: np.ndarray) -> FieldFamily:
    n = values.shape[0]

    def eval_stacked(t, x):
        ref = values.reshape((n,) + (1,) * (x.ndim - 1))
        return np.sign(ref - x)

    return FieldFamily(n_agents=n, dim=1, eval_stacked=eval_stacked, label="median")


# ---------------------------------------------------------------------------
# dispatch


def theta(s: float, j, bounds) -> float:
    """Optimal single-agent allocation for a given price s.

    Inverts the cost derivative after saturating s into the derivative's
    range over the bounds; the result always lies inside the bounds and
    is nondecreasing in s.
    """
    lo, hi = float(bounds[0]), float(bounds[1])
    if lo > hi:
        raise ConfigError(f"bounds ({lo}, {hi}) are inverted")
    d_lo = float(j.derivative(lo))
    d_hi = float(j.derivative(hi))
    clamped = min(max(float(s), d_lo), d_hi)
    lam = float(j.derivative_inverse(clamped))
    return min(max(lam, lo), hi)


def solve_dispatch(p: DispatchProblem) -> DispatchSolution:
    """Dual bisection oracle: find s with sum_i theta_i(s) = sum_i d_i.

    The allocation sum is continuous and nondecreasing in s, and
    feasibility brackets the root, so bisection converges; allocations
    are read back through theta.
    """
    total = float(sum(p.demands))

    def gap(s):
        alloc = sum(
            theta(s, j, (lo, hi))
            for j, lo, hi in zip(p.costs, p.lower, p.upper)
        )
        return total - alloc

    lo = min(j.derivative(b) for j, b in zip(p.costs, p.lower)) - 1.0
    hi = max(j.derivative(b) for j, b in zip(p.costs, p.upper)) + 1.0
    g_lo, g_hi = gap(lo), gap(hi)
    if g_lo < 0 or g_hi > 0:
        raise Infeasible("demand total left the reachable allocation range")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        g_mid = gap(mid)
        if g_mid > 0:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-13 * max(1.0, abs(lo), abs(hi)):
            break
    s_star = 0.5 * (lo + hi)
    lam = np.array([
        theta(s_star, j, (blo, bhi))
        for j, blo, bhi in zip(p.costs, p.lower, p.upper)
    ])
    return DispatchSolution(s_star=s_star, lambda_star=lam)


def dispatch_scenario(p: DispatchProblem, g: Graph, k: float):
    """Dispatch network: agent fields d_i - theta_i(x); oracle via dual bisection."""
    if p.n_agents != g.n_agents:
        raise DimensionMismatch(f"{p.n_agents} agents in problem, {g.n_agents} in graph")
    oracle = solve_dispatch(p)
    fields = _dispatch_fields(p)
    sys = assemble_state_coupled(fields, g, k)
    sys.extra.update(recipe="dispatch", fields=fields, problem=p, target=oracle)
    return sys, oracle


def _dispatch_fields(p: DispatchProblem):
    if all(isinstance(j, QuadraticCost) for j in p.costs):
        a = np.array([j.a for j in p.costs])
        b = np.array([j.b for j in p.costs])
        d = np.array(p.demands, dtype=float)
        lo = np.array(p.lower, dtype=float)
        hi = np.array(p.upper, dtype=float)
        n = p.n_agents

        def eval_stacked(t, x):
            shape = (n,) + (1,) * (x.ndim - 1)
            lam = (x - b.reshape(shape)) / (2.0 * a.reshape(shape))
            lam = np.clip(lam, lo.reshape(shape), hi.reshape(shape))
            return d.reshape(shape) - lam

        return FieldFamily(n_agents=n, dim=1, eval_stacked=eval_stacked,
                           label="dispatch")
    return [
        VectorField(
            dim=1,
            eval=(lambda j, d, lo, hi: lambda t, x: np.array(
                [d - theta(float(x[0]), j, (lo, hi))]
            ))(j, d, lo, hi),
            label=f"dispatch[{i}]",
        )
        for i, (j, d, lo, hi) in enumerate(
            zip(p.costs, p.demands, p.lower, p.upper)
        )
    ]


# ---------------------------------------------------------------------------
# Lienard oscillators


def lienard_scenario(c: LienardConfig, g: Graph, k: float):
    """Coupled Lienard oscillators in output coordinates.

    Each agent carries (z_i, y_i) with y_i = a z_i + z'_i; only y_i is
    exchanged.  Returns the assembled network and the planar averaged
    oscillator obtained by projecting the slow model onto the
    synchronization manifold.
    """
    if c.n_agents != g.n_agents:
        raise DimensionMismatch(f"{c.n_agents} oscillators for {g.n_agents} agents")
    z_family, y_family = _lienard_families(c)
    sys = assemble_output_coupled(z_family, y_family, np.array([[1.0]]), g, k)
    f_hat = _mean_coeffs(c.f_coeffs)
    g_hat = _mean_coeffs(c.g_coeffs)
    projected = _planar_lienard(f_hat, g_hat, c.a)
    sys.extra.update(recipe="lienard", config=c, z_fields=z_family,
                     y_fields=y_family, projected=projected,
                     f_hat=f_hat, g_hat=g_hat)
    return sys, projected


def _pad_coeffs(coeff_lists) -> np.ndarray:
    width = max(len(cs) for cs in coeff_lists)
    out = np.zeros((len(coeff_lists), width))
    for i, cs in enumerate(coeff_lists):
        out[i, : len(cs)] = cs
    return out


def _mean_coeffs(coeff_lists) -> np.ndarray:
    return _pad_coeffs(coeff_lists).mean(axis=0)


def _polyval_rows(coeffs: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Row-wise ascending-coefficient polynomial, Horner style.

    coeffs is (N, D); x is (N, 1[, B]); each agent's polynomial is
    evaluated at its own scalar state.
    """
    shape = (coeffs.shape[0],) + (1,) * (x.ndim - 1)
    out = np.zeros_like(x)
    for d in range(coeffs.shape[1] - 1, -1, -1):
        out = out * x + coeffs[:, d].reshape(shape)
    return out


def _lienard_families(c: LienardConfig):
    n = c.n_agents
    a = c.a
    f_mat = _pad_coeffs(c.f_coeffs)
    g_mat = _pad_coeffs(c.g_coeffs)

    def z_eval(t, z, y):
        return y - a * z

    def y_eval(t, y, z):
        fz = _polyval_rows(f_mat, z)
        gz = _polyval_rows(g_mat, z)
        return a * y - a * a * z - fz * (y - a * z) - gz

    return (
        CoupledFieldFamily(n_agents=n, dim=1, eval_stacked=z_eval, label="lienard-z"),
        CoupledFieldFamily(n_agents=n, dim=1, eval_stacked=y_eval, label="lienard-y"),
    )


def _planar_lienard(f_coeffs: np.ndarray, g_coeffs: np.ndarray, a: float) -> VectorField:
    from numpy.polynomial import polynomial as P

    def eval_field(t, x):
        z, y = x[0], x[1]
        fz = P.polyval(z, f_coeffs)
        gz = P.polyval(z, g_coeffs)
        dz = y - a * z
        dy = a * y - a * a * z - fz * (y - a * z) - gz
        return np.array([dz, dy]) if np.ndim(z) == 0 else np.stack([dz, dy])

    return VectorField(dim=2, eval=eval_field, label="lienard-averaged")


def detect_limit_cycle(field: VectorField, x0, a: float, t_end: float = 120.0,
                       transient: float = 50.0, match_tol: float = 1e-4,
                       opts: SolverOptions | None = None) -> CycleInfo:
    """Poincare-section test for a planar limit cycle.

    Integrates the field and collects upward crossings of the section
    y = a z (where z' = 0); a cycle is declared when two successive
    post-transient crossings land within match_tol of each other.
    """
    if field.dim != 2:
        raise DimensionMismatch("cycle detection expects a planar field")
    sys = NetworkSystem(
        total_dim=2,
        rhs=lambda t, x: np.asarray(field.eval(t, x)),
        coupling_kind="blended",
        k=None,
        agent_slices=[slice(0, 2)],
        stiffness_scale=0.0,
        n_agents=1,
    )
    opts = opts or SolverOptions(method="rkf45", rtol=1e-9, atol=1e-11, h=1e-2)
    traj = integrate(sys, np.asarray(x0, dtype=float), 0.0, t_end, opts)
    sigma = traj.states[:, 1] - a * traj.states[:, 0]
    crossings = []
    for i in range(sigma.shape[0] - 1):
        if sigma[i] < 0.0 <= sigma[i + 1]:
            w = -sigma[i] / (sigma[i + 1] - sigma[i])
            t_star = traj.times[i] + w * (traj.times[i + 1] - traj.times[i])
            state = traj.states[i] + w * (traj.states[i + 1] - traj.states[i])
            if t_star > transient:
                crossings.append((float(t_star), state))
    if len(crossings) < 2:
        return CycleInfo(False, math.nan, np.full(2, math.nan), len(crossings))
    (t_a, s_a), (t_b, s_b) = crossings[-2], crossings[-1]
    gap = float(np.linalg.norm(s_b - s_a))
    return CycleInfo(gap < match_tol, t_b - t_a, s_b, len(crossings))


# ---------------------------------------------------------------------------
# distributed observers


def observer_full_scenario(p: ObserverProblem, g: Graph):
    """Error network of the partial-observer based distributed estimator.

    Each agent runs a reduced observer on its own observable part and a
    full-size estimate coupled to its neighbors; the returned system
    evolves the stacked (partial-observer error, estimate error) pairs.
    Noise-free, the zero state is the oracle.
    """
    splits = _agent_splits(p, g)
    n = p.n
    a_stacked = np.vstack([sp.z_basis.T for sp in splits])
    kappa = p.kappa if p.kappa is not None else default_kappa(splits, p.s_matrix)

    z_fields = []
    y_fields = []
    for i, sp in enumerate(splits):
        d_i = sp.s_bar - sp.u_bar @ sp.g_bar
        noise_i = p.noise[i] if p.noise is not None else None
        z_fields.append(CoupledField(
            dim=d_i.shape[0],
            eval=_partial_error_eval(d_i, sp.u_bar, noise_i),
            label=f"partial-error[{i}]",
        ))
        y_fields.append(CoupledField(
            dim=n,
            eval=_estimate_error_eval(p.s_matrix, sp.z_basis, kappa),
            label=f"estimate-error[{i}]",
        ))
    sys = assemble_output_coupled(z_fields, y_fields, np.eye(n), g, p.k)
    sys.stiffness_scale = max(sys.stiffness_scale, float(kappa))
    blended = blended_output(z_fields, y_fields)
    sys.extra.update(recipe="observer_full", splits=splits, kappa=kappa,
                     problem=p, blended=blended, a_stacked=a_stacked)
    oracle = np.zeros(sys.total_dim)
    return sys, oracle


def _partial_error_eval(d_i, u_bar, noise):
    if noise is None:
        return lambda t, z, y: d_i @ z
    return lambda t, z, y: d_i @ z + u_bar @ np.atleast_1d(noise(t))


def _estimate_error_eval(s, z_basis, kappa):
    gain = kappa * z_basis

    def eval_field(t, y, z):
        return s @ y - gain @ (z_basis.T @ y) + gain @ z

    return eval_field


def _agent_splits(p: ObserverProblem, g: Graph) -> list[ObserverSplit]:
    if len(p.g_blocks) != g.n_agents:
        raise DimensionMismatch(
            f"{len(p.g_blocks)} output blocks for {g.n_agents} agents"
        )
    return [observability_split(p.s_matrix, gi) for gi in p.g_blocks]


def default_kappa(splits, s_matrix, box_radius: float = 10.0,
                  max_exponent: int = 15) -> float:
    """Smallest power of 2 whose blended error model is contractive.

    The slow model of the error network is block triangular: the placed
    partial-observer errors on top, the averaged estimate error below.
    A block-diagonal Lyapunov metric certifies contraction once the
    averaged block is Hurwitz, so the search doubles kappa until the
    sampled estimate goes negative.
    """
    n = s_matrix.shape[0]
    n_agents = len(splits)
    d_blocks = [sp.s_bar - sp.u_bar @ sp.g_bar for sp in splits]
    r_total = sum(b.shape[0] for b in d_blocks)
    a_stacked = np.vstack([sp.z_basis.T for sp in splits])
    rng = np.random.default_rng(0)
    samples = [
        (0.0, box_radius * rng.uniform(-1.0, 1.0, size=r_total + n))
        for _ in range(5)
    ]
    for exponent in range(max_exponent + 1):
        kappa = float(2 ** exponent)
        j = _blended_error_matrix(d_blocks, a_stacked, s_matrix, kappa, n_agents)
        metric = _triangular_metric(j, r_total)
        if metric is None:
            continue
        field = VectorField(dim=j.shape[0], eval=lambda t, x, j=j: j @ x)
        if contraction_estimate(field, samples, metric=metric) < 0:
            return kappa
    raise NotDetectable(
        f"no kappa up to 2^{max_exponent} made the averaged error model contract"
    )


def _blended_error_matrix(d_blocks, a_stacked, s_matrix, kappa, n_agents):
    n = s_matrix.shape[0]
    r_total = a_stacked.shape[0]
    j = np.zeros((r_total + n, r_total + n))
    row = 0
    for d in d_blocks:
        j[row:row + d.shape[0], row:row + d.shape[0]] = d
        row += d.shape[0]
    j[r_total:, :r_total] = (kappa / n_agents) * a_stacked.T
    j[r_total:, r_total:] = s_matrix - (kappa / n_agents) * (a_stacked.T @ a_stacked)
    return j


def _triangular_metric(j, r_total):
    """Block-diagonal metric certifying a lower-triangular Hurwitz matrix."""
    d = j[:r_total, :r_total]
    s_k = j[r_total:, r_total:]
    c = j[r_total:, :r_total]
    try:
        p_d = _solve_lyapunov(d.T, np.eye(r_total)) if r_total else np.zeros((0, 0))
        p_s = _solve_lyapunov(s_k.T, np.eye(s_k.shape[0]))
    except np.linalg.LinAlgError:
        return None
    for mat in (p_d, p_s):
        if mat.shape[0] and np.linalg.eigvalsh(0.5 * (mat + mat.T))[0] <= 0:
            return None
    cross = p_s @ c
    alpha = (float(np.linalg.norm(cross, 2) ** 2) + 1.0) if cross.size else 1.0
    out = np.zeros_like(j)
    out[:r_total, :r_total] = alpha * p_d
    out[r_total:, r_total:] = p_s
    return 0.5 * (out + out.T)


def observer_full_cosim(p: ObserverProblem, g: Graph, x0_plant) -> NetworkSystem:
    """Plant plus all observers in one linear system.

    State layout: agent i holds (b_i, chi_hat_i); the true plant state
    comes last.  The plant block is autonomous, so estimation errors can
    be read off directly from a single trajectory.
    """
    sys_err, _ = observer_full_scenario(p, g)
    splits = sys_err.extra["splits"]
    kappa = sys_err.extra["kappa"]
    n = p.n
    n_agents = g.n_agents
    r_list = [sp.z_basis.shape[1] for sp in splits]
    per_agent = [r + n for r in r_list]
    offsets = np.concatenate([[0], np.cumsum(per_agent)]).astype(int)
    plant_at = int(offsets[-1])
    total = plant_at + n

    big = np.zeros((total, total))
    lap = g.laplacian()
    big[plant_at:, plant_at:] = p.s_matrix
    hat_rows = []
    for i, sp in enumerate(splits):
        b_at = offsets[i]
        hat_at = offsets[i] + r_list[i]
        hat_rows.append(np.arange(hat_at, hat_at + n))
        # partial observer driven by the plant output
        big[b_at:hat_at, b_at:hat_at] = sp.s_bar - sp.u_bar @ sp.g_bar
        big[b_at:hat_at, plant_at:] = sp.u_bar @ p.g_blocks[i]
        # estimate corrected toward the partial observer
        big[hat_at:hat_at + n, hat_at:hat_at + n] = (
            p.s_matrix - kappa * (sp.z_basis @ sp.z_basis.T)
        )
        big[hat_at:hat_at + n, b_at:hat_at] = kappa * sp.z_basis
    for i in range(n_agents):
        for j in range(n_agents):
            if lap[i, j]:
                big[np.ix_(hat_rows[i], hat_rows[j])] += -p.k * lap[i, j] * np.eye(n)

    noise = p.noise

    def rhs(t, x):
        dx = big @ x
        if noise is not None:
            for i, sp in enumerate(splits):
                ni = np.atleast_1d(noise[i](t))
                dx[offsets[i]:offsets[i] + r_list[i]] += sp.u_bar @ ni
        return dx

    lam_max = float(np.linalg.eigvalsh(lap)[-1])
    sysm = NetworkSystem(
        total_dim=total,
        rhs=rhs,
        coupling_kind="output",
        k=p.k,
        agent_slices=[slice(int(offsets[i]), int(offsets[i + 1]))
                      for i in range(n_agents)] + [slice(plant_at, total)],
        stiffness_scale=p.k * lam_max + kappa,
        n_agents=n_agents,
        sync_indices=np.array(hat_rows),
        label="observer-full-cosim",
    )
    x0 = np.zeros(total)
    x0[plant_at:] = np.asarray(x0_plant, dtype=float)
    sysm.extra.update(recipe="observer_full", splits=splits, kappa=kappa,
                      problem=p, x0=x0, plant_slice=slice(plant_at, total),
                      hat_rows=np.array(hat_rows))
    return sysm


def observer_rank_deficient_scenario(p: ObserverProblem, g: Graph):
    """Error network of the n-dimensional estimator with filtered coupling.

    Each agent's correction acts only on its observable part; coupling
    is filtered through the projector onto its unobservable subspace, so
    neighbors supply exactly the missing directions.  Requires the
    unobservable subspaces to intersect trivially.
    """
    splits = _agent_splits(p, g)
    n = p.n
    a_stacked = np.vstack([sp.z_basis.T for sp in splits])
    if np.linalg.matrix_rank(a_stacked, tol=1e-9) < n:
        raise NontrivialCommonUndetectable(
            "the agents' blind subspaces share a direction; no coupling "
            "can reconstruct it"
        )
    b_list = [sp.w_basis @ sp.w_basis.T for sp in splits]
    closed = []
    for sp, gi in zip(splits, p.g_blocks):
        u_i = sp.z_basis @ sp.u_bar
        closed.append(p.s_matrix - u_i @ gi)
    mats = np.stack(closed)
    noise = p.noise
    if noise is None:
        fields = _linear_family(mats)
    else:
        fields = [
            VectorField(
                dim=n,
                eval=(lambda m, u, nf: lambda t, x: m @ x + u @ np.atleast_1d(nf(t)))(
                    closed[i], splits[i].z_basis @ splits[i].u_bar, noise[i]
                ),
                label=f"observer-error[{i}]",
            )
            for i in range(len(splits))
        ]
    sys = assemble_rank_deficient(fields, g, p.k, b_list)
    dec = build_decomposition(g, b_list)
    if dec.p_s != 0:
        raise NontrivialCommonUndetectable(
            f"decomposition found {dec.p_s} shared blind directions"
        )
    blended = blended_rank_deficient(
        fields if isinstance(fields, list) else fields.fields(), dec
    )
    sys.extra.update(recipe="observer_rank_deficient", splits=splits,
                     problem=p, decomposition=dec, blended=blended,
                     b_list=b_list)
    oracle = np.zeros(sys.total_dim)
    return sys, oracle


def _linear_family(mats: np.ndarray) -> FieldFamily:
    def eval_stacked(t, x):
        return np.einsum("inm,im...->in...", mats, x)

    return FieldFamily(n_agents=mats.shape[0], dim=mats.shape[1],
                       eval_stacked=eval_stacked, label="linear")


def observer_rank_deficient_cosim(p: ObserverProblem, g: Graph,
                                  x0_plant) -> NetworkSystem:
    """Plant plus the n-dimensional estimators in one linear system."""
    sys_err, _ = observer_rank_deficient_scenario(p, g)
    splits = sys_err.extra["splits"]
    n = p.n
    n_agents = g.n_agents
    plant_at = n_agents * n
    total = plant_at + n
    lap = g.laplacian()

    big = np.zeros((total, total))
    big[plant_at:, plant_at:] = p.s_matrix
    hat_rows = []
    for i, sp in enumerate(splits):
        at = i * n
        hat_rows.append(np.arange(at, at + n))
        u_i = sp.z_basis @ sp.u_bar
        big[at:at + n, at:at + n] = p.s_matrix - u_i @ p.g_blocks[i]
        big[at:at + n, plant_at:] = u_i @ p.g_blocks[i]
        proj = sp.w_basis @ sp.w_basis.T
        for j in range(n_agents):
            if lap[i, j]:
                big[at:at + n, j * n:(j + 1) * n] += -p.k * lap[i, j] * proj

    noise = p.noise

    def rhs(t, x):
        dx = big @ x
        if noise is not None:
            for i, sp in enumerate(splits):
                u_i = sp.z_basis @ sp.u_bar
                dx[i * n:(i + 1) * n] += u_i @ np.atleast_1d(noise[i](t))
        return dx

    lam_max = float(np.linalg.eigvalsh(lap)[-1])
    sysm = NetworkSystem(
        total_dim=total,
        rhs=rhs,
        coupling_kind="rank_deficient",
        k=p.k,
        agent_slices=[slice(i * n, (i + 1) * n) for i in range(n_agents)]
        + [slice(plant_at, total)],
        stiffness_scale=p.k * lam_max,
        n_agents=n_agents,
        sync_indices=np.array(hat_rows),
        label="observer-rank-deficient-cosim",
    )
    x0 = np.zeros(total)
    x0[plant_at:] = np.asarray(x0_plant, dtype=float)
    sysm.extra.update(recipe="observer_rank_deficient", splits=splits,
                      problem=p, x0=x0, plant_slice=slice(plant_at, total),
                      hat_rows=np.array(hat_rows))
    return sysm


# ---------------------------------------------------------------------------
# registry: scenario-config adapters


def _assemble_by_coupling(fields, g: Graph, coupling: CouplingSpec):
    if coupling.kind == "state":
        return assemble_state_coupled(fields, g, coupling.k)
    if coupling.kind == "edge_funnel":
        return assemble_edge_funnel(_as_field_list(fields), g, coupling.funnel)
    return assemble_node_funnel(_as_field_list(fields), g, coupling.funnel)


def _as_field_list(fields):
    return fields.fields() if isinstance(fields, FieldFamily) else fields


def _require_state_coupling(coupling: CouplingSpec, name: str) -> float:
    if coupling.kind != "state":
        raise ConfigError(f"recipe {name!r} only supports state coupling")
    return coupling.k


def _build_counting(params, g: Graph, coupling: CouplingSpec) -> ScenarioBundle:
    if coupling.kind == "state":
        sys, decoder = counting_scenario(g, coupling.k)
    else:
        fields = _counting_family(g.n_agents)
        sys = _assemble_by_coupling(fields, g, coupling)
        sys.extra.update(recipe="counting", fields=fields, target=float(g.n_agents))
        decoder = _round_decoder
    fields = sys.extra["fields"]
    target = sys.extra["target"]
    return ScenarioBundle(
        name="counting", system=sys, graph=g, fields=fields, decoder=decoder,
        oracle=target, blended=blended_state(fields),
        terminal_error=lambda x: float(np.max(np.abs(np.asarray(x) - target))),
    )


def _build_roster(params, g: Graph, coupling: CouplingSpec) -> ScenarioBundle:
    k = _require_state_coupling(coupling, "roster")
    ids = params.get("ids")
    if ids is None:
        raise ConfigError("roster recipe needs an 'ids' list")
    sys, decoder = roster_scenario(g, ids, k)
    target = sys.extra["target"]
    return ScenarioBundle(
        name="roster", system=sys, graph=g, fields=sys.extra["fields"],
        decoder=decoder, oracle=target, blended=blended_state(sys.extra["fields"]),
        terminal_error=lambda x: float(np.max(np.abs(np.asarray(x) - target))),
    )


def _build_least_squares(params, g: Graph, coupling: CouplingSpec) -> ScenarioBundle:
    k = _require_state_coupling(coupling, "least_squares")
    try:
        a_blocks = params["a_blocks"]
        b_blocks = params["b_blocks"]
    except KeyError as exc:
        raise ConfigError("least_squares recipe needs a_blocks and b_blocks") from exc
    sys, oracle = least_squares_scenario(a_blocks, b_blocks, g, k)
    fields = sys.extra["fields"]
    dim = sys.total_dim // g.n_agents

    def terminal_error(x):
        pts = np.asarray(x).reshape(g.n_agents, dim)
        return float(np.max(np.linalg.norm(pts - oracle, axis=1)))

    return ScenarioBundle(
        name="least_squares", system=sys, graph=g, fields=fields,
        oracle=oracle, blended=blended_state(fields),
        terminal_error=terminal_error,
    )


def _build_median(params, g: Graph, coupling: CouplingSpec) -> ScenarioBundle:
    values = params.get("values")
    if values is None:
        raise ConfigError("median recipe needs a 'values' list")
    if coupling.kind == "state":
        sys, oracle = median_scenario(values, g, coupling.k)
    else:
        fields = _median_family(np.asarray(values, dtype=float))
        sys = _assemble_by_coupling(fields, g, coupling)
        oracle = median_set(values)
        sys.extra.update(recipe="median", fields=fields, target=oracle)
    fields = sys.extra["fields"]
    return ScenarioBundle(
        name="median", system=sys, graph=g, fields=fields, oracle=oracle,
        blended=blended_state(fields),
        terminal_error=lambda x: float(
            max(oracle.distance(float(v)) for v in np.asarray(x).reshape(-1))
        ),
    )


def _build_dispatch(params, g: Graph, coupling: CouplingSpec) -> ScenarioBundle:
    k = _require_state_coupling(coupling, "dispatch")
    problem = _dispatch_problem_from_params(params)
    sys, oracle = dispatch_scenario(problem, g, k)

    def terminal_error(x):
        vals = np.asarray(x).reshape(-1)
        worst = 0.0
        for i, (j, lo, hi) in enumerate(
            zip(problem.costs, problem.lower, problem.upper)
        ):
            worst = max(worst, abs(theta(float(vals[i]), j, (lo, hi))
                                   - float(oracle.lambda_star[i])))
        return worst

    return ScenarioBundle(
        name="dispatch", system=sys, graph=g, fields=sys.extra["fields"],
        oracle=oracle, blended=blended_state(sys.extra["fields"]),
        terminal_error=terminal_error,
        extras={"problem": problem},
    )


def _dispatch_problem_from_params(params) -> DispatchProblem:
    try:
        a = params["a"]
        b = params["b"]
        demand = params["demand"]
        lower = params["lower"]
        upper = params["upper"]
    except KeyError as exc:
        raise ConfigError(
            "dispatch recipe needs a, b, demand, lower, upper lists"
        ) from exc
    costs = tuple(QuadraticCost(float(ai), float(bi)) for ai, bi in zip(a, b))
    return DispatchProblem(costs=costs, demands=tuple(float(d) for d in demand),
                           lower=tuple(float(x) for x in lower),
                           upper=tuple(float(x) for x in upper))


def _build_lienard(params, g: Graph, coupling: CouplingSpec) -> ScenarioBundle:
    k = _require_state_coupling(coupling, "lienard")
    try:
        cfg = LienardConfig(
            f_coeffs=tuple(tuple(c) for c in params["f_coeffs"]),
            g_coeffs=tuple(tuple(c) for c in params["g_coeffs"]),
            a=float(params.get("a", 1.0)),
        )
    except KeyError as exc:
        raise ConfigError("lienard recipe needs f_coeffs and g_coeffs") from exc
    sys, projected = lienard_scenario(cfg, g, k)
    return ScenarioBundle(
        name="lienard", system=sys, graph=g,
        fields=(sys.extra["z_fields"], sys.extra["y_fields"]),
        oracle=None,
        blended=blended_output(sys.extra["z_fields"], sys.extra["y_fields"]),
        terminal_error=None,
        extras={"projected": projected, "config": cfg},
    )


def _observer_problem_from_params(params, coupling: CouplingSpec) -> ObserverProblem:
    try:
        s = params["s"]
        g_blocks = params["g_blocks"]
    except KeyError as exc:
        raise ConfigError("observer recipes need s and g_blocks") from exc
    return ObserverProblem(
        s_matrix=np.asarray(s, dtype=float),
        g_blocks=tuple(np.asarray(b, dtype=float) for b in g_blocks),
        kappa=params.get("kappa"),
        k=coupling.k,
    )


def _build_observer_full(params, g: Graph, coupling: CouplingSpec) -> ScenarioBundle:
    _require_state_coupling(coupling, "observer_full")
    p = _observer_problem_from_params(params, coupling)
    x0_plant = np.asarray(params.get("x0_plant", np.ones(p.n)), dtype=float)
    sys = observer_full_cosim(p, g, x0_plant)
    plant = sys.extra["plant_slice"]
    hat_rows = sys.extra["hat_rows"]

    def terminal_error(x):
        x = np.asarray(x)
        chi = x[plant]
        return float(np.max(np.linalg.norm(x[hat_rows] - chi, axis=1)))

    err_sys, _ = observer_full_scenario(p, g)
    return ScenarioBundle(
        name="observer_full", system=sys, graph=g, fields=None,
        oracle=np.zeros(p.n), blended=err_sys.extra["blended"],
        terminal_error=terminal_error,
        extras={"problem": p, "error_system": err_sys, "x0": sys.extra["x0"]},
    )


def _build_observer_rank_deficient(params, g: Graph,
                                   coupling: CouplingSpec) -> ScenarioBundle:
    _require_state_coupling(coupling, "observer_rank_deficient")
    p = _observer_problem_from_params(params, coupling)
    x0_plant = np.asarray(params.get("x0_plant", np.ones(p.n)), dtype=float)
    sys = observer_rank_deficient_cosim(p, g, x0_plant)
    plant = sys.extra["plant_slice"]
    hat_rows = sys.extra["hat_rows"]

    def terminal_error(x):
        x = np.asarray(x)
        chi = x[plant]
        return float(np.max(np.linalg.norm(x[hat_rows] - chi, axis=1)))

    err_sys, _ = observer_rank_deficient_scenario(p, g)
    return ScenarioBundle(
        name="observer_rank_deficient", system=sys, graph=g, fields=None,
        oracle=np.zeros(p.n), blended=err_sys.extra["blended"],
        terminal_error=terminal_error,
        extras={"problem": p, "error_system": err_sys, "x0": sys.extra["x0"],
                "decomposition": err_sys.extra["decomposition"]},
    )


RECIPES: dict[str, Callable[[dict, Graph, CouplingSpec], ScenarioBundle]] = {
    "counting": _build_counting,
    "roster": _build_roster,
    "least_squares": _build_least_squares,
    "median": _build_median,
    "dispatch": _build_dispatch,
    "lienard": _build_lienard,
    "observer_full": _build_observer_full,
    "observer_rank_deficient": _build_observer_rank_deficient,
}
