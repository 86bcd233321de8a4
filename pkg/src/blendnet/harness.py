"""Scenario configs, the simulation runner, and batch experiments.

A scenario is a JSON document pinning down one reproducible run: which
recipe with which parameters, the communication graph, the coupling
(gain or funnel), solver settings, initial conditions, and an optional
schedule of join/leave events.  ``run_scenario`` executes it segment by
segment, resizing the network state atomically at each event, and can
write a long-form CSV plus a machine-readable summary.

Also here: ``sweep_gain`` (one row per coupling gain, fresh run each),
the pacemaker experiment (an ensemble of randomly perturbed oscillator
populations whose collective rhythm is scored for trial-to-trial
spread), plot emission, and ``verify_scenario`` (fast internal
consistency checks for a config's recipe).

Identical config and seed give bit-identical output files; nothing
time- or host-dependent is written.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import (
    ConfigError,
    DimensionMismatch,
    IoError,
    NonFiniteState,
)
from .graph import Graph, build_graph, generate_graph
from .netsim import (
    CoupledFieldFamily,
    FunnelSpec,
    NetworkSystem,
    SolverOptions,
    Trajectory,
    assemble_output_coupled,
    integrate,
)
from .recipes import RECIPES, CouplingSpec, ScenarioBundle

__all__ = [
    "Scenario",
    "EventSpec",
    "InitialSpec",
    "OutputSpec",
    "RunResult",
    "Segment",
    "load_scenario",
    "parse_scenario",
    "run_scenario",
    "sweep_gain",
    "PacemakerConfig",
    "PacemakerTrial",
    "PacemakerResult",
    "pacemaker_experiment",
    "disorder_draws",
    "write_experiment",
    "emit_plots",
    "verify_scenario",
]

SCENARIO_VERSION = 1


# ---------------------------------------------------------------------------
# config model


@dataclass(frozen=True)
class InitialSpec:
    """How the stacked initial state is filled.

    kind "default" zero-fills (observer runs start from their built-in
    plant state instead); "constant" broadcasts one value; "explicit"
    takes the full vector; "random" draws uniformly from [low, high]
    using the scenario seed.
    """

    kind: str = "default"
    value: float = 0.0
    values: tuple = ()
    low: float = -1.0
    high: float = 1.0


@dataclass(frozen=True)
class EventSpec:
    """One roster change: an agent leaves, or a new one joins."""

    time: float
    action: str  # "join" | "leave"
    agent: int | None = None  # stable id, for leave
    edges: tuple = ()  # (partner_sid,) or (partner_sid, weight), for join
    params: dict = field(default_factory=dict)
    state: tuple | None = None  # joiner initial block, default zeros


@dataclass(frozen=True)
class OutputSpec:
    directory: str | None = None
    record_every: int = 1


@dataclass(frozen=True)
class Scenario:
    version: int
    name: str
    recipe: str
    params: dict
    graph: Graph
    coupling: CouplingSpec
    solver: SolverOptions
    t0: float
    t_end: float
    initial: InitialSpec
    events: tuple
    seed: int
    output: OutputSpec


def load_scenario(path) -> Scenario:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise IoError(f"cannot read scenario file {p}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"scenario file {p} is not valid JSON: {exc}") from exc
    return parse_scenario(doc)


def parse_scenario(doc: dict) -> Scenario:
    if not isinstance(doc, dict):
        raise ConfigError("scenario must be a JSON object")
    version = doc.get("version")
    if version != SCENARIO_VERSION:
        raise ConfigError(
            f"unsupported scenario version {version!r}; expected {SCENARIO_VERSION}"
        )
    unknown = set(doc) - {
        "version", "name", "recipe", "graph", "coupling", "solver",
        "initial", "events", "seed", "output",
    }
    if unknown:
        raise ConfigError(f"unknown scenario keys: {sorted(unknown)}")

    recipe_doc = doc.get("recipe")
    if not isinstance(recipe_doc, dict) or "name" not in recipe_doc:
        raise ConfigError('scenario needs a recipe object with a "name"')
    recipe = recipe_doc["name"]
    if recipe not in RECIPES:
        raise ConfigError(
            f"unknown recipe {recipe!r}; available: {sorted(RECIPES)}"
        )
    params = recipe_doc.get("params", {})
    if not isinstance(params, dict):
        raise ConfigError("recipe params must be an object")

    graph = _parse_graph(doc.get("graph"))
    coupling = _parse_coupling(doc.get("coupling"))
    solver, t0, t_end = _parse_solver(doc.get("solver"), doc.get("output"))
    initial = _parse_initial(doc.get("initial"))
    events = _parse_events(doc.get("events", []), t0, t_end)
    output = _parse_output(doc.get("output"))
    seed = doc.get("seed", 0)
    if not isinstance(seed, int):
        raise ConfigError(f"seed must be an integer, got {seed!r}")

    return Scenario(
        version=version,
        name=str(doc.get("name", "scenario")),
        recipe=recipe,
        params=params,
        graph=graph,
        coupling=coupling,
        solver=solver,
        t0=t0,
        t_end=t_end,
        initial=initial,
        events=events,
        seed=seed,
        output=output,
    )


def _parse_graph(doc) -> Graph:
    if not isinstance(doc, dict):
        raise ConfigError("scenario needs a graph object")
    if "edges" in doc:
        n = doc.get("n")
        if not isinstance(n, int):
            raise ConfigError('a literal graph needs an integer "n"')
        return build_graph(n, doc["edges"])
    kind = doc.get("kind")
    n = doc.get("n")
    if kind is None or not isinstance(n, int):
        raise ConfigError('graph needs either "edges" or "kind" plus "n"')
    return generate_graph(kind, n, seed=doc.get("seed"),
                          weight=float(doc.get("weight", 1.0)))


def _parse_coupling(doc) -> CouplingSpec:
    if not isinstance(doc, dict) or "kind" not in doc:
        raise ConfigError('scenario needs a coupling object with a "kind"')
    kind = doc["kind"]
    if kind == "state":
        if "k" not in doc:
            raise ConfigError("state coupling needs a gain k")
        return CouplingSpec("state", k=float(doc["k"]))
    if kind in ("edge_funnel", "node_funnel"):
        family = "edge" if kind == "edge_funnel" else "node"
        try:
            spec = FunnelSpec(
                family=family,
                psi_bar=float(doc["psi_bar"]),
                eta=float(doc["eta"]),
                lambda_rate=float(doc.get("lambda_rate", 1.0)),
                gamma_kind=doc.get("gamma", "reciprocal" if family == "edge" else "tan"),
                delta=float(doc.get("delta", 1e-3)),
            )
        except KeyError as exc:
            raise ConfigError(f"funnel coupling is missing {exc}") from exc
        return CouplingSpec(kind, funnel=spec)
    raise ConfigError(f"unknown coupling kind {kind!r}")


def _parse_solver(doc, output_doc) -> tuple[SolverOptions, float, float]:
    if not isinstance(doc, dict):
        raise ConfigError("scenario needs a solver object")
    if "t_end" not in doc:
        raise ConfigError("solver needs a t_end")
    t0 = float(doc.get("t0", 0.0))
    t_end = float(doc["t_end"])
    if not t_end > t0:
        raise ConfigError(f"t_end {t_end} must exceed t0 {t0}")
    record_every = 1
    if isinstance(output_doc, dict):
        record_every = int(output_doc.get("record_every", 1))
        if record_every < 1:
            raise ConfigError("record_every must be a positive integer")
    opts = SolverOptions(
        method=doc.get("method", "rk4"),
        h=float(doc.get("h", 1e-3)),
        rtol=float(doc.get("rtol", 1e-8)),
        atol=float(doc.get("atol", 1e-10)),
        stiffness_safety=float(doc.get("stiffness_safety", 0.2)),
        min_step=float(doc.get("min_step", 1e-12)),
        record_every=record_every,
    )
    if opts.method not in ("rk4", "rkf45"):
        raise ConfigError(f"unknown solver method {opts.method!r}")
    return opts, t0, t_end


def _parse_initial(doc) -> InitialSpec:
    if doc is None:
        return InitialSpec()
    if not isinstance(doc, dict) or "kind" not in doc:
        raise ConfigError('initial spec needs a "kind"')
    kind = doc["kind"]
    if kind == "default":
        return InitialSpec()
    if kind == "constant":
        return InitialSpec(kind="constant", value=float(doc.get("value", 0.0)))
    if kind == "explicit":
        values = doc.get("values")
        if not isinstance(values, list) or not values:
            raise ConfigError('explicit initial spec needs a "values" list')
        return InitialSpec(kind="explicit", values=tuple(float(v) for v in values))
    if kind == "random":
        low = float(doc.get("low", -1.0))
        high = float(doc.get("high", 1.0))
        if not high > low:
            raise ConfigError(f"random initial box [{low}, {high}] is empty")
        return InitialSpec(kind="random", low=low, high=high)
    raise ConfigError(f"unknown initial kind {kind!r}")


def _parse_events(docs, t0: float, t_end: float) -> tuple:
    if not isinstance(docs, list):
        raise ConfigError("events must be a list")
    events = []
    last_time = t0
    for i, doc in enumerate(docs):
        if not isinstance(doc, dict):
            raise ConfigError(f"event {i} must be an object")
        try:
            time = float(doc["time"])
            action = doc["action"]
        except KeyError as exc:
            raise ConfigError(f"event {i} is missing {exc}") from exc
        if not (t0 < time < t_end):
            raise ConfigError(
                f"event {i} at t={time} is outside ({t0}, {t_end})"
            )
        if time <= last_time:
            raise ConfigError("event times must be strictly increasing")
        last_time = time
        if action == "leave":
            agent = doc.get("agent")
            if not isinstance(agent, int):
                raise ConfigError(f"leave event {i} needs an integer agent id")
            events.append(EventSpec(time=time, action="leave", agent=agent))
        elif action == "join":
            edges = doc.get("edges")
            if not isinstance(edges, list) or not edges:
                raise ConfigError(f"join event {i} needs a nonempty edge list")
            norm = []
            for e in edges:
                if isinstance(e, list):
                    if len(e) == 1:
                        norm.append((int(e[0]), 1.0))
                    elif len(e) == 2:
                        norm.append((int(e[0]), float(e[1])))
                    else:
                        raise ConfigError(
                            f"join edge {e!r} is not [partner] or [partner, weight]"
                        )
                else:
                    norm.append((int(e), 1.0))
            state = doc.get("state")
            params = doc.get("params", {})
            if not isinstance(params, dict):
                raise ConfigError(f"join event {i} params must be an object")
            events.append(EventSpec(
                time=time, action="join", edges=tuple(norm),
                params=params,
                state=tuple(float(v) for v in state) if state is not None else None,
            ))
        else:
            raise ConfigError(f"unknown event action {action!r}")
    return tuple(events)


def _parse_output(doc) -> OutputSpec:
    if doc is None:
        return OutputSpec()
    if not isinstance(doc, dict):
        raise ConfigError("output spec must be an object")
    directory = doc.get("directory")
    if directory is not None and not isinstance(directory, str):
        raise ConfigError("output directory must be a string")
    return OutputSpec(directory=directory,
                      record_every=int(doc.get("record_every", 1)))


# ---------------------------------------------------------------------------
# per-recipe roster bookkeeping for events

_PER_AGENT_KEYS = {
    "counting": (),
    "roster": ("id",),
    "median": ("value",),
    "least_squares": ("a_block", "b_block"),
    "dispatch": ("a", "b", "demand", "lower", "upper"),
    "lienard": ("f_coeffs", "g_coeffs"),
    "observer_full": ("g_block",),
    "observer_rank_deficient": ("g_block",),
}


def _initial_roster(recipe: str, params: dict, n: int) -> list[dict]:
    if recipe == "counting":
        return [{} for _ in range(n)]
    if recipe == "roster":
        ids = params.get("ids")
        if ids is None or len(ids) != n:
            raise ConfigError(f"roster recipe needs {n} ids")
        return [{"id": int(i)} for i in ids]
    if recipe == "median":
        values = params.get("values")
        if values is None or len(values) != n:
            raise ConfigError(f"median recipe needs {n} values")
        return [{"value": float(v)} for v in values]
    if recipe == "least_squares":
        a_blocks = params.get("a_blocks")
        b_blocks = params.get("b_blocks")
        if a_blocks is None or b_blocks is None or len(a_blocks) != n:
            raise ConfigError(f"least_squares recipe needs {n} block pairs")
        return [{"a_block": a, "b_block": b} for a, b in zip(a_blocks, b_blocks)]
    if recipe == "dispatch":
        try:
            lists = [params[key] for key in ("a", "b", "demand", "lower", "upper")]
        except KeyError as exc:
            raise ConfigError(f"dispatch recipe is missing {exc}") from exc
        if any(len(lst) != n for lst in lists):
            raise ConfigError(f"dispatch lists must have {n} entries")
        return [
            {"a": a, "b": b, "demand": d, "lower": lo, "upper": hi}
            for a, b, d, lo, hi in zip(*lists)
        ]
    if recipe == "lienard":
        f_coeffs = params.get("f_coeffs")
        g_coeffs = params.get("g_coeffs")
        if f_coeffs is None or g_coeffs is None or len(f_coeffs) != n:
            raise ConfigError(f"lienard recipe needs {n} coefficient pairs")
        return [{"f_coeffs": f, "g_coeffs": g} for f, g in zip(f_coeffs, g_coeffs)]
    g_blocks = params.get("g_blocks")
    if g_blocks is None or len(g_blocks) != n:
        raise ConfigError(f"observer recipe needs {n} output blocks")
    return [{"g_block": b} for b in g_blocks]


def _params_from_roster(recipe: str, roster: list[dict], base: dict) -> dict:
    if recipe == "counting":
        return {}
    if recipe == "roster":
        return {"ids": [e["id"] for e in roster]}
    if recipe == "median":
        return {"values": [e["value"] for e in roster]}
    if recipe == "least_squares":
        return {"a_blocks": [e["a_block"] for e in roster],
                "b_blocks": [e["b_block"] for e in roster]}
    if recipe == "dispatch":
        return {key: [e[key] for e in roster]
                for key in ("a", "b", "demand", "lower", "upper")}
    if recipe == "lienard":
        return {"f_coeffs": [e["f_coeffs"] for e in roster],
                "g_coeffs": [e["g_coeffs"] for e in roster],
                "a": base.get("a", 1.0)}
    out = {"g_blocks": [e["g_block"] for e in roster]}
    for key in ("s", "kappa", "x0_plant"):
        if key in base:
            out[key] = base[key]
    return out


def _entry_from_event(recipe: str, ev: EventSpec) -> dict:
    keys = _PER_AGENT_KEYS[recipe]
    missing = [key for key in keys if key not in ev.params]
    if missing:
        raise ConfigError(
            f"join event for recipe {recipe!r} is missing params {missing}"
        )
    return {key: ev.params[key] for key in keys}


# ---------------------------------------------------------------------------
# running


@dataclass
class Segment:
    """One integrated stretch between roster changes."""

    trajectory: Trajectory
    sids: tuple  # stable agent id per roster position
    agent_slices: list
    has_plant: bool
    funnel: FunnelSpec | None
    graph: Graph


@dataclass
class RunResult:
    scenario: Scenario
    segments: list
    warnings: list
    summary: dict
    out_dir: Path | None
    files: dict


def run_scenario(sc: Scenario, out_dir=None) -> RunResult:
    """Execute a scenario; write CSV/JSON outputs when out_dir is given."""
    rng = np.random.default_rng(sc.seed)
    roster = _initial_roster(sc.recipe, sc.params, sc.graph.n_agents)
    sids = list(range(1, sc.graph.n_agents + 1))
    next_sid = sc.graph.n_agents + 1
    edges_sid = {(min(i, j), max(i, j)): w for i, j, w in sc.graph.edges}
    graph = sc.graph
    funnel_current = sc.coupling.funnel
    warnings: list[str] = []
    events_applied: list[dict] = []

    bundle = _build_bundle(sc, roster, graph, funnel_current)
    state = _initial_state(sc, bundle, rng)

    segments: list[Segment] = []
    t_cursor = sc.t0
    schedule = list(sc.events) + [None]
    for ev in schedule:
        t_next = ev.time if ev is not None else sc.t_end
        traj = integrate(bundle.system, state, t_cursor, t_next, sc.solver)
        segments.append(Segment(
            trajectory=traj,
            sids=tuple(sids),
            agent_slices=list(bundle.system.agent_slices),
            has_plant=len(bundle.system.agent_slices) > len(sids),
            funnel=funnel_current,
            graph=graph,
        ))
        state = np.array(traj.states[-1], copy=True)
        t_cursor = t_next
        if ev is None:
            break

        old_bundle = bundle
        old_sids = list(sids)
        if ev.action == "leave":
            if ev.agent not in sids:
                raise ConfigError(
                    f"leave event at t={ev.time}: no agent with id {ev.agent}"
                )
            pos = sids.index(ev.agent)
            if sc.recipe == "counting" and pos == 0 and len(sids) > 1:
                warnings.append(
                    f"counting anchor (agent {ev.agent}) left at t={ev.time:g}; "
                    f"agent {sids[1]} now plays the anchor role"
                )
            roster.pop(pos)
            sids.pop(pos)
            edges_sid = {
                pair: w for pair, w in edges_sid.items() if ev.agent not in pair
            }
            events_applied.append({"time": ev.time, "action": "leave",
                                   "agent": ev.agent})
            joiner_sid = None
        else:
            entry = _entry_from_event(sc.recipe, ev)
            joiner_sid = next_sid
            next_sid += 1
            for partner, w in ev.edges:
                if partner not in sids:
                    raise ConfigError(
                        f"join event at t={ev.time}: unknown partner {partner}"
                    )
                edges_sid[(min(partner, joiner_sid), max(partner, joiner_sid))] = w
            roster.append(entry)
            sids.append(joiner_sid)
            events_applied.append({"time": ev.time, "action": "join",
                                   "agent": joiner_sid})

        graph = _graph_from_sids(sids, edges_sid)  # DisconnectedGraph aborts
        bundle = _build_bundle(sc, roster, graph, funnel_current)
        state = _transfer_state(old_bundle, old_sids, state, bundle, sids,
                                joiner_sid, ev)
        if funnel_current is not None:
            funnel_current, bundle, rebuilt = _funnel_handshake(
                sc, roster, graph, funnel_current, bundle, ev.time, state
            )
            if rebuilt:
                warnings.append(
                    f"funnel reopened at t={ev.time:g} to admit the new agent"
                )

    summary = _summarize(sc, segments, bundle, state, warnings, events_applied)
    result = RunResult(scenario=sc, segments=segments, warnings=warnings,
                       summary=summary, out_dir=None, files={})
    if out_dir is not None:
        _write_run(result, Path(out_dir))
    return result


def _build_bundle(sc: Scenario, roster, graph: Graph,
                  funnel: FunnelSpec | None) -> ScenarioBundle:
    params = _params_from_roster(sc.recipe, roster, sc.params)
    coupling = (replace(sc.coupling, funnel=funnel)
                if funnel is not None else sc.coupling)
    return RECIPES[sc.recipe](params, graph, coupling)


def _initial_state(sc: Scenario, bundle: ScenarioBundle, rng) -> np.ndarray:
    dim = bundle.system.total_dim
    spec = sc.initial
    if spec.kind == "default":
        if "x0" in bundle.extras:
            return np.array(bundle.extras["x0"], dtype=float)
        return np.zeros(dim)
    if spec.kind == "constant":
        return np.full(dim, spec.value)
    if spec.kind == "explicit":
        values = np.asarray(spec.values, dtype=float)
        if values.shape != (dim,):
            raise ConfigError(
                f"explicit initial state has {values.shape[0]} entries, "
                f"system needs {dim}"
            )
        return values
    return rng.uniform(spec.low, spec.high, size=dim)


def _graph_from_sids(sids: list, edges_sid: dict) -> Graph:
    pos = {sid: i + 1 for i, sid in enumerate(sids)}
    edge_list = [
        (pos[a], pos[b], w) for (a, b), w in sorted(edges_sid.items())
    ]
    return build_graph(len(sids), edge_list)


def _transfer_state(old_bundle, old_sids, old_state, new_bundle, new_sids,
                    joiner_sid, ev: EventSpec) -> np.ndarray:
    """Copy surviving agent blocks (and any plant tail) into the new layout."""
    old_slices = old_bundle.system.agent_slices
    new_slices = new_bundle.system.agent_slices
    new_state = np.zeros(new_bundle.system.total_dim)
    for pos, sid in enumerate(new_sids):
        if sid == joiner_sid:
            if ev.state is not None:
                block = np.asarray(ev.state, dtype=float)
                width = new_slices[pos].stop - new_slices[pos].start
                if block.shape != (width,):
                    raise ConfigError(
                        f"joiner state has {block.shape[0]} entries, "
                        f"agent block needs {width}"
                    )
                new_state[new_slices[pos]] = block
            continue
        old_pos = old_sids.index(sid)
        src = old_state[old_slices[old_pos]]
        dst = new_slices[pos]
        if src.shape[0] != dst.stop - dst.start:
            raise DimensionMismatch(
                f"agent {sid} changed block size across the event"
            )
        new_state[dst] = src
    # shared tail blocks (the observer plant) carry over unchanged
    n_old, n_new = len(old_sids), len(new_sids)
    if len(old_slices) > n_old and len(new_slices) > n_new:
        src = old_state[old_slices[n_old]]
        new_state[new_slices[n_new]] = src
    return new_state


def _funnel_handshake(sc, roster, graph, spec: FunnelSpec, bundle, t_ev,
                      state):
    """Reopen the funnel if the post-event state crowds its boundary.

    A joiner can land anywhere, so when the worst constraint sits at 90%
    of the envelope or beyond, the envelope restarts from twice the
    worst disagreement, decaying toward the same floor as before.
    """
    ratios = bundle.system.funnel_ratios
    if ratios is None:
        return spec, bundle, False
    r = np.asarray(ratios(t_ev, state), dtype=float)
    r_max = float(r.max()) if r.size else 0.0
    if r_max < 0.9:
        return spec, bundle, False
    psi_now = spec.psi(t_ev)
    nu_max = r_max * psi_now
    psi_bar = max(2.0 * nu_max, psi_now, spec.eta)
    shifted = spec.shifted(psi_bar, t_ev)
    return shifted, _build_bundle(sc, roster, graph, shifted), True


def _summarize(sc: Scenario, segments, bundle, final_state, warnings,
               events_applied) -> dict:
    last = segments[-1]
    terminal = {}
    decoded = {}
    for pos, sid in enumerate(last.sids):
        block = final_state[last.agent_slices[pos]]
        terminal[str(sid)] = [float(v) for v in block]
        if bundle.decoder is not None and block.shape[0] == 1:
            val = bundle.decoder(float(block[0]))
            decoded[str(sid)] = (list(val) if isinstance(val, tuple) else val)
    if last.has_plant:
        tail = final_state[last.agent_slices[len(last.sids)]]
        terminal["0"] = [float(v) for v in tail]

    oracle_error = None
    if bundle.terminal_error is not None:
        oracle_error = float(bundle.terminal_error(final_state))
    sync_error = None
    if last.trajectory.disagreement is not None:
        sync_error = float(last.trajectory.disagreement[-1])

    steps = sum(seg.trajectory.metadata.get("steps", 0) for seg in segments)
    rejected = sum(seg.trajectory.metadata.get("rejected", 0) for seg in segments)
    summary = {
        "version": SCENARIO_VERSION,
        "name": sc.name,
        "recipe": sc.recipe,
        "seed": sc.seed,
        "t0": sc.t0,
        "t_end": sc.t_end,
        "agents_initial": list(range(1, sc.graph.n_agents + 1)),
        "agents_final": list(last.sids),
        "events_applied": events_applied,
        "warnings": list(warnings),
        "terminal_state": terminal,
        "decoded": decoded,
        "oracle_error": oracle_error,
        "sync_error": sync_error,
        "solver": {
            "method": sc.solver.method,
            "segments": len(segments),
            "steps": int(steps),
            "rejected": int(rejected),
        },
    }
    return summary


# ---------------------------------------------------------------------------
# file output


def _format_float(v: float) -> str:
    return format(float(v), ".17g")


def _write_run(result: RunResult, out_dir: Path) -> None:
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create output directory {out_dir}: {exc}") from exc
    result.out_dir = out_dir
    csv_path = out_dir / "trajectory.csv"
    lines = ["t,agent,component,value"]
    for seg in result.segments:
        times = seg.trajectory.times
        states = seg.trajectory.states
        n_agents = len(seg.sids)
        for ti in range(times.shape[0]):
            t_str = _format_float(times[ti])
            row = states[ti]
            for pos in range(n_agents):
                block = row[seg.agent_slices[pos]]
                for comp in range(block.shape[0]):
                    lines.append(
                        f"{t_str},{seg.sids[pos]},{comp},{_format_float(block[comp])}"
                    )
            if seg.has_plant:
                block = row[seg.agent_slices[n_agents]]
                for comp in range(block.shape[0]):
                    lines.append(f"{t_str},0,{comp},{_format_float(block[comp])}")
    _write_text(csv_path, "\n".join(lines) + "\n")
    result.files["trajectory"] = csv_path

    summary_path = out_dir / "summary.json"
    _write_text(summary_path,
                json.dumps(result.summary, indent=2, sort_keys=True) + "\n")
    result.files["summary"] = summary_path

    if result.scenario.coupling.kind in ("edge_funnel", "node_funnel"):
        funnel_path = out_dir / "funnel.csv"
        _write_text(funnel_path, _funnel_csv(result))
        result.files["funnel"] = funnel_path


def _write_text(path: Path, text: str) -> None:
    try:
        path.write_text(text)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def _funnel_csv(result: RunResult) -> str:
    """Signed disagreement per constraint with the envelope value."""
    kind = result.scenario.coupling.kind
    lines = ["t,constraint,nu,psi"]
    for seg in result.segments:
        spec = seg.funnel
        times = seg.trajectory.times
        states = seg.trajectory.states
        n = len(seg.sids)
        if kind == "edge_funnel":
            pairs = [(i - 1, j - 1) for i, j, _ in seg.graph.edges]
            for ti in range(times.shape[0]):
                t = float(times[ti])
                psi = spec.psi(t)
                row = states[ti]
                for i, j in pairs:
                    nu = float(row[j] - row[i])
                    lines.append(
                        f"{_format_float(t)},{seg.sids[i]}-{seg.sids[j]},"
                        f"{_format_float(nu)},{_format_float(psi)}"
                    )
        else:
            lap = seg.graph.laplacian()
            for ti in range(times.shape[0]):
                t = float(times[ti])
                psi = spec.psi(t)
                nu = -lap @ states[ti][:n]
                for i in range(n):
                    lines.append(
                        f"{_format_float(t)},n{seg.sids[i]},"
                        f"{_format_float(float(nu[i]))},{_format_float(psi)}"
                    )
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# gain sweep


def sweep_gain(sc: Scenario, k_values) -> list[tuple[float, float, float]]:
    """One independent run per gain: (k, oracle error, sync error) rows."""
    if sc.coupling.kind != "state":
        raise ConfigError("gain sweeps need state coupling")
    rows = []
    for k in k_values:
        k = float(k)
        if k <= 0:
            raise ConfigError(f"sweep gain must be positive, got {k}")
        sc_k = replace(sc, coupling=CouplingSpec("state", k=k))
        result = run_scenario(sc_k)
        oracle_error = result.summary["oracle_error"]
        if oracle_error is None:
            raise ConfigError(
                f"recipe {sc.recipe!r} has no oracle to sweep against"
            )
        rows.append((k, float(oracle_error), float(result.summary["sync_error"])))
    return rows


# ---------------------------------------------------------------------------
# pacemaker experiment


@dataclass(frozen=True)
class PacemakerConfig:
    """Ensemble of randomly perturbed oscillators on an all-to-all graph.

    Each trial draws six standard-normal disorder values per agent and
    perturbs a shared cubic-damping oscillator family with them; the
    population is coupled through its output and the collective rhythm
    is summarized by its post-transient peaks.
    """

    n_agents: int = 10
    trials: int = 10
    seed: int = 0
    k: float = 50.0
    a: float = 1.0
    disorder_scale: float = 1.0
    t_end: float = 60.0
    transient: float = 15.0
    stiffness_safety: float = 2.0
    record_every: int = 25

    def __post_init__(self):
        if self.n_agents < 1 or self.trials < 1:
            raise ConfigError("pacemaker needs at least one agent and one trial")
        if self.t_end <= self.transient:
            raise ConfigError("t_end must exceed the transient")


@dataclass(frozen=True)
class PacemakerTrial:
    index: int
    ok: bool
    n_peaks: int
    amp_mean: float
    period_mean: float
    note: str = ""


@dataclass
class PacemakerResult:
    config: PacemakerConfig
    trials: list
    spread_amplitude: float
    spread_period: float
    times: np.ndarray
    waveforms: np.ndarray  # (T, trials) mean output per trial


def disorder_draws(n_agents: int, trial: int, seed: int,
                   scale: float = 1.0) -> np.ndarray:
    """The (n_agents, 6) disorder block for one trial, deterministically."""
    rng = np.random.default_rng([seed, trial])
    return scale * rng.standard_normal((n_agents, 6))


def _pacemaker_coeffs(delta: np.ndarray):
    """Per-agent polynomial coefficients from a disorder block."""
    n = delta.shape[0]
    f = np.zeros((n, 4))
    f[:, 0] = -(0.551 + delta[:, 3])
    f[:, 1] = -(2.465 + delta[:, 2])
    f[:, 2] = 1.45 + delta[:, 1]
    f[:, 3] = 0.1 * delta[:, 0]
    g = np.zeros((n, 3))
    g[:, 1] = 1.0 + delta[:, 4]
    g[:, 2] = 0.1 * delta[:, 5]
    return f, g


def _polyval_batched(coeffs: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Horner evaluation with per-agent (and optionally per-trial) coeffs.

    coeffs is (N, D) or (N, D, B); x is (N, 1) or (N, 1, B).
    """
    out = np.zeros_like(x)
    for d in range(coeffs.shape[1] - 1, -1, -1):
        if coeffs.ndim == 3:
            c = coeffs[:, d, :][:, None, :]
        else:
            c = coeffs[:, d].reshape((coeffs.shape[0],) + (1,) * (x.ndim - 1))
        out = out * x + c
    return out


def _pacemaker_system(f_coeffs, g_coeffs, a: float, graph: Graph,
                      k: float) -> NetworkSystem:
    n = graph.n_agents

    def z_eval(t, z, y):
        return y - a * z

    def y_eval(t, y, z):
        fz = _polyval_batched(f_coeffs, z)
        gz = _polyval_batched(g_coeffs, z)
        return a * y - a * a * z - fz * (y - a * z) - gz

    z_fam = CoupledFieldFamily(n_agents=n, dim=1, eval_stacked=z_eval,
                               label="pacemaker-z")
    y_fam = CoupledFieldFamily(n_agents=n, dim=1, eval_stacked=y_eval,
                               label="pacemaker-y")
    return assemble_output_coupled(z_fam, y_fam, np.array([[1.0]]), graph, k)


def _find_peaks(times: np.ndarray, wave: np.ndarray, transient: float):
    """Interior maxima after the transient, refined by parabolic fit."""
    peak_times = []
    peak_amps = []
    for i in range(1, wave.shape[0] - 1):
        if times[i] <= transient:
            continue
        a, b, c = wave[i - 1], wave[i], wave[i + 1]
        if not (b >= a and b > c):
            continue
        denom = a - 2.0 * b + c
        if denom >= -1e-300:
            offset = 0.0
        else:
            offset = 0.5 * (a - c) / denom
        dt = times[i + 1] - times[i]
        peak_times.append(float(times[i] + offset * dt))
        peak_amps.append(float(b - 0.25 * (a - c) * offset))
    return np.array(peak_times), np.array(peak_amps)


def pacemaker_experiment(cfg: PacemakerConfig) -> PacemakerResult:
    """Run the ensemble and summarize rhythm spread across trials.

    All trials integrate in one batched pass; a non-finite blowup falls
    back to trial-by-trial integration so one bad draw is reported
    without sinking the rest.
    """
    graph = generate_graph("complete", cfg.n_agents)
    f_all = np.zeros((cfg.n_agents, 4, cfg.trials))
    g_all = np.zeros((cfg.n_agents, 3, cfg.trials))
    for trial in range(cfg.trials):
        delta = disorder_draws(cfg.n_agents, trial, cfg.seed, cfg.disorder_scale)
        f_all[:, :, trial], g_all[:, :, trial] = _pacemaker_coeffs(delta)

    opts = SolverOptions(method="rk4", h=1e-3,
                         stiffness_safety=cfg.stiffness_safety,
                         record_every=cfg.record_every)
    x0 = np.ones((2 * cfg.n_agents, cfg.trials))

    failed: dict[int, str] = {}
    sys_all = _pacemaker_system(f_all, g_all, cfg.a, graph, cfg.k)
    # blowups surface as NonFiniteState by design; silence the overflow
    # chatter numpy emits on the way there
    with np.errstate(over="ignore", invalid="ignore"):
        try:
            traj = integrate(sys_all, x0, 0.0, cfg.t_end, opts)
            times = traj.times
            y_idx = sys_all.sync_indices.reshape(-1)
            waves = traj.states[:, y_idx, :].mean(axis=1)  # (T, trials)
        except NonFiniteState:
            waves_list = []
            times = None
            for trial in range(cfg.trials):
                sys_one = _pacemaker_system(f_all[:, :, trial],
                                            g_all[:, :, trial],
                                            cfg.a, graph, cfg.k)
                try:
                    tr = integrate(sys_one, np.ones(2 * cfg.n_agents), 0.0,
                                   cfg.t_end, opts)
                except NonFiniteState as exc:
                    failed[trial] = str(exc)
                    waves_list.append(None)
                    continue
                times = tr.times
                y_idx = sys_one.sync_indices.reshape(-1)
                waves_list.append(tr.states[:, y_idx].mean(axis=1))
            if times is None:
                raise NonFiniteState("every pacemaker trial diverged")
            t_len = times.shape[0]
            waves = np.full((t_len, cfg.trials), np.nan)
            for trial, w in enumerate(waves_list):
                if w is not None:
                    waves[:, trial] = w

    trials = []
    amps = []
    periods = []
    for trial in range(cfg.trials):
        if trial in failed:
            trials.append(PacemakerTrial(
                index=trial, ok=False, n_peaks=0,
                amp_mean=math.nan, period_mean=math.nan,
                note=f"diverged: {failed[trial]}",
            ))
            continue
        p_times, p_amps = _find_peaks(times, waves[:, trial], cfg.transient)
        if p_times.shape[0] < 2:
            trials.append(PacemakerTrial(
                index=trial, ok=False, n_peaks=int(p_times.shape[0]),
                amp_mean=math.nan, period_mean=math.nan,
                note="fewer than two post-transient peaks",
            ))
            continue
        amp_mean = float(p_amps.mean())
        period_mean = float(np.diff(p_times).mean())
        amps.append(amp_mean)
        periods.append(period_mean)
        trials.append(PacemakerTrial(
            index=trial, ok=True, n_peaks=int(p_times.shape[0]),
            amp_mean=amp_mean, period_mean=period_mean,
        ))

    # std is shift-invariant; anchoring at the first trial keeps identical
    # trials at exactly zero instead of mean-rounding noise
    spread_amp = (float(np.std(np.asarray(amps) - amps[0]))
                  if amps else math.nan)
    spread_period = (float(np.std(np.asarray(periods) - periods[0]))
                     if periods else math.nan)
    return PacemakerResult(
        config=cfg, trials=trials,
        spread_amplitude=spread_amp, spread_period=spread_period,
        times=times, waveforms=waves,
    )


def write_experiment(result: PacemakerResult, out_dir) -> dict:
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create output directory {out_dir}: {exc}") from exc
    cfg = result.config
    doc = {
        "experiment": "pacemaker",
        "n_agents": cfg.n_agents,
        "trials": cfg.trials,
        "seed": cfg.seed,
        "k": cfg.k,
        "disorder_scale": cfg.disorder_scale,
        "t_end": cfg.t_end,
        "transient": cfg.transient,
        "spread_amplitude": result.spread_amplitude,
        "spread_period": result.spread_period,
        "trial_stats": [
            {
                "index": tr.index,
                "ok": tr.ok,
                "n_peaks": tr.n_peaks,
                "amp_mean": None if math.isnan(tr.amp_mean) else tr.amp_mean,
                "period_mean": (None if math.isnan(tr.period_mean)
                                else tr.period_mean),
                "note": tr.note,
            }
            for tr in result.trials
        ],
    }
    files = {}
    exp_path = out_dir / "experiment.json"
    _write_text(exp_path, json.dumps(doc, indent=2, sort_keys=True) + "\n")
    files["experiment"] = exp_path

    lines = ["trial,t,value"]
    for trial in range(result.waveforms.shape[1]):
        col = result.waveforms[:, trial]
        for ti in range(result.times.shape[0]):
            v = col[ti]
            if math.isnan(v):
                continue
            lines.append(
                f"{trial},{_format_float(result.times[ti])},{_format_float(v)}"
            )
    wave_path = out_dir / "waveforms.csv"
    _write_text(wave_path, "\n".join(lines) + "\n")
    files["waveforms"] = wave_path
    return files


# ---------------------------------------------------------------------------
# plots


def emit_plots(run_dir) -> list:
    """Render whatever a run directory holds into PNGs next to it."""
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise IoError(f"{run_dir} is not a directory")
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    written = []
    traj_csv = run_dir / "trajectory.csv"
    if traj_csv.exists():
        series = _read_long_csv(traj_csv, key_cols=2)
        fig, ax = plt.subplots(figsize=(8, 4.5))
        for (agent, comp), (ts, vs) in sorted(series.items()):
            ax.plot(ts, vs, lw=1.0, label=f"agent {agent}[{comp}]")
        ax.set_xlabel("t")
        ax.set_ylabel("state")
        if len(series) <= 12:
            ax.legend(fontsize=8)
        ax.set_title(run_dir.name)
        path = run_dir / "timeseries.png"
        _save_fig(fig, path, plt)
        written.append(path)

    funnel_csv = run_dir / "funnel.csv"
    if funnel_csv.exists():
        rows = _read_funnel_csv(funnel_csv)
        if rows:
            fig, ax = plt.subplots(figsize=(8, 4.5))
            for label, (ts, nus, _) in sorted(rows.items()):
                ax.plot(ts, nus, lw=1.0, label=label)
            ts, _, psis = rows[next(iter(rows))]
            ax.plot(ts, psis, "k--", lw=1.5, label="envelope")
            ax.plot(ts, [-p for p in psis], "k--", lw=1.5)
            ax.set_xlabel("t")
            ax.set_ylabel("disagreement")
            if len(rows) <= 12:
                ax.legend(fontsize=8)
            ax.set_title("funnel envelope")
            path = run_dir / "funnel.png"
            _save_fig(fig, path, plt)
            written.append(path)

    wave_csv = run_dir / "waveforms.csv"
    if wave_csv.exists():
        series = _read_long_csv(wave_csv, key_cols=1)
        fig, ax = plt.subplots(figsize=(8, 4.5))
        for (trial,), (ts, vs) in sorted(series.items())[:3]:
            ax.plot(ts, vs, lw=1.0, label=f"trial {trial}")
        ax.set_xlabel("t")
        ax.set_ylabel("mean output")
        ax.legend(fontsize=8)
        ax.set_title("pacemaker trials")
        path = run_dir / "pacemaker.png"
        _save_fig(fig, path, plt)
        written.append(path)

    if not written:
        raise IoError(f"nothing to plot in {run_dir}")
    return written


def _save_fig(fig, path: Path, plt) -> None:
    try:
        fig.savefig(path, dpi=110)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
    finally:
        plt.close(fig)


def _read_long_csv(path: Path, key_cols: int):
    """Group a long-form CSV by its leading key columns (after t)."""
    series: dict = {}
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    for line in lines[1:]:
        parts = line.split(",")
        if path.name == "waveforms.csv":
            trial, t, v = parts
            key = (trial,)
            t, v = float(t), float(v)
        else:
            t = float(parts[0])
            key = tuple(parts[1:1 + key_cols])
            v = float(parts[1 + key_cols])
        ts, vs = series.setdefault(key, ([], []))
        ts.append(t)
        vs.append(v)
    return series


def _read_funnel_csv(path: Path):
    rows: dict = {}
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    for line in lines[1:]:
        t, label, nu, psi = line.split(",")
        ts, nus, psis = rows.setdefault(label, ([], [], []))
        ts.append(float(t))
        nus.append(float(nu))
        psis.append(float(psi))
    return rows


# ---------------------------------------------------------------------------
# verification


def verify_scenario(sc: Scenario) -> list:
    """Fast internal consistency checks for the scenario's recipe.

    Each check returns (name, passed, detail); nothing here integrates
    for long times, so the suite stays quick enough for CI and the
    command line.
    """
    checks = []
    rng = np.random.default_rng(12345)
    roster = _initial_roster(sc.recipe, sc.params, sc.graph.n_agents)
    bundle = _build_bundle(sc, roster, sc.graph, sc.coupling.funnel)
    checks.append(("build", True, f"{sc.recipe} on {sc.graph.n_agents} agents"))

    if bundle.blended is not None:
        dim = bundle.blended.reduced_field.dim
        finite = True
        for _ in range(20):
            s = rng.normal(scale=2.0, size=dim)
            val = np.asarray(bundle.blended.reduced_field.eval(0.0, s))
            if not np.all(np.isfinite(val)):
                finite = False
                break
        checks.append(("blended_finite", finite,
                       f"20 samples in dimension {dim}"))

    if sc.recipe in ("counting", "roster"):
        target = float(bundle.oracle)
        residual = abs(
            float(bundle.blended.reduced_field.eval(0.0, np.array([target]))[0])
        )
        checks.append(("fixed_point", residual < 1e-9,
                       f"|average field at {target:g}| = {residual:.2e}"))
    elif sc.recipe == "least_squares":
        res = np.asarray(
            bundle.blended.reduced_field.eval(0.0, np.asarray(bundle.oracle))
        )
        norm = float(np.linalg.norm(res))
        checks.append(("normal_equations", norm < 1e-9,
                       f"|average field at minimizer| = {norm:.2e}"))
    elif sc.recipe == "median":
        lo, hi = bundle.oracle.lo, bundle.oracle.hi
        left = float(bundle.blended.reduced_field.eval(0.0, np.array([lo - 1.0]))[0])
        right = float(bundle.blended.reduced_field.eval(0.0, np.array([hi + 1.0]))[0])
        checks.append(("median_bracket", left > 0.0 > right,
                       f"field {left:+.3f} left, {right:+.3f} right"))
    elif sc.recipe == "dispatch":
        from .recipes import theta

        problem = bundle.extras["problem"]
        sol = bundle.oracle
        balance = abs(float(sol.lambda_star.sum()) - float(sum(problem.demands)))
        stationary = 0.0
        for i, (j, lo, hi) in enumerate(
            zip(problem.costs, problem.lower, problem.upper)
        ):
            lam = float(sol.lambda_star[i])
            if lo + 1e-7 < lam < hi - 1e-7:
                stationary = max(stationary,
                                 abs(j.derivative(lam) - sol.s_star))
        checks.append(("kkt_balance", balance < 1e-9, f"residual {balance:.2e}"))
        checks.append(("kkt_stationarity", stationary < 1e-8,
                       f"worst interior defect {stationary:.2e}"))
    elif sc.recipe == "lienard":
        cfg = bundle.extras["config"]
        z_fam, y_fam = bundle.fields
        worst = 0.0
        P = np.polynomial.polynomial
        for _ in range(20):
            z = rng.normal(size=(len(cfg.f_coeffs), 1))
            zdot = rng.normal(size=z.shape)
            y = cfg.a * z + zdot
            dz = z_fam.eval_stacked(0.0, z, y)
            dy = y_fam.eval_stacked(0.0, y, z)
            zddot = dy - cfg.a * dz
            for i in range(z.shape[0]):
                f = P.polyval(z[i, 0], cfg.f_coeffs[i])
                gz = P.polyval(z[i, 0], cfg.g_coeffs[i])
                worst = max(worst, abs(zddot[i, 0] + f * zdot[i, 0] + gz))
        checks.append(("oscillator_realization", worst < 1e-9,
                       f"worst identity defect {worst:.2e}"))
    elif sc.recipe == "observer_full":
        from .blended import contraction_estimate
        from .netsim import VectorField
        from .recipes import (
            _blended_error_matrix,
            _triangular_metric,
        )

        err_sys = bundle.extras["error_system"]
        splits = err_sys.extra["splits"]
        kappa = err_sys.extra["kappa"]
        d_blocks = [sp.s_bar - sp.u_bar @ sp.g_bar for sp in splits]
        a_stacked = err_sys.extra["a_stacked"]
        j = _blended_error_matrix(d_blocks, a_stacked,
                                  bundle.extras["problem"].s_matrix,
                                  kappa, len(splits))
        r_total = sum(b.shape[0] for b in d_blocks)
        metric = _triangular_metric(j, r_total)
        ok = False
        detail = "no certifying metric"
        if metric is not None:
            fld = VectorField(dim=j.shape[0], eval=lambda t, x: j @ x)
            samples = [(0.0, rng.uniform(-10, 10, size=j.shape[0]))
                       for _ in range(5)]
            est = contraction_estimate(fld, samples, metric=metric)
            ok = est < 0
            detail = f"contraction estimate {est:.3f} at kappa {kappa:g}"
        checks.append(("error_model_contracts", ok, detail))
    elif sc.recipe == "observer_rank_deficient":
        dec = bundle.extras["decomposition"]
        checks.append(("no_shared_blind_directions", dec.p_s == 0,
                       f"shared dimension {dec.p_s}"))

    return checks
