"""Undirected weighted graphs and their spectral data.

Every coupling analysis in this package starts from the same objects: the
weighted Laplacian L = D - A, its eigenvalues, an orthonormal basis of the
subspace orthogonal to the all-ones vector, and the hop diameter.  This
module builds them once, deterministically, and hands them out as frozen
dataclasses.

Conventions
-----------
* Agent indices in edge lists are 1-based, matching scenario config files.
* Spectra always use the weighted Laplacian; the diameter always counts
  hops on the unweighted skeleton.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import DisconnectedGraph, InvalidEdge

__all__ = [
    "Graph",
    "SpectralData",
    "build_graph",
    "generate_graph",
    "spectral",
    "sync_error_bound_edge",
    "sync_error_bound_node",
]

_WEIGHT_MATCH_TOL = 1e-12


@dataclass(frozen=True)
class Graph:
    """Undirected weighted connected graph on agents 1..n_agents.

    ``edges`` stores each undirected edge once as (i, j, weight) with
    i < j, 1-based.  The adjacency matrix and neighbor lists are derived
    on construction and cached.
    """

    n_agents: int
    edges: tuple[tuple[int, int, float], ...]
    adjacency: np.ndarray = field(repr=False)
    neighbors: tuple[tuple[int, ...], ...] = field(repr=False)

    def laplacian(self) -> np.ndarray:
        """Weighted Laplacian L = D - A as a dense array."""
        degrees = self.adjacency.sum(axis=1)
        return np.diag(degrees) - self.adjacency

    def degree_max(self) -> float:
        return float(self.adjacency.sum(axis=1).max())


@dataclass(frozen=True)
class SpectralData:
    """Spectral objects of a connected graph.

    Attributes
    ----------
    laplacian : (N, N) weighted Laplacian.
    eigenvalues : all Laplacian eigenvalues, ascending; the first is 0.
    fiedler_value : second-smallest eigenvalue, positive for a connected
        graph.
    r_matrix : (N, N-1) orthonormal eigenvectors orthogonal to the
        all-ones vector, so that R^T L R = diag(eigenvalues[1:]).
    lambda_diag : (N-1, N-1) diagonal matrix of the nonzero eigenvalues.
    diameter : hop diameter of the unweighted skeleton.
    """

    laplacian: np.ndarray
    eigenvalues: np.ndarray
    fiedler_value: float
    r_matrix: np.ndarray
    lambda_diag: np.ndarray
    diameter: int

    @property
    def lambda_max(self) -> float:
        return float(self.eigenvalues[-1])


def build_graph(n: int, edge_list) -> Graph:
    """Construct a connected undirected graph from a 1-based edge list.

    Parameters
    ----------
    n : number of agents, positive.
    edge_list : iterable of (i, j, weight) or (i, j) with 1 <= i, j <= n,
        i != j, weight > 0 (default 1).  A pair may appear multiple times
        only with a consistent weight; both orientations count as the
        same edge.

    Raises
    ------
    InvalidEdge : indices out of range, self loop, nonpositive weight, or
        duplicate edge with conflicting weight.
    DisconnectedGraph : the resulting graph is not connected.
    """
    if n < 1:
        raise InvalidEdge(f"n must be a positive integer, got {n}")
    weights: dict[tuple[int, int], float] = {}
    for entry in edge_list:
        try:
            if len(entry) == 2:
                (i, j), w = entry, 1.0
            else:
                i, j, w = entry
        except (TypeError, ValueError) as exc:
            raise InvalidEdge(f"edge entry {entry!r} is not (i, j[, weight])") from exc
        i, j = int(i), int(j)
        w = float(w)
        if not (1 <= i <= n and 1 <= j <= n):
            raise InvalidEdge(f"edge ({i},{j}) out of range 1..{n}")
        if i == j:
            raise InvalidEdge(f"self loop at agent {i}")
        if w <= 0:
            raise InvalidEdge(f"edge ({i},{j}) has nonpositive weight {w}")
        key = (min(i, j), max(i, j))
        if key in weights and abs(weights[key] - w) > _WEIGHT_MATCH_TOL:
            raise InvalidEdge(
                f"duplicate edge {key} with conflicting weights "
                f"{weights[key]} and {w}"
            )
        weights[key] = w

    adjacency = np.zeros((n, n))
    for (i, j), w in weights.items():
        adjacency[i - 1, j - 1] = w
        adjacency[j - 1, i - 1] = w

    neighbor_lists = tuple(
        tuple(int(j) + 1 for j in np.nonzero(adjacency[i])[0]) for i in range(n)
    )
    if not _is_connected(adjacency):
        raise DisconnectedGraph(f"graph on {n} agents with {len(weights)} edges is not connected")
    edges = tuple(sorted((i, j, w) for (i, j), w in weights.items()))
    return Graph(n_agents=n, edges=edges, adjacency=adjacency, neighbors=neighbor_lists)


def generate_graph(kind: str, n: int, seed: int | None = None, weight: float = 1.0) -> Graph:
    """Build one of the named topologies: complete, ring, path, random_connected.

    ``random_connected`` draws a uniform spanning-tree-plus-extras graph:
    each node beyond the first attaches to a uniformly random earlier
    node, then every remaining pair is added independently with
    probability 0.3.  Deterministic for a given seed.
    """
    if n < 1:
        raise InvalidEdge(f"n must be positive, got {n}")
    if kind == "complete":
        edge_list = [(i, j, weight) for i in range(1, n + 1) for j in range(i + 1, n + 1)]
    elif kind == "ring":
        if n < 3:
            raise InvalidEdge("ring needs at least 3 agents")
        edge_list = [(i, i + 1, weight) for i in range(1, n)] + [(n, 1, weight)]
    elif kind == "path":
        if n < 2:
            raise InvalidEdge("path needs at least 2 agents")
        edge_list = [(i, i + 1, weight) for i in range(1, n)]
    elif kind == "random_connected":
        if seed is None:
            raise InvalidEdge("random_connected requires a seed")
        rng = np.random.default_rng(seed)
        present = {(min(i, j), max(i, j)) for i, j in
                   ((v, int(rng.integers(1, v))) for v in range(2, n + 1))}
        for i in range(1, n + 1):
            for j in range(i + 1, n + 1):
                if (i, j) not in present and rng.random() < 0.3:
                    present.add((i, j))
        edge_list = [(i, j, weight) for i, j in sorted(present)]
    else:
        raise InvalidEdge(f"unknown generator {kind!r}")
    return build_graph(n, edge_list)


def spectral(g: Graph) -> SpectralData:
    """Eigendecomposition of the weighted Laplacian plus the hop diameter.

    The returned ``r_matrix`` consists of the orthonormal eigenvectors for
    the nonzero eigenvalues, each normalized so its first component above
    the sign tolerance is positive.  That makes R^T L R exactly the
    diagonal of the nonzero spectrum and keeps results reproducible.
    """
    lap = g.laplacian()
    eigenvalues, vectors = np.linalg.eigh(lap)
    # eigh returns ascending eigenvalues; the zero eigenvalue sits first
    # for a connected graph.
    fiedler = float(eigenvalues[1]) if g.n_agents > 1 else 0.0
    if g.n_agents > 1 and fiedler <= 1e-12:
        raise DisconnectedGraph("Fiedler value is numerically zero")
    r = _fix_signs(vectors[:, 1:])
    lam = np.diag(eigenvalues[1:])
    return SpectralData(
        laplacian=lap,
        eigenvalues=eigenvalues,
        fiedler_value=fiedler,
        r_matrix=r,
        lambda_diag=lam,
        diameter=_diameter(g.adjacency),
    )


def sync_error_bound_edge(d: int, eta: float) -> float:
    """Asymptotic pairwise-disagreement bound d * eta for edge funnels."""
    if d < 1:
        raise InvalidEdge(f"diameter must be >= 1, got {d}")
    if eta < 0:
        raise InvalidEdge(f"eta must be nonnegative, got {eta}")
    return float(d) * float(eta)


def sync_error_bound_node(n: int, lambda2: float, eta: float) -> float:
    """Asymptotic bound 2 sqrt(N) eta / lambda2 for node funnels."""
    if lambda2 <= 0:
        raise DisconnectedGraph(f"lambda2 must be positive, got {lambda2}")
    if eta < 0:
        raise InvalidEdge(f"eta must be nonnegative, got {eta}")
    return 2.0 * np.sqrt(n) * eta / lambda2


def _is_connected(adjacency: np.ndarray) -> bool:
    n = adjacency.shape[0]
    if n == 1:
        return True
    seen = np.zeros(n, dtype=bool)
    queue = deque([0])
    seen[0] = True
    while queue:
        v = queue.popleft()
        for u in np.nonzero(adjacency[v])[0]:
            if not seen[u]:
                seen[u] = True
                queue.append(int(u))
    return bool(seen.all())


def _diameter(adjacency: np.ndarray) -> int:
    """Hop diameter by BFS from every vertex on the unweighted skeleton."""
    n = adjacency.shape[0]
    if n == 1:
        return 0
    skeleton = adjacency > 0
    worst = 0
    for start in range(n):
        dist = np.full(n, -1, dtype=int)
        dist[start] = 0
        queue = deque([start])
        while queue:
            v = queue.popleft()
            for u in np.nonzero(skeleton[v])[0]:
                if dist[u] < 0:
                    dist[u] = dist[v] + 1
                    queue.append(int(u))
        worst = max(worst, int(dist.max()))
    return worst


def _fix_signs(vectors: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    out = vectors.copy()
    for col in range(out.shape[1]):
        v = out[:, col]
        nonzero = np.nonzero(np.abs(v) > tol)[0]
        if nonzero.size and v[nonzero[0]] < 0:
            out[:, col] = -v
    return out
