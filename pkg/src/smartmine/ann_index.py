"""Occlusion-pruned proximity graph for approximate nearest neighbour search.

The graph is grown with a traverse-add loop: random (start, target) vertex
pairs are searched for, and every failed search adds an edge from the local
minimum it got stuck in to the target (and the reverse edge, when the target
does not already see something closer in that direction).

Searching is a backtracking best-first walk over edges: the frontier holds
vertices keyed by their distance to the query together with a cursor into
their (sorted) edge list, so short edges of close vertices are tried first.
The search is bounded by ``effort``, the number of vertices reached; every
reached vertex costs exactly one distance evaluation.

All distances inside the index are squared Euclidean and are evaluated by a
single compiled kernel, so results from ``search`` and ``brute_force_knn``
are bit-comparable.
"""

from __future__ import annotations

import heapq
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit

from .errors import ConfigError, IndexBuildError, NumericError

DEFAULT_TARGET_SUCCESS = 0.98
DEFAULT_WINDOW = 1000
DEFAULT_ATTEMPT_FACTOR = 1000
MIN_BUILD_EFFORT = 64
DEFAULT_EFFORT_PER_NEIGHBOUR = 32
_INITIAL_CAPACITY = 32


# --------------------------------------------------------------------------
# compiled kernels
# --------------------------------------------------------------------------


@njit(cache=True, nogil=True)
def _sqdist(X, i, q):
    s = 0.0
    for t in range(X.shape[1]):
        d = X[i, t] - q[t]
        s += d * d
    return s


@njit(cache=True, nogil=True)
def _backtrack_search(X, nbrs, deg, q, start, budget, restart, stamp, mark, vis_idx, vis_dist):
    """Reach up to ``budget`` vertices from ``start``; returns the number reached.

    Reached vertices are written to ``vis_idx`` / ``vis_dist`` in visiting
    order. With ``restart`` set, an exhausted frontier is re-seeded from the
    lowest-index unreached vertex, so ``budget >= N`` reaches every vertex.
    """
    n = X.shape[0]
    heap = [(0.0, np.int64(0), np.int64(0))]
    heap.pop()
    stamp[start] = mark
    d0 = _sqdist(X, start, q)
    vis_idx[0] = start
    vis_dist[0] = d0
    nvis = 1
    heapq.heappush(heap, (d0, np.int64(start), np.int64(0)))
    scan = 0
    while nvis < budget:
        if len(heap) == 0:
            if not restart or nvis >= n:
                break
            while stamp[scan] == mark:
                scan += 1
            stamp[scan] = mark
            du = _sqdist(X, scan, q)
            vis_idx[nvis] = scan
            vis_dist[nvis] = du
            nvis += 1
            heapq.heappush(heap, (du, np.int64(scan), np.int64(0)))
            continue
        item = heapq.heappop(heap)
        dv = item[0]
        v = item[1]
        cursor = item[2]
        if cursor >= deg[v]:
            continue
        if cursor + 1 < deg[v]:
            heapq.heappush(heap, (dv, v, cursor + 1))
        u = nbrs[v, cursor]
        if stamp[u] != mark:
            stamp[u] = mark
            du = _sqdist(X, u, q)
            vis_idx[nvis] = u
            vis_dist[nvis] = du
            nvis += 1
            heapq.heappush(heap, (du, np.int64(u), np.int64(0)))
    return nvis


@njit(cache=True, nogil=True)
def _top_k(vis_idx, vis_dist, nvis, k, exclude, out_idx, out_dist):
    """Write the k best reached vertices (distance, then index) to the out arrays."""
    idx = vis_idx[:nvis]
    dist = vis_dist[:nvis]
    by_index = np.argsort(idx)
    idx = idx[by_index]
    dist = dist[by_index]
    order = np.argsort(dist, kind="mergesort")
    m = 0
    for r in range(nvis):
        if m == k:
            break
        j = order[r]
        if idx[j] == exclude:
            continue
        out_idx[m] = idx[j]
        out_dist[m] = dist[j]
        m += 1
    for j in range(m, k):
        out_idx[j] = -1
        out_dist[j] = np.inf
    return m


@njit(cache=True, nogil=True)
def _search_rows(X, nbrs, deg, queries, starts, excludes, k, budget, out_idx, out_dist, out_calc):
    n = X.shape[0]
    stamp = np.zeros(n, np.int64)
    vis_idx = np.empty(n, np.int64)
    vis_dist = np.empty(n, np.float64)
    for r in range(queries.shape[0]):
        nvis = _backtrack_search(
            X, nbrs, deg, queries[r], starts[r], budget, True, stamp, r + 1, vis_idx, vis_dist
        )
        _top_k(vis_idx, vis_dist, nvis, k, excludes[r], out_idx[r], out_dist[r])
        out_calc[r] = nvis


@njit(cache=True)
def _offer_edge(nbrs, ndst, deg, X, a, b, dab):
    """Add a->b unless it is a duplicate or occluded, then prune a's longer
    edges that b occludes. Returns (nbrs, ndst, added, distance computations)."""
    ncalc = 0
    for e in range(deg[a]):
        c = nbrs[a, e]
        if c == b:
            return nbrs, ndst, False, ncalc
        if ndst[a, e] < dab:
            dcb = _sqdist(X, c, X[b])
            ncalc += 1
            if dcb < dab:
                return nbrs, ndst, False, ncalc
    keep = 0
    for e in range(deg[a]):
        c = nbrs[a, e]
        dac = ndst[a, e]
        if dac > dab:
            dbc = _sqdist(X, b, X[c])
            ncalc += 1
            if dbc < dac:
                continue
        nbrs[a, keep] = c
        ndst[a, keep] = dac
        keep += 1
    deg[a] = keep
    if deg[a] == nbrs.shape[1]:
        cap = nbrs.shape[1] * 2
        grown_n = np.empty((nbrs.shape[0], cap), nbrs.dtype)
        grown_d = np.empty((nbrs.shape[0], cap), ndst.dtype)
        grown_n[:, : nbrs.shape[1]] = nbrs
        grown_d[:, : nbrs.shape[1]] = ndst
        nbrs = grown_n
        ndst = grown_d
    pos = deg[a]
    while pos > 0 and (ndst[a, pos - 1] > dab or (ndst[a, pos - 1] == dab and nbrs[a, pos - 1] > b)):
        nbrs[a, pos] = nbrs[a, pos - 1]
        ndst[a, pos] = ndst[a, pos - 1]
        pos -= 1
    nbrs[a, pos] = b
    ndst[a, pos] = dab
    deg[a] += 1
    return nbrs, ndst, True, ncalc


@njit(cache=True)
def _traverse_add(X, target, window, max_attempts, budget, seed, capacity):
    np.random.seed(seed)
    n = X.shape[0]
    nbrs = np.empty((n, capacity), np.int64)
    ndst = np.empty((n, capacity), np.float64)
    deg = np.zeros(n, np.int64)
    stamp = np.zeros(n, np.int64)
    vis_idx = np.empty(n, np.int64)
    vis_dist = np.empty(n, np.float64)
    ring = np.zeros(window, np.uint8)
    ring_sum = 0
    attempts = 0
    successes = 0
    ncalc = 0
    while attempts < max_attempts:
        p = np.random.randint(0, n)
        q = np.random.randint(0, n - 1)
        if q >= p:
            q += 1
        nvis = _backtrack_search(
            X, nbrs, deg, X[q], p, budget, False, stamp, attempts + 1, vis_idx, vis_dist
        )
        ncalc += nvis
        ok = stamp[q] == attempts + 1
        if not ok:
            v = vis_idx[0]
            dv = vis_dist[0]
            for r in range(1, nvis):
                if vis_dist[r] < dv or (vis_dist[r] == dv and vis_idx[r] < v):
                    v = vis_idx[r]
                    dv = vis_dist[r]
            # descend greedily so that v is a local minimum for q
            while True:
                best = -1
                best_d = dv
                for e in range(deg[v]):
                    u = nbrs[v, e]
                    du = _sqdist(X, u, X[q])
                    ncalc += 1
                    if du < best_d or (du == best_d and best >= 0 and u < best):
                        best = u
                        best_d = du
                if best < 0:
                    break
                v = best
                dv = best_d
            if v != q:
                nbrs, ndst, added, c1 = _offer_edge(nbrs, ndst, deg, X, v, q, dv)
                nbrs, ndst, added, c2 = _offer_edge(nbrs, ndst, deg, X, q, v, dv)
                ncalc += c1 + c2
        slot = attempts % window
        ring_sum -= ring[slot]
        ring[slot] = 1 if ok else 0
        ring_sum += ring[slot]
        attempts += 1
        if ok:
            successes += 1
        if attempts >= window and ring_sum >= target * window:
            break
    filled = min(attempts, window)
    rate = ring_sum / filled
    return nbrs, ndst, deg, attempts, successes, rate, ncalc


@njit(cache=True)
def _all_sqdist(X, q):
    out = np.empty(X.shape[0])
    for i in range(X.shape[0]):
        out[i] = _sqdist(X, i, q)
    return out


# --------------------------------------------------------------------------
# public surface
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class BuildStats:
    attempts: int
    successes: int
    window_success: float
    distance_computations: int
    effort: int = 0


@dataclass(frozen=True)
class SearchResult:
    indices: np.ndarray
    distances: np.ndarray
    distance_computations: int


@dataclass(eq=False)
class ProximityGraph:
    """Directed neighbour graph over a fixed table of embeddings.

    ``edges(v)`` / ``edge_distances(v)`` give v's outbound edges sorted
    ascending by squared distance, ties by index.
    """

    points: np.ndarray
    _nbrs: np.ndarray = field(repr=False)
    _ndst: np.ndarray = field(repr=False)
    _deg: np.ndarray = field(repr=False)
    stats: BuildStats

    def __len__(self) -> int:
        return self.points.shape[0]

    def edges(self, v: int) -> np.ndarray:
        return self._nbrs[v, : self._deg[v]].copy()

    def edge_distances(self, v: int) -> np.ndarray:
        return self._ndst[v, : self._deg[v]].copy()

    @property
    def degrees(self) -> np.ndarray:
        return self._deg.copy()

    def edge_lists(self) -> list[np.ndarray]:
        return [self.edges(v) for v in range(len(self))]


def _check_points(embeddings) -> np.ndarray:
    X = np.ascontiguousarray(embeddings, dtype=np.float64)
    if X.ndim != 2:
        raise ConfigError(f"embedding table must be 2-d, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise NumericError("embedding table contains non-finite values")
    return X


def build(
    embeddings,
    target_success: float = DEFAULT_TARGET_SUCCESS,
    seed: int = 0,
    *,
    effort: int | None = None,
    window: int = DEFAULT_WINDOW,
    max_attempts: int | None = None,
) -> ProximityGraph:
    """Grow a proximity graph by traverse-add.

    Stops once the success rate over the trailing ``window`` attempts reaches
    ``target_success``. A build attempt succeeds when a search of ``effort``
    vertices from a random start reaches a random target.

    Each stage is capped at ``max_attempts`` (default ``1000 * N``). With an
    explicit ``effort`` there is one stage. With ``effort=None`` the build
    starts at ``default_build_effort(N)`` and, whenever a stage stalls,
    restarts from scratch with twice the effort (up to N). Reported attempts
    and distance computations include abandoned stages. IndexBuildError is
    raised if the last stage also falls short.
    """
    X = _check_points(embeddings)
    n = X.shape[0]
    if n < 2:
        raise ConfigError(f"need at least 2 points to build an index, got {n}")
    if not 0.0 < target_success <= 1.0:
        raise ConfigError(f"target_success must be in (0, 1], got {target_success}")
    if window < 1 or (effort is not None and effort < 2):
        raise ConfigError("build effort must be >= 2 and window >= 1")
    full_cap = DEFAULT_ATTEMPT_FACTOR * n if max_attempts is None else max_attempts
    if effort is not None:
        stages = [(effort, full_cap)]
    else:
        stages = []
        e = default_build_effort(n)
        while e < n:
            stages.append((e, full_cap))
            e *= 2
        stages.append((n, full_cap))
    total_attempts = total_calcs = 0
    for stage_effort, cap in stages:
        w = min(window, cap)
        nbrs, ndst, deg, attempts, successes, rate, ncalc = _traverse_add(
            X, float(target_success), int(w), int(cap), int(stage_effort), int(seed),
            _INITIAL_CAPACITY,
        )
        total_attempts += int(attempts)
        total_calcs += int(ncalc)
        if rate >= target_success:
            break
    stats = BuildStats(total_attempts, int(successes), float(rate), total_calcs, int(stage_effort))
    if rate < target_success:
        raise IndexBuildError(
            f"traverse-add reached {rate:.4f} < {target_success} "
            f"after {total_attempts} attempts on {n} points"
        )
    return ProximityGraph(X, nbrs, ndst, deg, stats)


def default_build_effort(n: int) -> int:
    return min(n, max(MIN_BUILD_EFFORT, math.ceil(math.sqrt(2 * n))))


def occlusion_test(points, a: int, b: int, edges) -> bool:
    """True iff some edge a->c (c != b) has d(a,c) < d(a,b) and d(c,b) < d(a,b)."""
    X = np.ascontiguousarray(points, dtype=np.float64)
    dab = _sqdist(X, a, X[b])
    for c in edges:
        c = int(c)
        if c == b:
            continue
        if _sqdist(X, a, X[c]) < dab and _sqdist(X, c, X[b]) < dab:
            return True
    return False


def _check_k(n: int, k: int) -> None:
    if k < 1 or k >= n:
        raise ConfigError(f"k must satisfy 1 <= k < N={n}, got {k}")


def _budget(n: int, effort: int, k: int, excluding: bool) -> int:
    if effort < k:
        raise ConfigError(f"effort ({effort}) must be >= k ({k})")
    # the excluded vertex is reached but does not count against effort
    return min(n, effort + (1 if excluding else 0))


def search(
    graph: ProximityGraph,
    query,
    k: int,
    effort: int,
    exclude: int | None = None,
    start: int = 0,
) -> SearchResult:
    """k best vertices among those reached by a search of ``effort`` vertices."""
    n = len(graph)
    _check_k(n, k)
    budget = _budget(n, effort, k, exclude is not None)
    q = np.ascontiguousarray(query, dtype=np.float64).reshape(1, -1)
    if q.shape[1] != graph.points.shape[1]:
        raise ConfigError("query width does not match the indexed embeddings")
    if not np.all(np.isfinite(q)):
        raise NumericError("query contains non-finite values")
    if not 0 <= start < n:
        raise ConfigError(f"start vertex {start} out of range")
    out_idx = np.empty((1, k), np.int64)
    out_dist = np.empty((1, k), np.float64)
    out_calc = np.empty(1, np.int64)
    _search_rows(
        graph.points, graph._nbrs, graph._deg, q,
        np.array([start], np.int64), np.array([-1 if exclude is None else exclude], np.int64),
        k, budget, out_idx, out_dist, out_calc,
    )
    return SearchResult(out_idx[0], out_dist[0], int(out_calc[0]))


def default_effort(k: int) -> int:
    return DEFAULT_EFFORT_PER_NEIGHBOUR * k


def default_list_size(per_class: int) -> int:
    """Twice the per-class sample count, clamped to [16, 64]."""
    return int(min(64, max(16, 2 * per_class)))


def neighbour_lists(
    graph: ProximityGraph,
    k: int,
    effort: int | None = None,
    workers: int = 1,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Approximate k-NN of every vertex, each search seeded at the vertex itself.

    Returns (indices [N,k], squared distances [N,k], distance computations [N]).
    Output does not depend on ``workers``.
    """
    n = len(graph)
    _check_k(n, k)
    if effort is None:
        effort = default_effort(k)
    budget = _budget(n, effort, k, True)
    X = graph.points
    out_idx = np.empty((n, k), np.int64)
    out_dist = np.empty((n, k), np.float64)
    out_calc = np.empty(n, np.int64)
    rows = np.arange(n, dtype=np.int64)

    def run(lo: int, hi: int) -> None:
        _search_rows(
            X, graph._nbrs, graph._deg, X[lo:hi], rows[lo:hi], rows[lo:hi],
            k, budget, out_idx[lo:hi], out_dist[lo:hi], out_calc[lo:hi],
        )

    if workers <= 1:
        run(0, n)
    else:
        bounds = np.linspace(0, n, workers + 1).astype(int)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(lambda lh: run(*lh), zip(bounds[:-1], bounds[1:])))
    return out_idx, out_dist, out_calc


def brute_force_knn(embeddings, query, k: int, exclude: int | None = None) -> SearchResult:
    """Exact top-k by squared distance; ties go to the lower index."""
    X = _check_points(embeddings)
    n = X.shape[0]
    limit = n - 1 if exclude is not None else n
    if k < 1 or k > limit:
        raise ConfigError(f"k={k} out of range for {n} points")
    d = _all_sqdist(X, np.ascontiguousarray(query, dtype=np.float64))
    order = np.argsort(d, kind="stable")
    if exclude is not None:
        order = order[order != exclude]
    order = order[:k]
    return SearchResult(order.astype(np.int64), d[order], n)


def dump_graph(graph: ProximityGraph, path) -> None:
    """Write one line per vertex: ``id nbr:dist nbr:dist ...`` ascending by distance."""
    lines = []
    for v in range(len(graph)):
        pairs = " ".join(
            f"{int(u)}:{float(d)!r}" for u, d in zip(graph.edges(v), graph.edge_distances(v))
        )
        lines.append(f"{v} {pairs}".rstrip())
    Path(path).write_text("\n".join(lines) + "\n")
