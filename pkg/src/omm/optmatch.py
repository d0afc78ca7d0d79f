"""Offline optimal matching and Monte Carlo estimates of OPT(S,R), OPT(S,n), OPT(n)."""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass
from functools import lru_cache
from typing import Optional

import numba
import numpy as np

from .space import Distribution, MetricSpace, TreeMetric, as_rng, child_seed, sample


@dataclass
class Matching:
    """``server[i]`` is the server index matched to request ``i``."""
    server: np.ndarray
    cost: float

    def pairs(self):
        return list(enumerate(self.server.tolist()))


@dataclass
class OptEstimate:
    mean: float
    se: float
    trials: int
    seed: int

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    def csv_row(self, n: int) -> str:
        return f"{n},{self.mean!r},{self.se!r},{self.trials}"


def mean_se(values) -> tuple[float, float]:
    x = np.asarray(values, dtype=float)
    if x.size < 2:
        return float(x.mean()), 0.0
    return float(x.mean()), float(x.std(ddof=1) / math.sqrt(x.size))


# ---------------------------------------------------------------------------
# Assignment solver
# ---------------------------------------------------------------------------


@numba.njit(cache=True)
def _assign(C):
    # Successive shortest augmenting paths with row/column potentials.
    # Rows are requests (n), columns servers (m >= n); unmatched columns are
    # the zero-cost slack of an unbalanced instance.
    n, m = C.shape
    INF = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, np.int64)
    way = np.zeros(m + 1, np.int64)
    minv = np.empty(m + 1)
    used = np.empty(m + 1, np.bool_)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv[:] = INF
        used[:] = False
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = INF
            j1 = 0
            for j in range(1, m + 1):
                if not used[j]:
                    cur = C[i0 - 1, j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    col = np.full(n, -1, np.int64)
    for j in range(1, m + 1):
        if p[j] != 0:
            col[p[j] - 1] = j - 1
    return col


def assign(C) -> np.ndarray:
    """Minimum-cost assignment of every row to a distinct column (rows <= columns)."""
    C = np.ascontiguousarray(C, dtype=float)
    n, m = C.shape
    if n > m:
        raise ValueError(f"more requests ({n}) than servers ({m})")
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    return _assign(C)


@numba.njit(cache=True)
def _line_dp(s, r, p):
    # s, r sorted ascending. Some optimal matching on the line is order
    # preserving, so request i goes to the i-th chosen server. Row i only
    # needs servers j = i + k for k < m - n + 1.
    n, m = r.size, s.size
    w = m - n + 1
    prev = np.zeros(w)
    cur = np.empty(w)
    take = np.zeros((n, w), np.bool_)
    for i in range(n):
        for k in range(w):
            c = abs(r[i] - s[i + k])
            use = prev[k] + (c if p == 1.0 else c ** p)
            skip = cur[k - 1] if k > 0 else np.inf
            if use <= skip:
                cur[k] = use
                take[i, k] = True
            else:
                cur[k] = skip
        prev, cur = cur, prev
    out = np.empty(n, np.int64)
    k = w - 1
    for i in range(n - 1, -1, -1):
        while not take[i, k]:
            k -= 1
        out[i] = i + k
    return out


def _line(space: MetricSpace, S, R) -> Optional[np.ndarray]:
    # Fast paths on [0,1]: sorted pairing when balanced, an O(nm) dynamic
    # program over sorted sequences otherwise.
    if space.is_tree or space.dim != 1:
        return None
    si = np.argsort(S[:, 0], kind="stable")
    ri = np.argsort(R[:, 0], kind="stable")
    out = np.empty(len(R), dtype=np.int64)
    if len(S) == len(R):
        out[ri] = si
    else:
        pos = _line_dp(S[si, 0], R[ri, 0], float(space.p))
        out[ri] = si[pos]
    return out


def opt_offline(space: MetricSpace, S, R) -> Matching:
    """Exact minimum-cost matching covering every request in ``R``."""
    S = space.as_points(S)
    R = space.as_points(R)
    if len(S) < len(R):
        raise ValueError(f"|S|={len(S)} < |R|={len(R)}")
    col = _line(space, S, R)
    if col is None or len(R) == 0:
        C = space.pairwise(R, S)
        col = assign(C)
        costs = C[np.arange(len(R)), col]
    else:
        costs = _paired(space, R, S[col])
    return Matching(col, math.fsum(costs))


def _paired(space: MetricSpace, A, B) -> np.ndarray:
    if space.is_tree:
        return space.tree.dist(A, B)
    c = np.sqrt(np.sum((A - B) ** 2, axis=1))
    return c ** space.p if space.kind == "euclidean-power" else c


def matching_cost(space: MetricSpace, S, R, server_of_request) -> float:
    S = space.as_points(S)
    R = space.as_points(R)
    return math.fsum(_paired(space, R, S[np.asarray(server_of_request)]))


@lru_cache(maxsize=64)
def _injections(m: int, n: int) -> np.ndarray:
    return np.asarray(list(itertools.permutations(range(m), n)), dtype=np.int64).reshape(-1, n)


def opt_bruteforce(space: MetricSpace, S, R) -> float:
    """OPT(S,R) by enumerating every injection of requests into servers."""
    S = space.as_points(S)
    R = space.as_points(R)
    n, m = len(R), len(S)
    if m < n:
        raise ValueError(f"|S|={m} < |R|={n}")
    if n == 0:
        return 0.0
    C = space.pairwise(R, S)
    perms = _injections(m, n)
    totals = C[np.arange(n), perms].sum(axis=1)
    best = int(np.argmin(totals))
    return math.fsum(C[np.arange(n), perms[best]])


# ---------------------------------------------------------------------------
# Trees
# ---------------------------------------------------------------------------


def opt_tree_exact(tree: TreeMetric, server_counts, request_counts) -> float:
    """Balanced OPT on a tree as the edge-flow sum ``sum_e d_e |P_e - Q_e|``."""
    P = np.asarray(server_counts, dtype=np.int64)
    Q = np.asarray(request_counts, dtype=np.int64)
    if P.shape != (tree.size,) or Q.shape != (tree.size,):
        raise ValueError("count arrays must have one entry per tree node")
    if P.sum() != Q.sum():
        raise ValueError(f"unbalanced counts: {P.sum()} servers vs {Q.sum()} requests")
    net = tree.subtree_sums(P - Q)
    nonroot = tree.parent >= 0
    return math.fsum(tree.length[nonroot] * np.abs(net[nonroot]))


def tree_opt_predictor(tree: TreeMetric, weights, t: int) -> float:
    """``(sqrt(t)/n) * sum_e d_e sqrt(n_e (n - n_e))`` for node weights summing to n."""
    a = np.asarray(weights, dtype=np.int64)
    n = int(a.sum())
    if n < 1:
        raise ValueError("weights must sum to at least 1")
    if not 1 <= t <= n:
        raise ValueError(f"t={t} outside [1, {n}]")
    ne = tree.subtree_sums(a)
    nonroot = tree.parent >= 0
    terms = tree.length[nonroot] * np.sqrt(ne[nonroot] * (n - ne[nonroot]))
    return math.sqrt(t) / n * math.fsum(terms)


# ---------------------------------------------------------------------------
# Monte Carlo
# ---------------------------------------------------------------------------


def opt_trials(space: MetricSpace, dist: Distribution, n: int, trials: int, seed: int,
               fixed_servers=None) -> np.ndarray:
    """Per-trial OPT costs; trial ``k`` draws from ``child_seed(seed, k)``."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if fixed_servers is not None:
        fixed_servers = space.as_points(fixed_servers)
        if len(fixed_servers) < n:
            raise ValueError("fixed server set smaller than n")
    out = np.empty(trials)
    for k in range(trials):
        rng = np.random.default_rng(child_seed(seed, k))
        S = sample(dist, space, n, rng) if fixed_servers is None else fixed_servers
        R = sample(dist, space, n, rng)
        out[k] = opt_offline(space, S, R).cost
    return out


def estimate_opt(space: MetricSpace, dist: Distribution, n: int, trials: int, seed: int,
                 fixed_servers=None) -> OptEstimate:
    """Estimate OPT(n), or OPT(S,n) when ``fixed_servers`` is given."""
    mean, se = mean_se(opt_trials(space, dist, n, trials, seed, fixed_servers))
    return OptEstimate(mean, se, trials, int(seed))


def estimate_opt_curve(space: MetricSpace, dist: Distribution, n_max: int, trials: int,
                       seed: int) -> list[OptEstimate]:
    """OPT(t) estimates for t = 1..n_max, each with an independent seed stream."""
    return [estimate_opt(space, dist, t, trials, child_seed(seed, t).generate_state(1)[0])
            for t in range(1, n_max + 1)]


def soar_cost_prediction(curve: list[OptEstimate]) -> tuple[float, float]:
    """``sum_t OPT(t)/t`` and its standard error from independent estimates."""
    t = np.arange(1, len(curve) + 1)
    means = np.array([e.mean for e in curve])
    ses = np.array([e.se for e in curve])
    return float(np.sum(means / t)), float(math.sqrt(np.sum((ses / t) ** 2)))
