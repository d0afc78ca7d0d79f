"""Online policy contract and the non-tree policies."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .optmatch import opt_offline
from .space import TIE_TOL, ContractViolation, Distribution, MetricSpace, as_rng, sample


class OnlinePolicy:
    """Stateful matcher: ``init`` with a server set, then ``serve`` one request at a time.

    ``serve`` returns the index of a free server and consumes it. Subclasses
    implement ``_select``; the base class owns the free-server bookkeeping.
    """

    name = "policy"

    def init(self, space: MetricSpace, servers, rng=None, n_requests: Optional[int] = None) -> None:
        self.space = space
        self.servers = space.as_points(servers)
        self.rng = as_rng(rng)
        self.n_requests = len(self.servers) if n_requests is None else int(n_requests)
        if self.n_requests > len(self.servers):
            raise ValueError(f"{self.n_requests} requests but only {len(self.servers)} servers")
        self.free = np.ones(len(self.servers), dtype=bool)
        self.t = 0

    def serve(self, r) -> int:
        if self.t >= self.n_requests:
            raise ContractViolation("more arrivals than announced requests")
        j = int(self._select(r))
        if not self.free[j]:
            raise ContractViolation(f"{self.name} chose server {j}, which is already used")
        self.free[j] = False
        self.t += 1
        return j

    def _select(self, r) -> int:
        raise NotImplementedError

    def free_indices(self) -> np.ndarray:
        return np.flatnonzero(self.free)


# ---------------------------------------------------------------------------
# Tie-breaking
# ---------------------------------------------------------------------------


class TieBreakRule:
    """Local rule: a probability law over a set of tied server indices."""

    def probabilities(self, candidates) -> np.ndarray:
        raise NotImplementedError

    def choose(self, candidates, rng) -> int:
        candidates = np.asarray(candidates)
        if candidates.size == 1:
            return int(candidates[0])
        p = self.probabilities(candidates)
        return int(candidates[rng.choice(candidates.size, p=p)])


class UniformTieBreak(TieBreakRule):
    def probabilities(self, candidates) -> np.ndarray:
        k = len(candidates)
        return np.full(k, 1.0 / k)

    def choose(self, candidates, rng) -> int:
        return int(candidates[rng.integers(len(candidates))])


class LowestIndexTieBreak(TieBreakRule):
    """Deterministic rule; local, but adding a lower index steals all mass."""

    def probabilities(self, candidates) -> np.ndarray:
        candidates = np.asarray(candidates)
        p = np.zeros(candidates.size)
        p[np.argmin(candidates)] = 1.0
        return p


def non_increasing_violations(rule: TieBreakRule, universe: int = 4, tol: float = 1e-12) -> list:
    """All ``(S', S'', s)`` with ``S' <= S''`` where ``P(s | S') < P(s | S'')``.

    Enumerates every pair of nested nonempty subsets of ``range(universe)``.
    """
    bad = []
    subsets = [c for k in range(1, universe + 1) for c in itertools.combinations(range(universe), k)]
    for small in subsets:
        ps = dict(zip(small, rule.probabilities(np.array(small))))
        for big in subsets:
            if not set(small) <= set(big):
                continue
            pb = dict(zip(big, rule.probabilities(np.array(big))))
            for s in small:
                if ps[s] < pb[s] - tol:
                    bad.append((small, big, s))
    return bad


def closest_set(space: MetricSpace, servers, r, tol: float = TIE_TOL, free=None) -> np.ndarray:
    """Indices of free servers within ``tol`` of the minimum cost to ``r``."""
    servers = space.as_points(servers)
    idx = np.arange(len(servers)) if free is None else np.flatnonzero(free)
    if idx.size == 0:
        raise ValueError("no free servers")
    c = space.dist_to(servers[idx], r)
    return idx[c <= c.min() + tol]


# ---------------------------------------------------------------------------
# Runs
# ---------------------------------------------------------------------------


@dataclass
class RunRecord:
    requests: np.ndarray
    chosen: np.ndarray
    increments: np.ndarray
    total: float


def run_online(policy: OnlinePolicy, space: MetricSpace, S, requests, seed=None,
               n_requests: Optional[int] = None) -> RunRecord:
    """Feed ``requests`` in order and record every irrevocable choice."""
    S = space.as_points(S)
    k = len(requests)
    R = space.as_points(requests) if k else np.empty((0,) if space.is_tree else (0, space.dim))
    if len(S) < k:
        raise ValueError(f"|S|={len(S)} < {k} requests")
    policy.init(space, S, seed, n_requests=k if n_requests is None else n_requests)
    used = np.zeros(len(S), dtype=bool)
    chosen = np.empty(k, dtype=np.int64)
    inc = np.empty(k)
    for t in range(k):
        j = policy.serve(R[t])
        if not 0 <= j < len(S) or used[j]:
            raise ContractViolation(f"policy returned unavailable server {j} at arrival {t}")
        used[j] = True
        chosen[t] = j
        inc[t] = space.dist_to(S[j:j + 1], R[t])[0]
    return RunRecord(np.asarray(R), chosen, inc, math.fsum(inc))


# ---------------------------------------------------------------------------
# Policies
# ---------------------------------------------------------------------------


class GreedyPolicy(OnlinePolicy):
    """Match to a closest free server; randomness only through the tie-break rule."""

    name = "greedy"

    def __init__(self, tiebreak: Optional[TieBreakRule] = None, tol: float = TIE_TOL):
        self.tiebreak = tiebreak or UniformTieBreak()
        self.tol = tol

    def _select(self, r) -> int:
        tied = closest_set(self.space, self.servers, r, self.tol, free=self.free)
        return self.tiebreak.choose(tied, self.rng)


def greedy_policy(tiebreak: Optional[TieBreakRule] = None) -> GreedyPolicy:
    return GreedyPolicy(tiebreak)


class SoarPolicy(OnlinePolicy):
    """Simulate-optimize-assign-repeat.

    At arrival t (1-indexed) draw n - t fresh phantom requests, solve the
    offline matching of the free servers against the real request plus the
    phantoms, and commit the real request's partner.
    """

    name = "soar"

    def __init__(self, dist: Distribution):
        self.dist = dist

    def _select(self, r) -> int:
        t = self.t + 1
        phantoms = sample(self.dist, self.space, self.n_requests - t, self.rng)
        real = np.array([r]) if self.space.is_tree else np.reshape(r, (1, -1))
        req = np.concatenate([real, phantoms])
        free = self.free_indices()
        m = opt_offline(self.space, self.servers[free], req)
        return int(free[m.server[0]])


def soar_policy(dist: Distribution) -> SoarPolicy:
    return SoarPolicy(dist)


class HierarchicalGreedyPolicy(OnlinePolicy):
    """Greedy over a dyadic hierarchy of cells in the unit cube.

    Level 0 is the whole cube and level ``depth`` the finest grid. A request
    climbs from its finest cell to the smallest enclosing cell that still
    holds a free server, then descends, at each level taking the nonempty
    subcell whose centre is nearest to the request's own subcell (lowest
    index on ties), and finally takes the nearest free server in the leaf cell.
    """

    name = "hgreedy"

    def __init__(self, depth: Optional[int] = None):
        self.depth = depth

    def init(self, space, servers, rng=None, n_requests=None):
        if space.is_tree:
            raise ValueError("hierarchical greedy needs the unit cube")
        super().init(space, servers, rng, n_requests)
        d = space.dim
        L = self.depth
        if L is None:
            L = max(1, math.ceil(math.log2(max(self.n_requests, 2)) / d))
        if L < 1:
            raise ValueError("depth must be >= 1")
        self.L = L
        self._offsets = np.array(list(itertools.product((0, 1), repeat=d)), dtype=np.int64)
        self.count = [dict() for _ in range(L + 1)]
        self.members: dict[tuple, list[int]] = {}
        for j, x in enumerate(self.servers):
            leaf = self._cell(x, L)
            self.members.setdefault(leaf, []).append(j)
            for lvl in range(L + 1):
                key = tuple(c >> (L - lvl) for c in leaf)
                self.count[lvl][key] = self.count[lvl].get(key, 0) + 1

    def _cell(self, x, lvl):
        k = 1 << lvl
        return tuple(min(int(c * k), k - 1) for c in np.asarray(x, dtype=float).reshape(-1))

    def _select(self, r) -> int:
        L = self.L
        rc = self._cell(r, L)
        lvl = L
        cell = rc
        while self.count[lvl].get(cell, 0) == 0:
            lvl -= 1
            cell = tuple(c >> (L - lvl) for c in rc)
        while lvl < L:
            lvl += 1
            target = np.array([c >> (L - lvl) for c in rc])
            kids = 2 * np.array(cell) + self._offsets
            best, best_d = None, np.inf
            for kid in kids:
                key = tuple(int(c) for c in kid)
                if self.count[lvl].get(key, 0) == 0:
                    continue
                dd = float(np.sum((kid - target) ** 2))
                if dd < best_d:
                    best, best_d = key, dd
            cell = best
        cand = np.array(self.members[cell])
        c = self.space.dist_to(self.servers[cand], r)
        j = int(cand[np.flatnonzero(c <= c.min() + TIE_TOL)].min())
        self.members[cell].remove(j)
        for l2 in range(L + 1):
            key = tuple(x >> (L - l2) for x in cell)
            self.count[l2][key] -= 1
        return j


def hierarchical_greedy_policy(depth: Optional[int] = None) -> HierarchicalGreedyPolicy:
    return HierarchicalGreedyPolicy(depth)
