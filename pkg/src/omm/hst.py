"""Random HST embeddings and the tree greedy subroutines built on them.

Servers and requests live on HST leaves. ``A(r | S)`` is the lowest
ancestor of the request's leaf whose subtree still holds a free server.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .online import OnlinePolicy
from .space import HSTree, MetricSpace, TreeMetric, as_rng, tree_space


class EnumerationBudgetExceeded(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Embedding
# ---------------------------------------------------------------------------


@dataclass
class Embedding:
    points: np.ndarray
    tree: HSTree
    leaf_of: np.ndarray
    stretch_mean: float
    stretch_max: float

    @property
    def space(self) -> MetricSpace:
        return tree_space(self.tree)


def build_hst(points, space: MetricSpace, seed) -> Embedding:
    """FRT-style random hierarchical decomposition into an HST.

    Distances are rescaled so the closest distinct pair sits at 1. With a
    random scale ``beta`` in [1, 2) and a random centre order, a level-i
    cluster is split by assigning each member to the first centre within
    ``beta * 2**(i-1)``. The edge into a level-i node has length
    ``2**(i+1)`` (times the scale), which keeps the tree non-contracting.
    """
    if space.eta != 1.0:
        raise ValueError("HST embedding needs a true metric (eta = 1)")
    P = space.as_points(points)
    if len(P) == 0:
        raise ValueError("need at least one point")
    rng = as_rng(seed)
    if space.is_tree:
        U, inv = np.unique(P, return_inverse=True)
    else:
        U, inv = np.unique(P, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    k = len(U)
    if k == 1:
        tree = HSTree([-1], [0.0], ["leaf0"], level=[0])
        return Embedding(P, tree, np.zeros(len(P), dtype=np.int64), 1.0, 1.0)

    D = space.pairwise(U, U)
    scale = float(D[D > 0].min())
    Dn = D / scale
    top = math.ceil(math.log2(Dn.max())) + 1
    beta = 2.0 ** rng.random()
    perm = rng.permutation(k)
    within_perm = Dn[:, perm]

    parent, length, level, labels = [-1], [0.0], [top], ["c0"]
    leaf_node = np.full(k, -1, dtype=np.int64)
    frontier = [(0, np.arange(k))]
    for i in range(top - 1, -1, -1):
        radius = beta * 2.0 ** (i - 1)
        w = (2.0 ** (i + 1)) * scale
        nxt = []
        for node, members in frontier:
            centre_rank = np.argmax(within_perm[members] <= radius, axis=1)
            for rank in np.unique(centre_rank):
                sub = members[centre_rank == rank]
                parent.append(node)
                length.append(w)
                level.append(i)
                labels.append(f"c{len(labels)}")
                nxt.append((len(parent) - 1, sub))
        frontier = nxt
    for node, members in frontier:
        assert members.size == 1
        leaf_node[members[0]] = node
    tree = HSTree(parent, length, labels, level=level)

    iu, ju = np.triu_indices(k, 1)
    td = tree.dist(leaf_node[iu], leaf_node[ju])
    stretch = td / D[iu, ju]
    return Embedding(P, tree, leaf_node[inv], float(stretch.mean()), float(stretch.max()))


def random_hst(n_leaves: int, rng, max_branching: int = 3, depth: Optional[int] = None) -> HSTree:
    """Random HST with ``n_leaves`` leaves, all at level 0.

    Each internal node at level l >= 2 splits its leaf set into a random
    number (1..max_branching) of nonempty groups; level-1 nodes split into
    singletons. The edge into a level-i node has length ``2**(i+1)``.
    """
    rng = as_rng(rng)
    if depth is None:
        depth = max(1, math.ceil(math.log(max(n_leaves, 2), max_branching))) + 1
    parent, length, level = [-1], [0.0], [depth]
    stack = [(0, depth, n_leaves)]
    while stack:
        node, lvl, size = stack.pop()
        if lvl == 0:
            continue
        if lvl == 1:
            groups = [1] * size
        else:
            g = int(rng.integers(1, min(size, max_branching) + 1))
            cuts = np.sort(rng.choice(np.arange(1, size), size=g - 1, replace=False)) if g > 1 else []
            groups = np.diff(np.concatenate([[0], cuts, [size]])).astype(int).tolist()
        for s in groups:
            parent.append(node)
            length.append(2.0 ** lvl)
            level.append(lvl - 1)
            stack.append((len(parent) - 1, lvl - 1, s))
    return HSTree(parent, length, level=level)


# ---------------------------------------------------------------------------
# Subtree bookkeeping and policies
# ---------------------------------------------------------------------------


class SubtreeState:
    """Free-server counts per node plus free server indices per leaf."""

    def __init__(self, tree: TreeMetric, server_leaves):
        self.tree = tree
        server_leaves = np.asarray(server_leaves, dtype=np.int64)
        for v in np.unique(server_leaves):
            if not tree.is_leaf(v):
                raise ValueError(f"server at non-leaf node {v}")
        self.at_leaf: dict[int, list[int]] = {}
        for j, v in enumerate(server_leaves):
            self.at_leaf.setdefault(int(v), []).append(j)
        leaf_counts = np.zeros(tree.size)
        np.add.at(leaf_counts, server_leaves, 1)
        self.count = tree.subtree_sums(leaf_counts).astype(np.int64)

    def remove(self, j: int, leaf: int) -> None:
        self.at_leaf[leaf].remove(j)
        v = leaf
        while v >= 0:
            self.count[v] -= 1
            v = self.tree.parent[v]

    def anchor(self, leaf: int) -> int:
        """Lowest ancestor of ``leaf`` (inclusive) with a free server beneath it."""
        v = int(leaf)
        while self.count[v] == 0:
            v = int(self.tree.parent[v])
            if v < 0:
                raise ValueError("no free server left")
        return v

    def nonempty_children(self, v: int) -> list[int]:
        return [c for c in self.tree.children[v] if self.count[c] > 0]


class _HSTPolicy(OnlinePolicy):
    def init(self, space, servers, rng=None, n_requests=None):
        if not space.is_tree:
            raise ValueError(f"{self.name} runs on a tree space; embed the points first")
        super().init(space, servers, rng, n_requests)
        self.state = SubtreeState(space.tree, self.servers)

    def _check_leaf(self, r) -> int:
        r = int(r)
        if not self.space.tree.is_leaf(r):
            raise ValueError(f"request at non-leaf node {r}")
        return r

    def _select(self, r) -> int:
        r = self._check_leaf(r)
        j, leaf = self._draw(self.state.anchor(r))
        self.state.remove(j, leaf)
        return j

    def choice_probabilities(self, r) -> dict[int, float]:
        """Exact law of the server chosen for a request at leaf ``r`` now."""
        return self._law(self.state.anchor(self._check_leaf(r)))


class MNPPolicy(_HSTPolicy):
    """Uniform over every free server in the subtree of ``A(r | S)``."""

    name = "mnp-hst"

    def _draw(self, a):
        st = self.state
        u = int(self.rng.integers(st.count[a]))
        v = a
        while st.tree.children[v]:
            for c in st.tree.children[v]:
                if u < st.count[c]:
                    v = c
                    break
                u -= st.count[c]
        return st.at_leaf[v][u], v

    def _law(self, a):
        st = self.state
        p = 1.0 / st.count[a]
        out = {}
        stack = [a]
        while stack:
            v = stack.pop()
            if st.count[v] == 0:
                continue
            if st.tree.children[v]:
                stack.extend(st.tree.children[v])
            else:
                for j in st.at_leaf.get(v, []):
                    out[j] = p
        return out


class RandomSubtreePolicy(_HSTPolicy):
    """From ``A(r | S)`` step into a uniformly random nonempty child until a leaf."""

    name = "random-subtree"

    def _draw(self, a):
        st = self.state
        v = a
        while st.tree.children[v]:
            kids = st.nonempty_children(v)
            v = kids[int(self.rng.integers(len(kids)))]
        free = st.at_leaf[v]
        return free[int(self.rng.integers(len(free)))], v

    def _law(self, a):
        st = self.state
        out = {}
        stack = [(a, 1.0)]
        while stack:
            v, p = stack.pop()
            if st.tree.children[v]:
                kids = st.nonempty_children(v)
                stack.extend((c, p / len(kids)) for c in kids)
            else:
                free = st.at_leaf[v]
                for j in free:
                    out[j] = p / len(free)
        return out


def mnp_policy() -> MNPPolicy:
    return MNPPolicy()


def random_subtree_policy() -> RandomSubtreePolicy:
    return RandomSubtreePolicy()


# ---------------------------------------------------------------------------
# Exact expectation
# ---------------------------------------------------------------------------


def _leaf_law(kind: str, tree: TreeMetric, count: np.ndarray, a: int) -> list[tuple[int, float]]:
    # probability that the chosen server sits at each leaf under anchor a
    out = []
    stack = [(a, 1.0)]
    total = count[a]
    while stack:
        v, p = stack.pop()
        kids = [c for c in tree.children[v] if count[c] > 0]
        if not kids:
            out.append((v, count[v] / total if kind == "mnp" else p))
        elif kind == "mnp":
            stack.extend((c, 1.0) for c in kids)
        else:
            stack.extend((c, p / len(kids)) for c in kids)
    return out


def exact_expected_cost(policy_kind: str, tree: TreeMetric, S, requests, budget: int = 10**6) -> float:
    """Exact expected total cost by enumerating every random choice.

    ``policy_kind`` is ``"mnp"`` or ``"random-subtree"``. Servers at the same
    leaf are interchangeable, so states are per-leaf free counts plus the
    arrival index. More than ``budget`` distinct states aborts the run.
    """
    if policy_kind not in ("mnp", "random-subtree"):
        raise ValueError(f"unknown policy kind {policy_kind!r}")
    S = np.asarray(S, dtype=np.int64)
    R = np.asarray(requests, dtype=np.int64)
    if len(S) < len(R):
        raise ValueError("more requests than servers")
    leaves = tree.leaves
    pos = {int(v): i for i, v in enumerate(leaves)}
    for v in np.concatenate([S, R]):
        if int(v) not in pos:
            raise ValueError(f"node {v} is not a leaf")
    start = np.zeros(len(leaves), dtype=np.int64)
    for v in S:
        start[pos[int(v)]] += 1
    dist = tree.dist(leaves[:, None], leaves[None, :])
    memo: dict[tuple, float] = {}
    visited = [0]

    def value(counts: tuple, t: int) -> float:
        if t == len(R):
            return 0.0
        key = (counts, t)
        if key in memo:
            return memo[key]
        visited[0] += 1
        if visited[0] > budget:
            raise EnumerationBudgetExceeded(f"more than {budget} states")
        per_node = np.zeros(tree.size)
        per_node[leaves] = counts
        per_node = tree.subtree_sums(per_node)
        v = int(R[t])
        while per_node[v] == 0:
            v = int(tree.parent[v])
        rpos = pos[int(R[t])]
        acc = 0.0
        for leaf, p in _leaf_law(policy_kind, tree, per_node, v):
            i = pos[leaf]
            nxt = list(counts)
            nxt[i] -= 1
            acc += p * (dist[rpos, i] + value(tuple(nxt), t + 1))
        memo[key] = acc
        return acc

    return value(tuple(int(c) for c in start), 0)
