"""Metric spaces, tree metrics and request distributions.

Point sets are plain numpy arrays: ``(k, d)`` float arrays for the unit
cube, ``(k,)`` integer node indices for tree metrics. A single point is a
length-``d`` vector or an integer node index.
"""
from __future__ import annotations

import fractions
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.spatial.distance import cdist

TIE_TOL = 1e-9


class ContractViolation(RuntimeError):
    """Raised when a component breaks a stated contract at runtime."""


def as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def child_seed(seed: int, *keys: int) -> np.random.SeedSequence:
    """Independent stream for ``keys`` under a master seed.

    Streams depend only on ``(seed, keys)``, never on scheduling order.
    """
    return np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in keys))


# ---------------------------------------------------------------------------
# Trees
# ---------------------------------------------------------------------------


class TreeMetric:
    """Rooted tree with positive edge lengths and shortest-path distances.

    Nodes are addressed by integer index ``0..V-1``; ``labels`` keeps the
    external identifiers. Distances use depth arrays plus binary-lifting LCA.
    """

    def __init__(self, parent: Sequence[int], length: Sequence[float], labels: Optional[Sequence[str]] = None):
        parent = np.asarray(parent, dtype=np.int64)
        length = np.asarray(length, dtype=float)
        V = parent.size
        if V == 0:
            raise ValueError("tree must have at least one node")
        if length.shape != parent.shape:
            raise ValueError("parent and length arrays differ in size")
        roots = np.flatnonzero(parent < 0)
        if roots.size != 1:
            raise ValueError(f"tree needs exactly one root, found {roots.size}")
        if np.any(parent >= V):
            raise ValueError("parent index out of range")
        nonroot = parent >= 0
        if np.any(length[nonroot] <= 0):
            raise ValueError("edge lengths must be positive")
        self.parent = parent
        self.length = np.where(nonroot, length, 0.0)
        self.root = int(roots[0])
        self.labels = [str(i) for i in range(V)] if labels is None else [str(x) for x in labels]
        self.index = {lab: i for i, lab in enumerate(self.labels)}
        if len(self.index) != V:
            raise ValueError("duplicate node labels")

        children: list[list[int]] = [[] for _ in range(V)]
        for v in range(V):
            if parent[v] >= 0:
                children[parent[v]].append(v)
        self.children = children

        # BFS order; detects cycles / disconnected parts
        order = [self.root]
        level = np.zeros(V, dtype=np.int64)
        depth = np.zeros(V)
        for u in order:
            for c in children[u]:
                level[c] = level[u] + 1
                depth[c] = depth[u] + self.length[c]
                order.append(c)
        if len(order) != V:
            raise ValueError("parent links do not form a connected tree")
        self.order = np.asarray(order, dtype=np.int64)
        self.level = level
        self.depth = depth

        LOG = max(1, int(level.max()).bit_length())
        up = np.empty((LOG, V), dtype=np.int64)
        up[0] = np.where(nonroot, parent, self.root)
        for k in range(1, LOG):
            up[k] = up[k - 1][up[k - 1]]
        self._up = up

    @property
    def size(self) -> int:
        return self.parent.size

    def is_leaf(self, v: int) -> bool:
        return not self.children[v]

    @property
    def leaves(self) -> np.ndarray:
        return np.asarray([v for v in range(self.size) if not self.children[v]], dtype=np.int64)

    def check_nodes(self, nodes) -> np.ndarray:
        nodes = np.asarray(nodes)
        if nodes.size and (not np.issubdtype(nodes.dtype, np.integer) or nodes.min() < 0 or nodes.max() >= self.size):
            raise KeyError(f"unknown node id in {nodes!r}")
        return nodes.astype(np.int64)

    def lca(self, u, v) -> np.ndarray:
        u = np.array(u, dtype=np.int64, copy=True)
        v = np.array(v, dtype=np.int64, copy=True)
        u, v = np.broadcast_arrays(u, v)
        u, v = u.copy(), v.copy()
        swap = self.level[u] < self.level[v]
        u[swap], v[swap] = v[swap], u[swap]
        diff = self.level[u] - self.level[v]
        for k in range(self._up.shape[0]):
            bit = ((diff >> k) & 1).astype(bool)
            u[bit] = self._up[k][u[bit]]
        for k in range(self._up.shape[0] - 1, -1, -1):
            a, b = self._up[k][u], self._up[k][v]
            move = a != b
            u[move], v[move] = a[move], b[move]
        return np.where(u == v, u, self._up[0][u])

    def dist(self, u, v):
        u = self.check_nodes(u)
        v = self.check_nodes(v)
        w = self.lca(u, v)
        out = (self.depth[u] - self.depth[w]) + (self.depth[v] - self.depth[w])
        return out

    def subtree_sums(self, values) -> np.ndarray:
        """Sum of ``values`` over each node's subtree."""
        acc = np.array(values, dtype=float, copy=True)
        for v in self.order[::-1]:
            p = self.parent[v]
            if p >= 0:
                acc[p] += acc[v]
        return acc

    def to_text(self, with_levels: bool = False) -> str:
        lines = []
        for v in self.order:
            p = self.parent[v]
            line = f"{self.labels[v]} {self.labels[p] if p >= 0 else -1} {float(self.length[v])!r}"
            if with_levels and hasattr(self, "hst_level"):
                line += f" # level {int(self.hst_level[v])}"
            lines.append(line)
        return "\n".join(lines) + "\n"


def parse_tree(text: str) -> TreeMetric:
    """Parse ``id parent_id edge_length`` lines; the root line is ``id -1 0``.

    Blank lines and ``#`` comments are ignored. A tree whose comments carry
    ``# level L`` on every line is returned as an :class:`HSTree`.
    """
    rows = []
    levels = {}
    for raw in text.splitlines():
        body, _, comment = raw.partition("#")
        body = body.strip()
        if not body:
            continue
        parts = body.split()
        if len(parts) != 3:
            raise ValueError(f"bad tree line: {raw!r}")
        rows.append((parts[0], parts[1], float(parts[2])))
        c = comment.split()
        if len(c) == 2 and c[0] == "level":
            levels[parts[0]] = int(c[1])
    labels = [r[0] for r in rows]
    index = {lab: i for i, lab in enumerate(labels)}
    parent, length = [], []
    for lab, par, w in rows:
        if par == "-1":
            parent.append(-1)
        elif par not in index:
            raise ValueError(f"node {lab!r} has unknown parent {par!r}")
        else:
            parent.append(index[par])
        length.append(w)
    if levels and len(levels) == len(rows):
        return HSTree(parent, length, labels, level=[levels[lab] for lab in labels])
    return TreeMetric(parent, length, labels)


def load_tree(path) -> TreeMetric:
    with open(path) as fh:
        return parse_tree(fh.read())


class HSTree(TreeMetric):
    """Tree metric in which every node is equidistant from all leaves below it."""

    def __init__(self, parent, length, labels=None, level=None):
        super().__init__(parent, length, labels)
        leaves = self.leaves
        leaf_depth = self.depth[leaves]
        if not np.all(leaf_depth == leaf_depth[0]):
            raise ValueError("HST property violated: leaves at unequal depth from the root")
        # per-node level counted from the leaves (leaves are level 0)
        if level is None:
            level = self.level.max() - self.level
        self.hst_level = np.asarray(level, dtype=np.int64)
        self.height = self.depth[leaves[0]] - self.depth  # node-to-any-leaf distance


def check_hst_property(tree: TreeMetric) -> bool:
    """Exact check that each subtree root is equidistant to its leaves."""
    V = tree.size
    lo = np.full(V, np.inf)
    hi = np.full(V, -np.inf)
    for v in tree.order[::-1]:
        if tree.is_leaf(v):
            lo[v] = hi[v] = tree.depth[v]
        p = tree.parent[v]
        if p >= 0:
            lo[p] = min(lo[p], lo[v])
            hi[p] = max(hi[p], hi[v])
    return bool(np.all(lo == hi))


# ---------------------------------------------------------------------------
# Metric spaces
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MetricSpace:
    kind: str  # "euclidean" | "euclidean-power" | "tree"
    dim: int = 1
    p: float = 1.0
    tree: Optional[TreeMetric] = None
    eta: float = 1.0

    def __post_init__(self):
        if self.kind not in ("euclidean", "euclidean-power", "tree"):
            raise ValueError(f"unknown space kind {self.kind!r}")
        if self.kind == "tree" and self.tree is None:
            raise ValueError("tree space needs a TreeMetric")
        if self.kind != "tree" and self.dim < 1:
            raise ValueError("dimension must be >= 1")
        if self.p < 1:
            raise ValueError("exponent p must be >= 1")

    @property
    def is_tree(self) -> bool:
        return self.kind == "tree"

    def as_points(self, X) -> np.ndarray:
        """Normalise a point set to the internal array layout."""
        if self.is_tree:
            return self.tree.check_nodes(np.atleast_1d(np.asarray(X)))
        X = np.asarray(X, dtype=float)
        if X.ndim == 0 or (X.ndim == 1 and self.dim != 1 and X.size == self.dim):
            X = X.reshape(1, -1)
        elif X.ndim == 1:
            X = X.reshape(-1, 1) if self.dim == 1 else X.reshape(1, -1)
        if X.shape[1] != self.dim:
            raise ValueError(f"dimension mismatch: got {X.shape[1]}, space has {self.dim}")
        return X

    def pairwise(self, X, Y) -> np.ndarray:
        """Cost matrix ``C[i, j] = delta(X[i], Y[j])``."""
        X = self.as_points(X)
        Y = self.as_points(Y)
        if self.is_tree:
            return self.tree.dist(X[:, None], Y[None, :])
        if X.shape[0] == 0 or Y.shape[0] == 0:
            return np.zeros((X.shape[0], Y.shape[0]))
        C = cdist(X, Y)
        if self.kind == "euclidean-power" and self.p != 1.0:
            C = C ** self.p
        return C

    def dist_to(self, X, y) -> np.ndarray:
        """Costs from every point in ``X`` to the single point ``y``."""
        X = self.as_points(X)
        if self.is_tree:
            return self.tree.dist(X, int(y))
        y = np.asarray(y, dtype=float).reshape(-1)
        if y.size != self.dim:
            raise ValueError(f"dimension mismatch: got {y.size}, space has {self.dim}")
        diff = X - y
        if self.dim == 1:
            c = np.abs(diff[:, 0])
        else:
            c = np.sqrt(np.einsum("ij,ij->i", diff, diff))
        if self.kind == "euclidean-power" and self.p != 1.0:
            c = c ** self.p
        return c

    def uniform(self, k: int, rng) -> np.ndarray:
        rng = as_rng(rng)
        if self.is_tree:
            nodes = self.tree.leaves if isinstance(self.tree, HSTree) else np.arange(self.tree.size)
            return rng.choice(nodes, size=k)
        return rng.random((k, self.dim))


def euclidean(d: int) -> MetricSpace:
    return MetricSpace("euclidean", dim=d)


def euclidean_power(d: int, p: float) -> MetricSpace:
    return MetricSpace("euclidean-power", dim=d, p=float(p), eta=2.0 ** (p - 1.0))


def tree_space(tree: TreeMetric) -> MetricSpace:
    return MetricSpace("tree", dim=1, tree=tree)


def point_dist(space: MetricSpace, x, y) -> float:
    """Cost between two single points."""
    if space.is_tree:
        return float(space.tree.dist(int(x), int(y)))
    x = np.asarray(x, dtype=float).reshape(-1)
    y = np.asarray(y, dtype=float).reshape(-1)
    if x.size != space.dim or y.size != space.dim:
        raise ValueError(f"dimension mismatch for a {space.dim}-dimensional space")
    c = float(np.sqrt(np.sum((x - y) ** 2)))
    return c ** space.p if space.kind == "euclidean-power" else c


# ---------------------------------------------------------------------------
# Approximate triangle inequality
# ---------------------------------------------------------------------------


@dataclass
class TriangleReport:
    eta: float
    checked: int
    skipped: int
    violations: int
    worst_ratio: float
    worst_triple: Optional[tuple] = None
    violating_triple: Optional[tuple] = None


def triangle_ratios(space: MetricSpace, X, Y, Z) -> np.ndarray:
    """``delta(x,z) / (delta(x,y) + delta(y,z))`` row-wise; NaN where the denominator is 0."""
    if space.is_tree:
        xz = space.tree.dist(X, Z)
        xy = space.tree.dist(X, Y)
        yz = space.tree.dist(Y, Z)
    else:
        def d(a, b):
            c = np.sqrt(np.sum((a - b) ** 2, axis=1))
            return c ** space.p if space.kind == "euclidean-power" else c
        xz, xy, yz = d(X, Z), d(X, Y), d(Y, Z)
    den = xy + yz
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(den > 0, xz / den, np.nan)


def verify_approx_triangle(space: MetricSpace, triples: int, seed, eta: Optional[float] = None,
                           batch: int = 200_000) -> TriangleReport:
    """Sample random triples and test ``delta(x,z) <= eta * (delta(x,y) + delta(y,z))``.

    ``eta`` defaults to the space's declared parameter. Triples with a zero
    denominator are skipped and counted.
    """
    if triples < 1:
        raise ValueError("need at least one triple")
    eta = space.eta if eta is None else float(eta)
    rng = as_rng(seed)
    checked = skipped = violations = 0
    worst = -np.inf
    worst_triple = violating = None
    left = triples
    while left > 0:
        k = min(batch, left)
        left -= k
        X, Y, Z = (space.uniform(k, rng) for _ in range(3))
        ratio = triangle_ratios(space, X, Y, Z)
        ok = ~np.isnan(ratio)
        skipped += int((~ok).sum())
        checked += int(ok.sum())
        if not ok.any():
            continue
        r = np.where(ok, ratio, -np.inf)
        i = int(np.argmax(r))
        if r[i] > worst:
            worst = float(r[i])
            worst_triple = (X[i], Y[i], Z[i])
        bad = np.flatnonzero(ok & (ratio > eta))
        violations += bad.size
        if bad.size and violating is None:
            j = bad[0]
            violating = (X[j], Y[j], Z[j])
    return TriangleReport(eta, checked, skipped, violations, worst, worst_triple, violating)


def certify_violation(space: MetricSpace, triple, eta) -> bool:
    """Exact rational re-check of a violating triple.

    Floats are converted to exact rationals; with an even integer exponent
    every cost is then a rational number, so the comparison has no rounding.
    """
    if space.kind != "euclidean-power" or float(space.p) != int(space.p) or int(space.p) % 2:
        raise ValueError("exact certification needs an even integer exponent")
    half = int(space.p) // 2
    x, y, z = ([fractions.Fraction(float(c)) for c in np.atleast_1d(pt)] for pt in triple)

    def cost(a, b):
        return sum((ai - bi) ** 2 for ai, bi in zip(a, b)) ** half

    return cost(x, z) > fractions.Fraction(eta) * (cost(x, y) + cost(y, z))


# ---------------------------------------------------------------------------
# Distributions
# ---------------------------------------------------------------------------


def _density_half(X):
    return np.where(X[:, 0] <= 0.5, 2.0, 0.0)


def _density_ramp(X):
    return 2.0 * X[:, 0]


# named bounded densities usable from config files; each has beta = 2
DENSITIES: dict[str, tuple[Callable, float]] = {
    "half": (_density_half, 2.0),
    "ramp": (_density_ramp, 2.0),
}


@dataclass(frozen=True)
class Distribution:
    """Request distribution with sampling access.

    kinds: ``uniform`` (unit cube, or tree leaves/nodes), ``bounded-density``
    (rejection sampling against ``beta``), ``discrete-nodes`` (tree nodes with
    integer weights), ``server-locations`` (empirical law of a server set).
    """
    kind: str
    beta: Optional[float] = None
    density: Optional[Callable] = None
    support: Optional[np.ndarray] = None
    weights: Optional[np.ndarray] = None
    name: str = ""

    def __post_init__(self):
        if self.kind not in ("uniform", "bounded-density", "discrete-nodes", "server-locations"):
            raise ValueError(f"unknown distribution kind {self.kind!r}")
        if self.kind == "bounded-density":
            if self.density is None or self.beta is None or not np.isfinite(self.beta) or self.beta <= 0:
                raise ValueError("bounded-density needs a density evaluator and finite beta > 0")
        if self.kind in ("discrete-nodes", "server-locations"):
            w = np.asarray(self.weights)
            if self.support is None or w.size != len(self.support):
                raise ValueError("discrete distribution needs matching support and weights")
            if np.any(w < 0) or w.sum() <= 0:
                raise ValueError("weights must be nonnegative with positive total")

    @property
    def n(self) -> int:
        return int(np.sum(self.weights)) if self.weights is not None else 0

    def masses(self) -> np.ndarray:
        w = np.asarray(self.weights, dtype=float)
        return w / w.sum()


def uniform() -> Distribution:
    return Distribution("uniform", beta=1.0, name="uniform")


def bounded_density(density: Callable, beta: float, name: str = "") -> Distribution:
    return Distribution("bounded-density", beta=float(beta), density=density, name=name)


def named_density(name: str) -> Distribution:
    if name == "uniform":
        return uniform()
    if name not in DENSITIES:
        raise KeyError(f"unknown density {name!r}; known: {sorted(DENSITIES)}")
    f, beta = DENSITIES[name]
    return bounded_density(f, beta, name=name)


def discrete_nodes(nodes, weights) -> Distribution:
    weights = np.asarray(weights, dtype=np.int64)
    return Distribution("discrete-nodes", support=np.asarray(nodes, dtype=np.int64), weights=weights,
                        name="discrete-nodes")


def make_server_uniform(S) -> Distribution:
    """Empirical distribution of the server locations, multiplicities included."""
    S = np.asarray(S)
    if S.shape[0] == 0:
        raise ValueError("server set is empty")
    if S.ndim == 1:
        support, counts = np.unique(S, return_counts=True)
    else:
        support, counts = np.unique(S, axis=0, return_counts=True)
    return Distribution("server-locations", support=support, weights=counts.astype(np.int64),
                        name="server-locations")


def sample(dist: Distribution, space: MetricSpace, k: int, seed) -> np.ndarray:
    """Draw ``k`` i.i.d. points; deterministic for a fixed seed."""
    if k < 0:
        raise ValueError("k must be nonnegative")
    rng = as_rng(seed)
    if dist.kind == "uniform":
        return space.uniform(k, rng)
    if dist.kind in ("discrete-nodes", "server-locations"):
        idx = rng.choice(len(dist.support), size=k, p=dist.masses())
        return np.asarray(dist.support)[idx]
    if space.is_tree:
        raise ValueError("bounded-density distributions live on the unit cube")
    out = np.empty((k, space.dim))
    filled = 0
    while filled < k:
        want = max(16, int(1.2 * (k - filled) * dist.beta))
        X = rng.random((want, space.dim))
        f = np.asarray(dist.density(X), dtype=float)
        if np.any(f > dist.beta):
            raise ContractViolation(f"density exceeds declared beta={dist.beta} (max {f.max()})")
        keep = X[rng.random(want) * dist.beta <= f]
        take = min(keep.shape[0], k - filled)
        out[filled:filled + take] = keep[:take]
        filled += take
    return out
