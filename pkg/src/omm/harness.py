"""Seeded experiment runner, adversarial server families, fits and check suites."""
from __future__ import annotations

import configparser
import csv
import io
import json
import math
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .hst import (EnumerationBudgetExceeded, build_hst, exact_expected_cost, mnp_policy,
                  random_hst, random_subtree_policy)
from .online import (GreedyPolicy, OnlinePolicy, UniformTieBreak, hierarchical_greedy_policy,
                     run_online, soar_policy)
from .optmatch import mean_se, opt_offline
from .reduce import wrap_reduction
from .space import (Distribution, MetricSpace, as_rng, child_seed, euclidean, euclidean_power,
                    load_tree, named_density, sample, tree_space)

CSV_HEADER = ["policy", "n", "m", "trial", "cost", "opt", "ratio", "regret"]
SCHEMA_VERSION = 1
ADVERSARIES = ("corner-cluster", "half-cube", "grid", "duplicate-point", "uniform-control")
BASE_POLICIES = ("greedy-uniform", "soar", "hgreedy", "mnp-hst", "random-subtree")
TREE_POLICIES = ("mnp-hst", "random-subtree")


class ConfigError(ValueError):
    pass


def key_stream(text: str) -> int:
    return zlib.crc32(text.encode())


# ---------------------------------------------------------------------------
# Config
# ---------------------------------------------------------------------------


@dataclass
class ExperimentConfig:
    space: str = "euclidean"
    d: int = 1
    p: float = 1.0
    tree: Optional[str] = None
    dist: str = "uniform"
    policies: list = field(default_factory=lambda: ["greedy-uniform"])
    n_grid: list = field(default_factory=lambda: [32, 64, 128, 256, 512, 1024])
    c: float = 1.0
    adversary: str = "uniform-control"
    trials: int = 200
    seed: int = 7
    csv: str = "trials.csv"
    summary: str = "summary.json"
    embed: str = "none"
    workers: int = 1

    def validate(self) -> "ExperimentConfig":
        if self.space not in ("euclidean", "euclidean-power", "tree"):
            raise ConfigError(f"unknown space kind {self.space!r}")
        if self.space == "tree" and not self.tree:
            raise ConfigError("tree space needs [space] tree = <file>")
        if self.d < 1:
            raise ConfigError("d must be >= 1")
        if self.p < 1:
            raise ConfigError("p must be >= 1")
        if not self.n_grid or any(b <= a for a, b in zip(self.n_grid, self.n_grid[1:])):
            raise ConfigError("n_grid must be nonempty and strictly increasing")
        if self.n_grid[0] < 1:
            raise ConfigError("n values must be >= 1")
        if not 1 <= self.c <= 4:
            raise ConfigError("c must lie in [1, 4]")
        if self.adversary not in ADVERSARIES:
            raise ConfigError(f"unknown adversary {self.adversary!r}; known: {', '.join(ADVERSARIES)}")
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if self.embed not in ("none", "hst"):
            raise ConfigError("embed must be 'none' or 'hst'")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if not self.policies:
            raise ConfigError("no policies given")
        for key in self.policies:
            check_policy_key(key)
            if self.embed == "hst" and key.startswith("reduce:") and key[7:] in TREE_POLICIES:
                raise ConfigError(f"{key} cannot be combined with --embed hst")
        try:
            self.distribution()
        except (KeyError, ValueError) as e:
            raise ConfigError(str(e)) from None
        return self

    def make_space(self) -> MetricSpace:
        if self.space == "euclidean":
            return euclidean(self.d)
        if self.space == "euclidean-power":
            return euclidean_power(self.d, self.p)
        return tree_space(load_tree(self.tree))

    def distribution(self) -> Distribution:
        return named_density(self.dist)

    def m_of(self, n: int) -> int:
        return math.ceil(self.c * n)


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.replace(" ", "").split(",") if x]


def load_config(path) -> ExperimentConfig:
    """Read an INI file with sections [space], [distribution], [policies], [experiment]."""
    cp = configparser.ConfigParser()
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except (OSError, configparser.Error) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    known = {"space", "distribution", "policies", "experiment"}
    extra = set(cp.sections()) - known
    if extra:
        raise ConfigError(f"unknown sections: {sorted(extra)}")
    cfg = ExperimentConfig()
    try:
        if cp.has_section("space"):
            s = cp["space"]
            cfg.space = s.get("kind", cfg.space)
            cfg.d = s.getint("d", cfg.d)
            cfg.p = s.getfloat("p", cfg.p)
            cfg.tree = s.get("tree", cfg.tree)
            if cfg.tree and not Path(cfg.tree).is_absolute():
                cfg.tree = str(Path(path).parent / cfg.tree)
        if cp.has_section("distribution"):
            cfg.dist = cp["distribution"].get("name", cfg.dist)
        if cp.has_section("policies"):
            keys = cp["policies"].get("keys", "")
            cfg.policies = [k.strip() for k in keys.split(",") if k.strip()]
        if cp.has_section("experiment"):
            e = cp["experiment"]
            if "n_grid" in e:
                cfg.n_grid = _ints(e["n_grid"])
            cfg.c = e.getfloat("c", cfg.c)
            cfg.adversary = e.get("adversary", cfg.adversary)
            cfg.trials = e.getint("trials", cfg.trials)
            cfg.seed = e.getint("seed", cfg.seed)
            cfg.embed = e.get("embed", cfg.embed)
            cfg.workers = e.getint("workers", cfg.workers)
            base = Path(path).parent
            cfg.csv = str(base / e.get("csv", cfg.csv))
            cfg.summary = str(base / e.get("summary", cfg.summary))
    except ValueError as e:
        raise ConfigError(str(e)) from None
    return cfg.validate()


# ---------------------------------------------------------------------------
# Instances and policies
# ---------------------------------------------------------------------------


def generate_adversarial(name: str, m: int, space: MetricSpace, seed) -> np.ndarray:
    """Server families used as adversarial probes (not certified worst cases)."""
    rng = as_rng(seed)
    if name not in ADVERSARIES:
        raise ValueError(f"unknown adversary {name!r}; known: {', '.join(ADVERSARIES)}")
    if space.is_tree:
        leaves = space.tree.leaves
        if name == "uniform-control":
            return rng.choice(leaves, size=m)
        if name == "duplicate-point":
            return np.full(m, leaves[0])
        raise ValueError(f"adversary {name!r} is defined on the unit cube only")
    d = space.dim
    if name == "uniform-control":
        return rng.random((m, d))
    if name == "half-cube":
        X = rng.random((m, d))
        X[:, 0] *= 0.5
        return X
    if name == "duplicate-point":
        return np.full((m, d), 0.5)
    if name == "corner-cluster":
        g = np.abs(rng.standard_normal((m, d)))
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        return 0.05 * g * rng.random((m, 1)) ** (1.0 / d)
    # grid: cell midpoints of the smallest k^d lattice holding m points, first m in row-major order
    k = 1
    while k ** d < m:
        k += 1
    axes = (np.arange(k) + 0.5) / k
    mesh = np.stack(np.meshgrid(*([axes] * d), indexing="ij"), axis=-1).reshape(-1, d)
    return mesh[:m].copy()


def check_policy_key(key: str) -> None:
    inner = key[7:] if key.startswith("reduce:") else key
    if inner not in BASE_POLICIES:
        raise ConfigError(f"unknown policy key {key!r}")


def make_policy(key: str, dist: Distribution) -> OnlinePolicy:
    check_policy_key(key)
    if key.startswith("reduce:"):
        return wrap_reduction(make_policy(key[7:], dist), dist)
    if key == "greedy-uniform":
        return GreedyPolicy(UniformTieBreak())
    if key == "soar":
        return soar_policy(dist)
    if key == "hgreedy":
        return hierarchical_greedy_policy()
    if key == "mnp-hst":
        return mnp_policy()
    return random_subtree_policy()


def run_policy(key: str, space: MetricSpace, dist: Distribution, S, R, seed, embed: str = "none") -> float:
    """Total cost of one online run, always measured in ``space``."""
    if key in TREE_POLICIES and not space.is_tree:
        if embed != "hst":
            raise ValueError(f"{key} needs a tree space; use embed = hst")
        rng = as_rng(seed)
        emb = build_hst(np.concatenate([S, R]), space, rng)
        leaves = emb.leaf_of
        rec = run_online(make_policy(key, dist), emb.space, leaves[:len(S)], leaves[len(S):], seed=rng)
        return math.fsum(space.dist_to(S[rec.chosen[t]:rec.chosen[t] + 1], R[t])[0] for t in range(len(R)))
    return run_online(make_policy(key, dist), space, S, R, seed=seed).total


# ---------------------------------------------------------------------------
# Runner
# ---------------------------------------------------------------------------


def _trial(cfg: ExperimentConfig, n: int, k: int, skip: frozenset) -> tuple:
    space = cfg.make_space()
    dist = cfg.distribution()
    m = cfg.m_of(n)
    rng = np.random.default_rng(child_seed(cfg.seed, n, k))
    S = generate_adversarial(cfg.adversary, m, space, rng)
    R = sample(dist, space, n, rng)
    opt = opt_offline(space, S, R).cost
    out = {}
    for key in cfg.policies:
        if key in skip:
            continue
        try:
            cost = run_policy(key, space, dist, S, R, child_seed(cfg.seed, n, k, key_stream(key)), cfg.embed)
            out[key] = (cost, None)
        except Exception as e:  # noqa: BLE001  recorded per cell
            out[key] = (None, f"{type(e).__name__}: {e}")
    return n, k, m, opt, out


def _row(key, n, m, k, cost, opt) -> dict:
    if opt > 0:
        ratio = cost / opt
    else:
        ratio = 1.0 if cost == 0 else math.inf
    return {"policy": key, "n": n, "m": m, "trial": k, "cost": cost, "opt": opt,
            "ratio": ratio, "regret": (cost - opt) / n}


def run_experiment(cfg: ExperimentConfig, write: bool = True) -> dict:
    """Run every (policy, n) cell; returns the summary and writes CSV + JSON.

    Instances are shared across policies: trial ``k`` at size ``n`` draws its
    servers and requests from ``child_seed(seed, n, k)``, and each policy's
    internal randomness from a stream keyed additionally by the policy name.
    """
    cfg.validate()
    rows: list[dict] = []
    errors: dict[tuple, str] = {}
    for n in cfg.n_grid:
        skip: set = set()
        units = range(cfg.trials)
        if cfg.workers > 1:
            with ProcessPoolExecutor(cfg.workers) as ex:
                results = list(ex.map(_trial, [cfg] * cfg.trials, [n] * cfg.trials, units,
                                      [frozenset()] * cfg.trials))
        else:
            results = []
            for k in units:
                res = _trial(cfg, n, k, frozenset(skip))
                results.append(res)
                skip |= {key for key, (c, err) in res[4].items() if err}
        for _, k, m, opt, out in sorted(results, key=lambda r: r[1]):
            for key, (cost, err) in out.items():
                if err and (key, n) not in errors:
                    errors[(key, n)] = err
                elif err is None and (key, n) not in errors:
                    rows.append(_row(key, n, m, k, cost, opt))
    rows = [r for r in rows if (r["policy"], r["n"]) not in errors]
    order = {key: i for i, key in enumerate(cfg.policies)}
    rows.sort(key=lambda r: (order[r["policy"]], r["n"], r["trial"]))
    summary = summarize(cfg, rows, errors)
    if write:
        Path(cfg.csv).parent.mkdir(parents=True, exist_ok=True)
        with open(cfg.csv, "w", newline="") as fh:
            fh.write(rows_to_csv(rows))
        with open(cfg.summary, "w") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return summary


def rows_to_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in rows:
        w.writerow([r["policy"], r["n"], r["m"], r["trial"], repr(float(r["cost"])), repr(float(r["opt"])),
                    repr(float(r["ratio"])), repr(float(r["regret"]))])
    return buf.getvalue()


def read_rows(path) -> list[dict]:
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        if rd.fieldnames != CSV_HEADER:
            raise ValueError(f"unexpected CSV header {rd.fieldnames}")
        out = []
        for r in rd:
            out.append({"policy": r["policy"], "n": int(r["n"]), "m": int(r["m"]), "trial": int(r["trial"]),
                        **{f: float(r[f]) for f in ("cost", "opt", "ratio", "regret")}})
    return out


def summarize(cfg: ExperimentConfig, rows: Sequence[dict], errors: dict) -> dict:
    cells = []
    for key in cfg.policies:
        for n in cfg.n_grid:
            sel = [r for r in rows if r["policy"] == key and r["n"] == n]
            cell = {"policy": key, "n": n, "m": cfg.m_of(n), "trials": len(sel),
                    "error": errors.get((key, n))}
            for f in ("cost", "opt", "ratio", "regret"):
                if sel:
                    mu, se = mean_se([r[f] for r in sel])
                    cell[f] = {"mean": mu, "se": se}
            cells.append(cell)
    fits = {}
    for key in cfg.policies:
        sel = [r for r in rows if r["policy"] == key]
        for f in ("cost", "ratio", "regret"):
            try:
                fit = fit_scaling(sel, f, bootstrap=1000, seed=child_seed(cfg.seed, key_stream(key + f)))
                fits.setdefault(key, {})[f] = asdict(fit)
            except ValueError as e:
                fits.setdefault(key, {})[f] = {"error": str(e)}
    conf = asdict(cfg)
    conf.pop("workers")
    return {"schema": SCHEMA_VERSION, "config": conf, "cells": cells, "fits": fits,
            "errors": [{"policy": k, "n": n, "error": e} for (k, n), e in sorted(errors.items())]}


# ---------------------------------------------------------------------------
# Scaling fits
# ---------------------------------------------------------------------------


@dataclass
class ScalingFit:
    slope: float
    intercept: float
    r2: float
    points: int
    ci_low: Optional[float] = None
    ci_high: Optional[float] = None


def fit_loglog(ns, means) -> ScalingFit:
    """Least-squares line through ``(log n, log mean)``; nonpositive means dropped."""
    ns = np.asarray(ns, dtype=float)
    means = np.asarray(means, dtype=float)
    keep = means > 0
    if keep.sum() < 4:
        raise ValueError(f"need at least 4 positive points, have {int(keep.sum())}")
    x, y = np.log(ns[keep]), np.log(means[keep])
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss = np.sum((y - y.mean()) ** 2)
    r2 = 1.0 - np.sum(resid ** 2) / ss if ss > 0 else 1.0
    return ScalingFit(float(slope), float(intercept), float(r2), int(keep.sum()))


def fit_scaling(rows: Iterable[dict], field: str, bootstrap: int = 0, seed=0) -> ScalingFit:
    """Fit mean ``field`` against n; optional stratified bootstrap CI (95%) on the slope."""
    groups: dict[int, list[float]] = {}
    for r in rows:
        groups.setdefault(int(r["n"]), []).append(float(r[field]))
    ns = sorted(groups)
    data = [np.asarray(groups[n]) for n in ns]
    fit = fit_loglog(ns, [x.mean() for x in data])
    if bootstrap:
        rng = as_rng(seed)
        slopes = []
        for _ in range(bootstrap):
            means = [x[rng.integers(x.size, size=x.size)].mean() for x in data]
            try:
                slopes.append(fit_loglog(ns, means).slope)
            except ValueError:
                continue
        if slopes:
            fit.ci_low, fit.ci_high = (float(v) for v in np.percentile(slopes, [2.5, 97.5]))
    return fit


# ---------------------------------------------------------------------------
# Check suites
# ---------------------------------------------------------------------------


@dataclass
class NNResult:
    mean: float
    se: float
    trials: int
    lower_bound: float


def nn_lower_bound(n: int, d: int) -> float:
    """Volume bound: any n points in [0,1]^d leave ``E min_s |s - r| >= d/(d+1) (n V_d)^(-1/d)``."""
    vd = math.pi ** (d / 2) / math.gamma(d / 2 + 1)
    return d / (d + 1) * (n * vd) ** (-1.0 / d)


def nn_distance_check(S, dist: Distribution, trials: int, seed, space: Optional[MetricSpace] = None) -> NNResult:
    """Monte Carlo mean of the distance from ``r ~ dist`` to its nearest server."""
    S = np.asarray(S, dtype=float)
    if S.size == 0:
        raise ValueError("server set is empty")
    if space is None:
        space = euclidean(1 if S.ndim == 1 else S.shape[1])
    S = space.as_points(S)
    R = sample(dist, space, trials, seed)
    dmin, _ = cKDTree(S).query(R)
    if space.kind == "euclidean-power":
        dmin = dmin ** space.p
    mu, se = mean_se(dmin)
    return NNResult(mu, se, trials, nn_lower_bound(len(S), space.dim))


@dataclass
class MonotoneCase:
    seed: int
    kind: str
    tree: str
    S: list
    S_sub: list
    R: list
    cost_full: Optional[float]
    cost_sub: Optional[float]
    passed: bool
    skipped: bool = False
    note: str = ""


def monotone_instance(seed, max_r: int = 4, max_s: int = 7, max_leaves: int = 6):
    rng = as_rng(seed)
    tree = random_hst(int(rng.integers(2, max_leaves + 1)), rng)
    leaves = tree.leaves
    r = int(rng.integers(0, max_r + 1))
    s = int(rng.integers(max(r, 1), max_s + 1))
    S = rng.choice(leaves, size=s)
    R = rng.choice(leaves, size=r)
    k = int(rng.integers(r, s + 1))
    S_sub = S[np.sort(rng.choice(s, size=k, replace=False))]
    return tree, S, S_sub, R


def monotonicity_suite(policy_kind: str, sizes=(4, 7), seeds: Iterable[int] = range(500),
                       budget: int = 10**6) -> list[MonotoneCase]:
    """Exact check that removing servers never lowers the expected cost."""
    max_r, max_s = sizes
    out = []
    for sd in seeds:
        tree, S, S_sub, R = monotone_instance(child_seed(int(sd), key_stream(policy_kind)), max_r, max_s)
        case = MonotoneCase(int(sd), policy_kind, tree.to_text(with_levels=True), S.tolist(),
                            S_sub.tolist(), R.tolist(), None, None, False)
        try:
            case.cost_full = exact_expected_cost(policy_kind, tree, S, R, budget)
            case.cost_sub = exact_expected_cost(policy_kind, tree, S_sub, R, budget)
            case.passed = case.cost_full <= case.cost_sub + 1e-9
        except EnumerationBudgetExceeded as e:
            case.skipped, case.note = True, str(e)
        out.append(case)
    return out
