"""Wrap a policy built for self-distributed servers into one for arbitrary servers.

At init the wrapper samples n phantom servers ``I ~ D^n``, fixes a minimum-cost
relay matching from ``I`` into the real servers ``S``, and runs the inner
policy on ``I``. Each inner choice ``i`` is forwarded to its relay partner.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .online import OnlinePolicy, run_online
from .optmatch import mean_se, opt_offline
from .space import Distribution, MetricSpace, as_rng, child_seed, sample

POINTWISE_TOL = 1e-9


class ReductionPolicy(OnlinePolicy):
    def __init__(self, inner: OnlinePolicy, dist: Distribution):
        self.inner = inner
        self.dist = dist
        self.name = f"reduce:{getattr(inner, 'name', 'inner')}"

    def init(self, space, servers, rng=None, n_requests=None):
        super().init(space, servers, rng, n_requests)
        n = self.n_requests
        self.phantoms = sample(self.dist, space, n, self.rng)
        relay = opt_offline(space, self.servers, self.phantoms)
        self.relay = relay.server
        self.relay_cost = relay.cost
        self.inner.init(space, self.phantoms, self.rng, n_requests=n)
        self.inner_costs: list[float] = []
        self.relay_costs: list[float] = []

    def _select(self, r) -> int:
        i = self.inner.serve(r)
        j = int(self.relay[i])
        sp = self.space
        self.inner_costs.append(float(sp.dist_to(self.phantoms[i:i + 1], r)[0]))
        self.relay_costs.append(float(sp.dist_to(self.servers[j:j + 1], self.phantoms[i])[0]))
        return j


def wrap_reduction(inner: OnlinePolicy, dist: Distribution) -> ReductionPolicy:
    return ReductionPolicy(inner, dist)


@dataclass
class ReductionReport:
    lhs: float
    rhs: float
    eta: float
    slack: float
    se: float
    passed: bool
    pointwise_fraction: float
    trials: int
    wrapped: np.ndarray = field(repr=False)
    opt: np.ndarray = field(repr=False)
    inner: np.ndarray = field(repr=False)


def reduction_trial(space: MetricSpace, S, dist: Distribution, inner: OnlinePolicy, n: int, seed):
    """One paired trial: wrapped cost, OPT(S, R), inner cost on (I, R), pointwise bound ok."""
    rng = as_rng(seed)
    R = sample(dist, space, n, rng)
    pol = wrap_reduction(inner, dist)
    rec = run_online(pol, space, S, R, seed=rng)
    opt = opt_offline(space, S, R).cost
    inner_cost = math.fsum(pol.inner_costs)
    bound = space.eta * (inner_cost + pol.relay_cost)
    ok = rec.total <= bound + POINTWISE_TOL * max(1.0, bound)
    per_request = np.all(rec.increments <= space.eta * (np.array(pol.inner_costs) + np.array(pol.relay_costs))
                         + POINTWISE_TOL)
    return rec.total, opt, inner_cost, bool(ok and per_request)


def reduction_bound_report(space: MetricSpace, S, dist: Distribution,
                           inner_factory: Callable[[], OnlinePolicy], n: int, trials: int,
                           seed) -> ReductionReport:
    """Monte Carlo check of ``E[wrapped] <= eta * (OPT(S,n) + cost_A(n))``.

    Each trial shares one request draw between the wrapped run and OPT(S, R);
    the inner run on the phantoms is itself a draw of the self-distribution
    cost. The standard error is that of the paired per-trial difference.
    """
    if trials < 30:
        raise ValueError("trials must be >= 30")
    S = space.as_points(S)
    if len(S) < n:
        raise ValueError(f"|S|={len(S)} < n={n}")
    w = np.empty(trials)
    o = np.empty(trials)
    a = np.empty(trials)
    ok = np.empty(trials, dtype=bool)
    for k in range(trials):
        w[k], o[k], a[k], ok[k] = reduction_trial(space, S, dist, inner_factory(), n,
                                                  child_seed(seed, k))
    eta = space.eta
    diff = w - eta * (o + a)
    _, se = mean_se(diff)
    lhs = float(w.mean())
    rhs = float(o.mean() + a.mean())
    slack = eta * rhs - lhs
    return ReductionReport(lhs, rhs, eta, slack, se, bool(slack + 3 * se >= 0),
                           float(ok.mean()), trials, w, o, a)
