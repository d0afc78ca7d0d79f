import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import linear_sum_assignment

from omm.hst import random_hst
from omm.optmatch import (OptEstimate, assign, estimate_opt, opt_bruteforce, opt_offline, opt_tree_exact,
                          soar_cost_prediction, estimate_opt_curve, tree_opt_predictor)
from omm.space import TreeMetric, euclidean, euclidean_power, parse_tree, tree_space, uniform


def random_tree(rng, V):
    parent = [-1] + [int(rng.integers(0, i)) for i in range(1, V)]
    length = [0.0] + list(rng.integers(1, 5, size=V - 1).astype(float))
    return TreeMetric(parent, length)


def test_line_examples():
    m = opt_offline(euclidean(1), [0.0, 1.0], [0.1])
    assert m.server.tolist() == [0] and m.cost == pytest.approx(0.1)
    assert opt_offline(euclidean(1), [0.0, 1.0], [0.4, 0.6]).cost == pytest.approx(0.8)


def test_more_requests_than_servers():
    with pytest.raises(ValueError):
        opt_offline(euclidean(1), [0.5], [0.1, 0.2])


@pytest.mark.parametrize("space", [euclidean(1), euclidean(2), euclidean(3), euclidean_power(2, 2),
                                   euclidean_power(1, 3)])
def test_matches_bruteforce(space):
    rng = np.random.default_rng(1)
    for _ in range(60):
        m = int(rng.integers(1, 9))
        n = int(rng.integers(0, min(m, 7) + 1))
        S = rng.random((m, space.dim))
        R = rng.random((n, space.dim))
        got = opt_offline(space, S, R)
        assert got.cost == pytest.approx(opt_bruteforce(space, S, R), abs=1e-9)
        assert len(set(got.server.tolist())) == n


def test_matching_cost_equals_pair_sum():
    rng = np.random.default_rng(2)
    sp = euclidean(2)
    S, R = rng.random((9, 2)), rng.random((6, 2))
    m = opt_offline(sp, S, R)
    pairs = sum(np.linalg.norm(R[i] - S[j]) for i, j in m.pairs())
    assert m.cost == pytest.approx(pairs, abs=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 40), st.integers(0, 40), st.integers(0, 2**31))
def test_assign_agrees_with_scipy(n, extra, seed):
    rng = np.random.default_rng(seed)
    C = rng.random((n, n + extra))
    col = assign(C)
    r, c = linear_sum_assignment(C)
    assert C[np.arange(n), col].sum() == pytest.approx(C[r, c].sum(), abs=1e-9)


def test_adding_server_never_increases_cost():
    rng = np.random.default_rng(4)
    sp = euclidean(2)
    for _ in range(100):
        S, R = rng.random((6, 2)), rng.random((5, 2))
        more = np.vstack([S, rng.random((1, 2))])
        assert opt_offline(sp, more, R).cost <= opt_offline(sp, S, R).cost + 1e-12


def test_tree_exact_examples():
    t = parse_tree("l -1 0\nr l 1\n")
    assert opt_tree_exact(t, [1, 0], [0, 1]) == 1.0
    assert opt_tree_exact(t, [2, 3], [2, 3]) == 0.0
    with pytest.raises(ValueError):
        opt_tree_exact(t, [1, 0], [1, 1])


def test_tree_exact_equals_solver():
    rng = np.random.default_rng(5)
    for _ in range(100):
        t = random_tree(rng, int(rng.integers(2, 10)))
        k = int(rng.integers(1, 9))
        S = rng.integers(0, t.size, size=k)
        R = rng.integers(0, t.size, size=k)
        P = np.bincount(S, minlength=t.size)
        Q = np.bincount(R, minlength=t.size)
        assert opt_tree_exact(t, P, Q) == pytest.approx(opt_offline(tree_space(t), S, R).cost, abs=1e-9)


def test_tree_predictor_examples():
    t = parse_tree("l -1 0\nr l 1\n")
    assert tree_opt_predictor(t, [2, 2], 4) == pytest.approx(1.0)
    t2 = random_tree(np.random.default_rng(0), 6)
    for tt in (1, 3, 5):
        assert tree_opt_predictor(t2, [0, 0, 5, 0, 0, 0], tt) == 0.0
    with pytest.raises(ValueError):
        tree_opt_predictor(t, [2, 2], 5)


def test_tree_predictor_tracks_monte_carlo():
    # calibration run observed ratios in [0.88, 1.16]; band [0.6, 1.6]
    from omm.optmatch import opt_trials
    from omm.space import discrete_nodes
    rng = np.random.default_rng(8)
    for _ in range(3):
        t = random_hst(8, rng)
        L = t.leaves
        w = np.zeros(t.size, dtype=np.int64)
        w[L] = rng.integers(0, 20, size=L.size)
        w[L[0]] += 64
        dist = discrete_nodes(np.arange(t.size), w)
        for tt in (4, 16, 64):
            mc = opt_trials(tree_space(t), dist, tt, 200, 3).mean()
            pred = tree_opt_predictor(t, w, tt)
            assert 0.6 <= mc / pred <= 1.6


def test_estimate_opt_single_pair():
    est = estimate_opt(euclidean(1), uniform(), 1, 4000, 7)
    assert abs(est.mean - 1 / 3) <= 3 * est.se
    assert json.loads(est.to_json()) == {"mean": est.mean, "se": est.se, "trials": 4000, "seed": 7}
    assert est.csv_row(1).startswith("1,")


def test_estimate_opt_deterministic_and_fixed_servers():
    sp = euclidean(2)
    a = estimate_opt(sp, uniform(), 8, 20, 3)
    assert a == estimate_opt(sp, uniform(), 8, 20, 3)
    S = np.full((8, 2), 0.5)
    b = estimate_opt(sp, uniform(), 8, 20, 3, fixed_servers=S)
    assert b.mean > 0
    with pytest.raises(ValueError):
        estimate_opt(sp, uniform(), 9, 20, 3, fixed_servers=S)
    with pytest.raises(ValueError):
        estimate_opt(sp, uniform(), 9, 0, 3)


def test_soar_prediction_sums_curve():
    curve = [OptEstimate(float(t), 0.1, 10, 0) for t in range(1, 5)]
    total, se = soar_cost_prediction(curve)
    assert total == pytest.approx(4.0)
    assert se == pytest.approx(0.1 * np.sqrt(1 + 1 / 4 + 1 / 9 + 1 / 16))
    assert len(estimate_opt_curve(euclidean(1), uniform(), 3, 5, 1)) == 3
