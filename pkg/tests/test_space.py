import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from omm.space import (ContractViolation, HSTree, TreeMetric, bounded_density, certify_violation,
                       check_hst_property, discrete_nodes, euclidean, euclidean_power, make_server_uniform,
                       named_density, parse_tree, point_dist, sample, tree_space, uniform,
                       verify_approx_triangle)

unit = st.floats(0.0, 1.0, allow_nan=False)


def path_tree():
    # a - b - c with lengths 1, 2
    return parse_tree("a -1 0\nb a 1\nc b 2\n")


def test_point_dist_examples():
    assert point_dist(euclidean(2), (0, 0), (0.3, 0.4)) == pytest.approx(0.5)
    assert point_dist(euclidean_power(1, 2), 0, 0.5) == pytest.approx(0.25)
    t = path_tree()
    assert point_dist(tree_space(t), 0, 2) == 3.0


def test_point_dist_errors():
    with pytest.raises(ValueError):
        point_dist(euclidean(2), (0, 0), (0, 0, 0))
    with pytest.raises(KeyError):
        point_dist(tree_space(path_tree()), 0, 7)


def test_tree_lca_matches_bruteforce_paths():
    rng = np.random.default_rng(3)
    for _ in range(20):
        V = int(rng.integers(2, 30))
        parent = [-1] + [int(rng.integers(0, i)) for i in range(1, V)]
        length = [0.0] + list(rng.random(V - 1) + 0.1)
        t = TreeMetric(parent, length)
        # distance to root by walking, then via common ancestors
        def up(v):
            path = [v]
            while parent[v] >= 0:
                v = parent[v]
                path.append(v)
            return path
        for _ in range(20):
            u, v = rng.integers(0, V, size=2)
            pu, pv = up(int(u)), up(int(v))
            common = next(x for x in pu if x in pv)
            du = sum(length[x] for x in pu[:pu.index(common)])
            dv = sum(length[x] for x in pv[:pv.index(common)])
            assert t.dist(int(u), int(v)) == pytest.approx(du + dv, abs=1e-12)


def test_tree_validation():
    with pytest.raises(ValueError):
        TreeMetric([-1, 0], [0.0, 0.0])
    with pytest.raises(ValueError):
        TreeMetric([-1, -1], [0.0, 1.0])


def test_parse_tree_with_levels_gives_hst():
    text = "r -1 0 # level 1\nx r 2 # level 0\ny r 2 # level 0\n"
    t = parse_tree(text)
    assert isinstance(t, HSTree)
    assert check_hst_property(t)
    again = parse_tree(t.to_text(with_levels=True))
    assert np.array_equal(again.parent, t.parent)


def test_hst_rejects_unequal_leaf_depths():
    with pytest.raises(ValueError):
        HSTree([-1, 0, 0], [0.0, 1.0, 2.0], level=[1, 0, 0])


@settings(max_examples=60, deadline=None)
@given(st.lists(unit, min_size=3, max_size=3), st.lists(unit, min_size=3, max_size=3),
       st.sampled_from([1.0, 1.5, 2.0, 3.0]))
def test_symmetry_and_coincidence(x, y, p):
    sp = euclidean_power(3, p)
    assert point_dist(sp, x, y) == point_dist(sp, y, x)
    assert point_dist(sp, x, x) == 0.0


@settings(max_examples=40, deadline=None)
@given(st.sampled_from([1.5, 2.0, 3.0]), st.integers(0, 10**6))
def test_power_ratio_bounded_by_eta(p, seed):
    rep = verify_approx_triangle(euclidean_power(2, p), 2000, seed)
    assert rep.worst_ratio <= 2 ** (p - 1) + 1e-12
    assert rep.violations == 0


def test_triangle_examples():
    assert verify_approx_triangle(euclidean(1), 20000, 1).violations == 0
    sp = euclidean_power(1, 2)
    assert certify_violation(sp, ([0.0], [0.5], [1.0]), 1)
    assert not certify_violation(sp, ([0.0], [0.5], [1.0]), 2)
    rep = verify_approx_triangle(sp, 100000, 2, eta=2.0)
    assert rep.violations == 0


def test_triangle_skips_zero_denominators():
    t = parse_tree("r -1 0\n")
    rep = verify_approx_triangle(tree_space(t), 10, 0)
    assert rep.skipped == 10 and rep.checked == 0


def test_sample_uniform_reproducible():
    a = sample(uniform(), euclidean(1), 3, 11)
    b = sample(uniform(), euclidean(1), 3, 11)
    assert np.array_equal(a, b)
    assert a.shape == (3, 1) and np.all((a >= 0) & (a <= 1))


def test_sample_discrete_frequencies():
    dist = discrete_nodes([0, 1, 2], [2, 0, 2])
    x = sample(dist, tree_space(path_tree()), 100000, 5)
    freq = np.bincount(x, minlength=3) / x.size
    assert np.allclose(freq, [0.5, 0, 0.5], atol=0.01)


def test_sample_bounded_density_half():
    x = sample(named_density("half"), euclidean(1), 100000, 5)
    assert np.mean(x[:, 0] <= 0.5) == pytest.approx(1.0)


def test_sample_ramp_mean_matches_integral():
    # density 2x on [0,1] has mean 2/3
    x = sample(named_density("ramp"), euclidean(2), 100000, 5)
    assert x[:, 0].mean() == pytest.approx(2 / 3, abs=0.005)
    assert x[:, 1].mean() == pytest.approx(0.5, abs=0.005)


def test_sample_density_above_beta_aborts():
    bad = bounded_density(lambda X: np.full(len(X), 3.0), beta=2.0)
    with pytest.raises(ContractViolation):
        sample(bad, euclidean(1), 10, 0)


def test_make_server_uniform():
    d = make_server_uniform(np.array([4, 4, 9]))
    assert dict(zip(d.support.tolist(), d.masses().tolist())) == {4: pytest.approx(2 / 3), 9: pytest.approx(1 / 3)}
    assert d.n == 3
    single = make_server_uniform(np.array([[0.2, 0.3]]))
    assert np.allclose(single.masses(), [1.0])
    with pytest.raises(ValueError):
        make_server_uniform(np.array([]))


def test_make_server_uniform_frequencies():
    S = np.array([[0.1], [0.2], [0.3], [0.4], [0.5]])
    d = make_server_uniform(S)
    x = sample(d, euclidean(1), 100000, 3)
    _, counts = np.unique(x[:, 0], return_counts=True)
    assert np.allclose(counts / x.shape[0], 0.2, atol=0.01)


def test_euclidean_power_eta():
    assert euclidean_power(2, 3).eta == 4.0
    assert euclidean(2).eta == 1.0
    assert math.isclose(euclidean_power(1, 1.5).eta, 2 ** 0.5)
