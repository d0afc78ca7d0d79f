"""Stochastic online metric matching: spaces, offline oracles, online policies,
HST subroutines, the adversarial-to-stochastic reduction and an experiment harness."""
from .space import (ContractViolation, Distribution, HSTree, MetricSpace, TreeMetric, euclidean,
                    euclidean_power, make_server_uniform, point_dist, sample, tree_space)
from .optmatch import Matching, OptEstimate, estimate_opt, opt_offline, opt_tree_exact
from .online import (OnlinePolicy, greedy_policy, hierarchical_greedy_policy, run_online,
                     soar_policy)
from .hst import build_hst, exact_expected_cost, mnp_policy, random_subtree_policy
from .reduce import reduction_bound_report, wrap_reduction

__version__ = "0.1.0"
