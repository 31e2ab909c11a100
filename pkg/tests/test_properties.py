"""
Randomized property suites: brute-force oracle, invariances, game properties,
rule reduction laws, the axiom battery and sampling statistics
"""
import math
import os
import sys
import unittest

import numpy as np
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize_scalar

# Add parent directory to path to import the module
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from eoq_core import (
    BasicProblem, Problem, basic_optimal_policy, coalition_cost, coalition_cpt, coalition_policy,
)
from eoq_games import (
    CostGame, SamplingConfig, coalition_excesses, core_check, shapley_exact, shapley_sampled,
    subadditivity_check,
)
from eoq_rules import (
    check_efficiency, check_hd_ranking_preservation, check_non_manipulability, check_non_negativity,
    check_stability_for_firms, check_symmetry, hd_proportional, random_instances, random_merge,
    run_axiom_battery, shapley_proportional,
)
from tests import negative_controls
from tests.test_config import EXAMPLE4, PROPERTY_EXAMPLES, SAMPLING_COUNT, SAMPLING_SEEDS

PROPERTY_SETTINGS = settings(max_examples=PROPERTY_EXAMPLES, deadline=None,
                             suppress_health_check=[HealthCheck.too_slow])

# Cycle lengths searched by the oracle
ORACLE_GRID = np.geomspace(1e-7, 1e7, 1401)


def _real(low, high):
    return st.floats(min_value=low, max_value=high, allow_nan=False, allow_infinity=False)


@st.composite
def problems(draw, min_items=1, max_items=10, max_firms=3):
    """Valid problems with parameters in the ranges random_problem draws from."""
    n = draw(st.integers(min_value=min_items, max_value=max_items))
    demand = draw(st.lists(_real(1.0, 500.0), min_size=n, max_size=n))
    holding = draw(st.lists(_real(0.01, 1.0), min_size=n, max_size=n))
    acquisition = draw(st.lists(_real(0.5, 100.0), min_size=n, max_size=n))
    firms = draw(st.lists(st.integers(min_value=1, max_value=max_firms), min_size=n, max_size=n))
    ordering_cost = draw(_real(1.0, 5000.0))
    exemption_price = 10.0 ** draw(_real(1.0, 6.0))
    return Problem.from_parameters(demand, holding, acquisition, ordering_cost, exemption_price,
                                   firms=[str(f) for f in firms])


@st.composite
def problems_with_coalition(draw, max_items=10):
    p = draw(problems(max_items=max_items))
    mask = draw(st.lists(st.booleans(), min_size=len(p.items), max_size=len(p.items)))
    coalition = [iid for iid, keep in zip(p.item_ids, mask) if keep] or list(p.item_ids[:1])
    return p, coalition


def brute_force_cost(p, coalition):
    """Grid search over the cycle length, refined by a bounded scalar search."""
    cpt = lambda cycle: coalition_cpt(p, coalition, cycle)
    costs = np.array([cpt(cycle) for cycle in ORACLE_GRID])
    k = int(np.argmin(costs))
    low, high = ORACLE_GRID[max(k - 1, 0)], ORACLE_GRID[min(k + 1, len(ORACLE_GRID) - 1)]
    refined = minimize_scalar(cpt, bounds=(low, high), method='bounded', options={'xatol': low * 1e-9})
    # the exempt cycle is where the cost function jumps down; a grid alone can miss it
    acquisition = sum(p.item(iid).acquisition_of_demand for iid in coalition)
    return min(costs[k], refined.fun, cpt(p.exemption_price / acquisition))


def factorized(p):
    """The same problem with every item written as (1, hd, cd)."""
    return Problem.from_parameters(
        [1.0] * len(p.items), p.holding_vector.tolist(), p.acquisition_vector.tolist(),
        p.ordering_cost, p.exemption_price, firms=[item.firm_id for item in p.items])


def close(value, expected, rel, scale=1.0):
    return math.isclose(value, expected, rel_tol=rel, abs_tol=rel * scale)


class TestCostProperties(unittest.TestCase):

    @PROPERTY_SETTINGS
    @given(problems_with_coalition())
    def test_oracle_equivalence(self, case):
        p, coalition = case
        self.assertTrue(close(coalition_cost(p, coalition), brute_force_cost(p, coalition), 1e-6))

    @PROPERTY_SETTINGS
    @given(problems_with_coalition())
    def test_factorization_invariance(self, case):
        p, coalition = case
        q = factorized(p)
        self.assertTrue(close(coalition_cost(q, coalition), coalition_cost(p, coalition), 1e-12))
        self.assertTrue(close(coalition_policy(q, coalition).cost_per_time,
                              coalition_policy(p, coalition).cost_per_time, 1e-12))

    @PROPERTY_SETTINGS
    @given(problems(max_items=1))
    def test_single_item_matches_basic_model(self, p):
        item = p.items[0]
        basic = BasicProblem(demand_rate=item.demand_rate, holding_cost_rate=item.holding_cost_rate,
                             ordering_cost=p.ordering_cost,
                             exemption_quantity=p.exemption_price / item.acquisition_cost)
        _, cost = basic_optimal_policy(basic)
        self.assertTrue(close(coalition_cost(p, p.item_ids), cost, 1e-12))

    @PROPERTY_SETTINGS
    @given(problems_with_coalition())
    def test_policy_orders_jointly(self, case):
        p, coalition = case
        report = coalition_policy(p, coalition)
        cycles = [size / p.item(iid).demand_rate for iid, size in report.order_sizes.items()]
        for cycle in cycles:
            self.assertTrue(math.isclose(cycle, cycles[0], rel_tol=1e-9))
        self.assertTrue(math.isclose(report.orders_per_time * report.cycle_length, 1.0, rel_tol=1e-9))
        self.assertTrue(close(report.cost_per_time, coalition_cost(p, coalition), 1e-12))

    @PROPERTY_SETTINGS
    @given(problems_with_coalition())
    def test_continuous_across_branch_boundary(self, case):
        p, coalition = case
        holding = sum(p.item(iid).holding_of_demand for iid in coalition)
        acquisition = sum(p.item(iid).acquisition_of_demand for iid in coalition)
        boundary = 2.0 * acquisition * math.sqrt(2.0 * p.ordering_cost / holding)
        at_boundary = math.sqrt(2.0 * p.ordering_cost * holding)
        for eps in (1e-3, 1e-6, 1e-9):
            below = coalition_cost(p.model_copy(update={'exemption_price': boundary * (1 - eps)}), coalition)
            above = coalition_cost(p.model_copy(update={'exemption_price': boundary * (1 + eps)}), coalition)
            self.assertLessEqual(abs(above - below), (2 * eps + 1e-12) * at_boundary)

    @PROPERTY_SETTINGS
    @given(problems_with_coalition(), _real(1.0, 5000.0), _real(1.0, 5000.0))
    def test_nondecreasing_in_ordering_cost(self, case, first, second):
        p, coalition = case
        low, high = sorted((first, second))
        cheap = coalition_cost(p.model_copy(update={'ordering_cost': low}), coalition)
        dear = coalition_cost(p.model_copy(update={'ordering_cost': high}), coalition)
        self.assertLessEqual(cheap, dear * (1 + 1e-12))


class TestGameProperties(unittest.TestCase):

    @PROPERTY_SETTINGS
    @given(problems())
    def test_strictly_subadditive(self, p):
        verdict = subadditivity_check(CostGame.items(p))
        self.assertTrue(verdict.passed, verdict.violations[:3])

    @PROPERTY_SETTINGS
    @given(problems())
    def test_hd_in_core(self, p):
        game = CostGame.items(p)
        self.assertTrue(core_check(game, hd_proportional(p)).passed)

    @PROPERTY_SETTINGS
    @given(problems(min_items=2))
    def test_hd_strictly_below_every_proper_coalition(self, p):
        game = CostGame.items(p)
        hd = hd_proportional(p)
        verdict = core_check(game, hd, tol=0.0)
        self.assertTrue(verdict.passed, verdict.violations[:3])
        self.assertGreater(verdict.margin, 0)
        amounts = np.array([hd.values[player] for player in game.players])
        excess, _ = coalition_excesses(game, amounts, max_players=game.n)
        self.assertLess(excess[1:-1].max(), 0)

    @PROPERTY_SETTINGS
    @given(problems(max_items=8))
    def test_exact_shapley_efficiency_and_symmetry(self, p):
        game = CostGame.items(p)
        values = shapley_exact(game).values
        grand = game.grand_cost()
        self.assertTrue(close(math.fsum(values.values()), grand, 1e-9))
        twin = Problem.from_parameters(
            p.demand_vector.tolist() + [p.items[0].demand_rate],
            [item.holding_cost_rate for item in p.items] + [p.items[0].holding_cost_rate],
            [item.acquisition_cost for item in p.items] + [p.items[0].acquisition_cost],
            p.ordering_cost, p.exemption_price)
        twin_values = shapley_exact(CostGame.items(twin)).values
        last = twin.item_ids[-1]
        self.assertTrue(close(twin_values['1'], twin_values[last], 1e-9, twin.holding_vector.max()))


class TestRuleProperties(unittest.TestCase):

    @PROPERTY_SETTINGS
    @given(problems(max_items=8))
    def test_single_firm_sp_is_shapley(self, p):
        p = p.single_firm()
        sp = shapley_proportional(p).per_item
        exact = shapley_exact(CostGame.items(p)).values
        scale = coalition_cost(p, p.item_ids)
        for iid in p.item_ids:
            self.assertTrue(close(sp[iid], exact[iid], 1e-9, scale))

    @PROPERTY_SETTINGS
    @given(problems())
    def test_singleton_firms_sp_is_hd(self, p):
        p = p.one_item_per_firm()
        sp = shapley_proportional(p).per_item
        hd = hd_proportional(p).values
        for iid in p.item_ids:
            self.assertTrue(close(sp[iid], hd[iid], 1e-9))

    @PROPERTY_SETTINGS
    @given(problems())
    def test_hd_proportional_to_holding(self, p):
        values = hd_proportional(p).values
        holding = dict(zip(p.item_ids, p.holding_vector.tolist()))
        first = p.item_ids[0]
        for iid in p.item_ids:
            self.assertTrue(math.isclose(values[iid] * holding[first], values[first] * holding[iid],
                                         rel_tol=1e-9))

    @PROPERTY_SETTINGS
    @given(problems(max_items=8))
    def test_rules_invariant_under_factorization(self, p):
        q = factorized(p)
        scale = coalition_cost(p, p.item_ids)
        for rule in (hd_proportional, lambda problem: shapley_exact(CostGame.items(problem))):
            original, rewritten = rule(p).values, rule(q).values
            for iid in p.item_ids:
                self.assertTrue(close(rewritten[iid], original[iid], 1e-12, scale))
        original, rewritten = shapley_proportional(p).per_item, shapley_proportional(q).per_item
        for iid in p.item_ids:
            self.assertTrue(close(rewritten[iid], original[iid], 1e-12, scale))


class TestAxiomSuite(unittest.TestCase):
    """hd and sp pass their properties; each negative control fails its target."""

    @classmethod
    def setUpClass(cls):
        cls.instances = random_instances(100, seed=42)

    def test_battery_passes(self):
        results = run_axiom_battery(self.instances, seed=42)
        failures = [(r.instance, r.rule, r.verdict.property) for r in results if not r.verdict.passed]
        self.assertEqual(failures, [])
        checked = {(r.rule, r.verdict.property) for r in results}
        for expected in ('symmetry[item]', 'non-manipulability[item]', 'hd-ranking[item]',
                         'non-negativity[item]', 'stability[firm]'):
            self.assertIn(('hd', expected), checked)
        for expected in ('symmetry[firm]', 'non-manipulability[firm]', 'non-negativity[firm]',
                         'balanced-contributions', 'stability[firm]'):
            self.assertIn(('sp', expected), checked)

    def _fails_somewhere(self, check):
        return any(not check(p).passed for p in self.instances)

    def test_negative_controls_fail_their_targets(self):
        rng = np.random.default_rng(3)
        merges = {id(p): random_merge(rng, p.item_ids) for p in self.instances}

        def manipulable(p):
            merge = merges[id(p)]
            if merge is None:
                return check_efficiency(negative_controls.squared_holding_split, p)
            return check_non_manipulability(negative_controls.squared_holding_split, p, merge)

        self.assertTrue(self._fails_somewhere(
            lambda p: check_symmetry(negative_controls.perturbed_equal_split, p)))
        self.assertTrue(self._fails_somewhere(manipulable))
        self.assertTrue(self._fails_somewhere(
            lambda p: check_hd_ranking_preservation(negative_controls.inverse_holding_split, p)))
        self.assertTrue(self._fails_somewhere(
            lambda p: check_stability_for_firms(negative_controls.first_item_overcharged,
                                                p.one_item_per_firm())))
        self.assertTrue(self._fails_somewhere(
            lambda p: check_non_negativity(negative_controls.negative_last_item, p)))
        self.assertTrue(self._fails_somewhere(
            lambda p: check_efficiency(negative_controls.overcharging_hd, p)))

    def test_controls_fail_every_eligible_instance(self):
        for p in self.instances:
            if len(p.items) < 2:
                continue
            self.assertFalse(check_stability_for_firms(
                negative_controls.first_item_overcharged, p.one_item_per_firm()).passed)
            self.assertFalse(check_non_negativity(negative_controls.negative_last_item, p).passed)
            self.assertFalse(check_efficiency(negative_controls.overcharging_hd, p).passed)


class TestSamplingStatistics(unittest.TestCase):

    def test_example4_seeds_within_four_std_errors(self):
        game = CostGame.items(Problem.from_parameters(**EXAMPLE4))
        exact = shapley_exact(game).values
        covered = 0
        for seed in range(SAMPLING_SEEDS):
            allocation, errors = shapley_sampled(game, SamplingConfig(sample_count=SAMPLING_COUNT, seed=seed))
            covered += all(abs(allocation.values[k] - exact[k]) <= 4 * errors[k] for k in game.players)
        self.assertGreaterEqual(covered, 97)

    def test_five_player_games_converge(self):
        rng = np.random.default_rng(5)
        failures = 0
        for seed in range(20):
            p = random_instances(1, seed=seed, max_items=5)[0]
            if len(p.items) < 5:
                p = Problem.from_parameters(
                    rng.uniform(1, 500, 5).tolist(), rng.uniform(0.01, 1, 5).tolist(),
                    rng.uniform(0.5, 100, 5).tolist(), p.ordering_cost, p.exemption_price)
            game = CostGame.items(p)
            exact = shapley_exact(game).values
            allocation, errors = shapley_sampled(game, SamplingConfig(sample_count=SAMPLING_COUNT, seed=seed))
            failures += not all(abs(allocation.values[k] - exact[k]) <= 4 * errors[k] for k in game.players)
        self.assertLessEqual(failures, 1)


if __name__ == '__main__':
    unittest.main()
