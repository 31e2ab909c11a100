"""
Functional tests: published examples reproduced end to end through the command line
"""
import contextlib
import io
import json
import math
import os
import sys
import unittest

from scipy.stats import spearmanr

# Add parent directory to path to import the module
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import eoq_cli
from eoq_games import CostGame, marginal_costs
from eoq_io import load_fixture, table_to_problem
from eoq_rules import check_stability_for_firms, sp_rule
from tests.test_config import (
    EXAMPLE4_CORE_EXCESS, EXAMPLE4_COSTS, EXAMPLE4_SHAPLEY, PUBLISHED_2DP, PUBLISHED_3DP,
    SP_TOLERANCE, TABLE1_CYCLE, TABLE1_ORDER_SIZES, TABLE1_ORDERS_PER_TIME, TABLE1_SAMPLES,
    TABLE3_CYCLE, TABLE3_DROP_MARGINAL, TABLE3_DROP_SHAPLEY, TABLE6_FIRM_TOTALS, load_expected,
)


def run_cli(*argv):
    """Run the command line; returns (exit code, stdout text)."""
    buffer = io.StringIO()
    with contextlib.redirect_stdout(buffer):
        code = eoq_cli.main(list(argv))
    return code, buffer.getvalue()


def run_json(*argv):
    code, out = run_cli(*argv, '--full-precision')
    return code, json.loads(out)


class TestPublishedExamples(unittest.TestCase):
    """End-to-end reproduction of the published numbers"""

    @classmethod
    def setUpClass(cls):
        cls.table2 = load_expected('table2_expected.csv')
        cls.table4 = load_expected('table4_expected.csv')
        cls.table5 = load_expected('table5_expected.csv')

    def test_01_basic_model(self):
        code, report = run_json('basic', '--d', '15', '--h', '8', '--a', '10', '--A', '10')
        self.assertEqual(code, 0)
        self.assertAlmostEqual(report['order_size'], 10.0, delta=1e-12)
        self.assertAlmostEqual(report['cost_per_time'], 40.0, delta=1e-12)

    def test_02_example4_game_export(self):
        code, out = run_cli('game-export', 'example4', '--format', 'csv', '--full-precision')
        self.assertEqual(code, 0)
        lines = out.strip().split('\n')
        self.assertEqual(lines[0], 'mask,cost')
        costs = {int(mask): float(cost) for mask, cost in (line.split(',') for line in lines[1:])}
        self.assertEqual(len(costs), 8)
        self.assertEqual(costs[0], 0.0)
        for coalition, expected in EXAMPLE4_COSTS.items():
            mask = sum(1 << (int(player) - 1) for player in coalition)
            self.assertAlmostEqual(costs[mask], expected, delta=PUBLISHED_3DP)

    def test_03_example4_shapley_outside_core(self):
        code, report = run_json('core-check', 'example4', '--rule', 'shapley-exact')
        self.assertEqual(code, eoq_cli.EXIT_VIOLATION)
        for player, expected in EXAMPLE4_SHAPLEY.items():
            self.assertAlmostEqual(report['allocation'][player], expected, delta=PUBLISHED_3DP)
        self.assertEqual([v['players'] for v in report['violations']], [['2', '3']])
        self.assertAlmostEqual(report['violations'][0]['magnitude'], EXAMPLE4_CORE_EXCESS, delta=0.002)

    def test_04_example4_hd_in_core(self):
        code, report = run_json('core-check', 'example4', '--rule', 'hd')
        self.assertEqual(code, eoq_cli.EXIT_OK)
        self.assertTrue(report['passed'])

    def test_05_table1_policy(self):
        code, report = run_json('optimize', 'table1', '--a', '2000', '--B', '200000')
        self.assertEqual(code, 0)
        self.assertAlmostEqual(report['cycle_length'], TABLE1_CYCLE, delta=0.0001)
        self.assertAlmostEqual(report['orders_per_time'], TABLE1_ORDERS_PER_TIME, delta=0.0005)
        for item, expected in TABLE1_ORDER_SIZES.items():
            self.assertAlmostEqual(report['order_sizes'][item], expected, delta=PUBLISHED_2DP)

    def test_06_table1_order_sizes(self):
        _, report = run_json('optimize', 'table1')
        for item, row in self.table2.items():
            self.assertAlmostEqual(report['order_sizes'][item], row['order_size'], delta=PUBLISHED_2DP,
                                   msg=f"item {item}")

    def test_07_table1_single_item_classical_eoq(self):
        _, report = run_json('optimize', 'table1', '--coalition', '1', '--B', '1e12')
        self.assertFalse(report['exempt'])
        self.assertAlmostEqual(report['order_sizes']['1'], math.sqrt(2 * 2000 * 419 / 0.45), places=6)

    def test_08_table1_hd_column(self):
        code, report = run_json('allocate', 'table1', '--rule', 'hd')
        self.assertEqual(code, 0)
        for item, row in self.table2.items():
            self.assertAlmostEqual(report['values'][item], row['hd_prop'], delta=PUBLISHED_2DP,
                                   msg=f"item {item}")

    def test_09_table1_sampled_shapley(self):
        code, report = run_json('allocate', 'table1', '--rule', 'shapley-sampled',
                                '--samples', str(TABLE1_SAMPLES), '--seed', '7')
        self.assertEqual(code, 0)
        values = report['values']
        self.assertAlmostEqual(math.fsum(values.values()), report['total'], places=9)
        items = sorted(self.table2)
        rho, _ = spearmanr([values[i] for i in items], [self.table2[i]['shapley'] for i in items])
        self.assertGreaterEqual(rho, 0.99)
        for item in items:
            published = self.table2[item]['shapley']
            if abs(published) > 5:
                self.assertEqual(values[item] > 0, published > 0, msg=f"item {item}")

    def test_10_table3_policy(self):
        _, report = run_json('optimize', 'table3')
        self.assertTrue(report['exempt'])
        self.assertAlmostEqual(report['cycle_length'], TABLE3_CYCLE, delta=0.0001)

    def test_11_table3_shapley_and_marginals(self):
        _, report = run_json('allocate', 'table3', '--rule', 'shapley-exact')
        table, units = load_fixture('table3')
        marginals = marginal_costs(CostGame.items(
            table_to_problem(table, units['ordering_cost'], units['exemption_price'])))
        for item, row in self.table4.items():
            self.assertAlmostEqual(report['values'][item], row['shapley'], delta=PUBLISHED_2DP)
            self.assertAlmostEqual(marginals[item], row['marginal_cost'], delta=PUBLISHED_2DP)

    def test_12_table3_drop_analysis(self):
        for measure, (dropped, cost) in (('marginal', TABLE3_DROP_MARGINAL),
                                         ('shapley', TABLE3_DROP_SHAPLEY)):
            code, report = run_json('drop-analysis', 'table3', '--measure', measure)
            self.assertEqual(code, 0)
            self.assertEqual(report['dropped'], dropped)
            self.assertAlmostEqual(report['remaining_cost'], cost, delta=PUBLISHED_2DP)

    def test_13_eight_firm_shapley_proportional(self):
        code, report = run_json('allocate', 'table1_firms', '--rule', 'sp')
        self.assertEqual(code, 0)
        for firm, expected in TABLE6_FIRM_TOTALS.items():
            self.assertAlmostEqual(report['per_firm'][firm], expected, delta=SP_TOLERANCE)
        for item, row in self.table5.items():
            self.assertAlmostEqual(report['values'][item], row['shapley_prop'], delta=SP_TOLERANCE,
                                   msg=f"item {item}")

    def test_14_eight_firm_stability(self):
        table, units = load_fixture('table1_firms')
        p = table_to_problem(table, units['ordering_cost'], units['exemption_price'])
        verdict = check_stability_for_firms(sp_rule, p)
        self.assertTrue(verdict.passed)
        self.assertEqual(verdict.checked, 255)

    def test_15_plot_data(self):
        code, out = run_cli('plotdata', 'table1', '--format', 'csv', '--samples', '200000')
        self.assertEqual(code, 0)
        lines = out.strip().split('\n')
        self.assertEqual(lines[0], 'rank,shapley,hd_prop')
        self.assertEqual(len(lines), 101)
        rows = [line.split(',') for line in lines[1:]]
        shapley = [float(row[1]) for row in rows]
        self.assertEqual(shapley, sorted(shapley))
        # the lowest Shapley value belongs to item 43 (hd 2.98)
        self.assertAlmostEqual(float(rows[0][2]), self.table2['43']['hd_prop'], delta=PUBLISHED_2DP)
        self.assertLess(shapley[0], -60)


class TestCommandLine(unittest.TestCase):
    """Exit codes and report formats"""

    def test_invalid_input_exit_code(self):
        code, _ = run_cli('basic', '--d', '0', '--h', '8', '--a', '10', '--A', '10')
        self.assertEqual(code, eoq_cli.EXIT_INVALID)
        code, _ = run_cli('optimize', 'no-such-fixture')
        self.assertEqual(code, eoq_cli.EXIT_INVALID)
        code, _ = run_cli('game-export', 'table3', '--max-n', '5')
        self.assertEqual(code, eoq_cli.EXIT_INVALID)
        code, _ = run_cli('allocate', 'table1', '--rule', 'shapley-exact')
        self.assertEqual(code, eoq_cli.EXIT_INVALID)

    def test_rounded_json(self):
        _, out = run_cli('optimize', 'table3')
        report = json.loads(out)
        self.assertEqual(report['cycle_length'], round(report['cycle_length'], 6))

    def test_game_export_csv_rows(self):
        code, out = run_cli('game-export', 'example4', '--format', 'csv', '--B', '3500', '--a', '6')
        self.assertEqual(code, 0)
        self.assertEqual(len(out.strip().split('\n')), 9)

    def test_firm_players(self):
        code, report = run_json('game-export', 'table1_firms', '--players', 'firms')
        self.assertEqual(code, 0)
        self.assertEqual(len(report['coalitions']), 256)
        self.assertAlmostEqual(report['coalitions'][255]['cost'], sum(TABLE6_FIRM_TOTALS.values()),
                               delta=8 * SP_TOLERANCE)

    def test_axioms_on_random_instances(self):
        code, report = run_json('axioms', '--random', '5', '--seed', '42')
        self.assertEqual(code, eoq_cli.EXIT_OK)
        self.assertTrue(report['passed'])
        self.assertEqual(report['instances'], 5)

    def test_fixtures_checksums(self):
        code, report = run_json('fixtures')
        self.assertEqual(code, 0)
        self.assertEqual({row['fixture'] for row in report['fixtures']},
                         {'example4', 'table1', 'table1_firms', 'table3'})
        self.assertTrue(all(row['checksum_ok'] for row in report['fixtures']))

    def test_subadditivity(self):
        code, report = run_json('subadditivity', 'table3')
        self.assertEqual(code, 0)
        self.assertTrue(report['passed'])


if __name__ == '__main__':
    unittest.main()
