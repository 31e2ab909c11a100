#!/usr/bin/env python3
"""
Command line for EOQ problems with exemptable ordering costs.

Tables are bundled fixture names (table1, table1_firms, table3, example4) or
paths to CSV files with header item,firm,group,d,h,c. Reports go to stdout,
logs to stderr.

Exit codes: 0 success, 1 invalid input or configuration, 2 a checked
property or core condition is violated.
"""
import argparse
import os
import sys
from typing import List, Optional, Tuple

import eoq_io
from logger_config import set_global_level, setup_logger

# Set up logger
logger = setup_logger(__name__, os.environ.get('LOG_LEVEL', 'INFO'))

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_VIOLATION = 2

TABLE_COMMANDS = {
    'optimize': 'Optimal joint policy of a coalition (all items by default)',
    'allocate': 'Allocate the grand-coalition cost with a rule',
    'game-export': 'Costs of every coalition as mask,cost rows',
    'core-check': 'Check whether a rule\'s allocation lies in the core',
    'subadditivity': 'Check strict subadditivity of the cost game',
    'drop-analysis': 'Items to stop per group and the remaining cost',
    'plotdata': 'Shapley and hd-proportional series sorted by Shapley value',
}


def _common_options() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('-f', '--config-file', default=None,
                        help='Path to a JSON run configuration (see eoq_config_sample.json)')
    common.add_argument('--a', dest='ordering_cost', type=float,
                        help='Ordering cost a (default: fixture metadata or config file)')
    common.add_argument('--B', dest='exemption_price', type=float,
                        help='Order price B from which the ordering cost is waived')
    common.add_argument('--rule', choices=['hd', 'sp', 'shapley-exact', 'shapley-sampled'],
                        help='Allocation rule (default: hd)')
    common.add_argument('--sp-mode', choices=['exact', 'sampled'],
                        help='Shapley computation within firms for the sp rule')
    common.add_argument('--samples', dest='sample_count', type=int,
                        help='Permutations for sampled Shapley values (default: 100000)')
    common.add_argument('--seed', type=int, help='Random seed (default: 0)')
    common.add_argument('--workers', type=int, help='Worker threads for sampling')
    common.add_argument('--tol', type=float, help='Tolerance of core and property checks')
    common.add_argument('--exact-threshold', type=int,
                        help='Largest player count for exact Shapley values (default: 20)')
    common.add_argument('--players', choices=['items', 'firms'],
                        help='Players of the cost game (default: items)')
    common.add_argument('--format', choices=['json', 'csv'], help='Report format (default: json)')
    common.add_argument('--full-precision', action='store_true', default=None,
                        help='Do not round reported numbers to 6 decimals')
    common.add_argument('--log-level', default=None,
                        choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'],
                        help='Logging level (default: LOG_LEVEL or INFO)')
    return common


def parse_args(argv: Optional[List[str]] = None) -> argparse.Namespace:
    common = _common_options()
    parser = argparse.ArgumentParser(prog='eoq', description='EOQ with exemptable ordering costs')
    commands = parser.add_subparsers(dest='command', required=True)

    basic = commands.add_parser('basic', parents=[common],
                                help='Optimal order size of the single-item model')
    basic.add_argument('--d', dest='demand', type=float, required=True, help='Demand rate d')
    basic.add_argument('--h', dest='holding', type=float, required=True, help='Holding cost rate h')
    basic.add_argument('--A', dest='exemption_quantity', type=float, required=True,
                       help='Order size A from which the ordering cost is waived')

    for name, summary in TABLE_COMMANDS.items():
        sub = commands.add_parser(name, parents=[common], help=summary)
        sub.add_argument('table', help='Fixture name or CSV path')
        if name == 'optimize':
            sub.add_argument('--coalition', help='Comma-separated item ids (default: all items)')
        elif name == 'game-export':
            sub.add_argument('--max-n', type=int, help='Largest player count to export (default: 16)')
        elif name == 'drop-analysis':
            sub.add_argument('--measure', choices=['marginal', 'shapley', 'hd'],
                             help='Per-item measure ranking the drop candidates (default: marginal)')
            sub.add_argument('--groups', default=None,
                             help='Groups as g1=1,2,3;g2=4,5 (default: the table\'s group column)')
            sub.add_argument('--drops', dest='drops_per_group', type=int,
                             help='Items to drop per group (default: 1)')

    axioms = commands.add_parser('axioms', parents=[common],
                                 help='Check the properties of the hd and sp rules')
    axioms.add_argument('table', nargs='?', help='Fixture name or CSV path')
    axioms.add_argument('--random', dest='random_count', type=int,
                        help='Run on this many random instances instead of a table')
    axioms.add_argument('--only', choices=['hd', 'sp'], help='Check a single rule')

    commands.add_parser('fixtures', parents=[common], help='List bundled fixtures and verify checksums')
    return parser.parse_args(argv)


def parse_groups(text: str):
    """'t1=1,2,3;t2=4,5' -> {'t1': ['1','2','3'], 't2': ['4','5']}"""
    groups = {}
    for part in filter(None, (chunk.strip() for chunk in text.split(';'))):
        name, sep, members = part.partition('=')
        if not sep or not name.strip():
            raise ValueError(f"Invalid group specification: {part!r}")
        groups[name.strip()] = [m.strip() for m in members.split(',') if m.strip()]
    return groups


def build_config(args: argparse.Namespace) -> eoq_io.RunConfig:
    tol = getattr(args, 'tol', None)
    overrides = {
        'ordering_cost': args.ordering_cost,
        'exemption_price': args.exemption_price,
        'rule': args.rule,
        'sp_mode': args.sp_mode,
        'sample_count': args.sample_count,
        'seed': args.seed,
        'workers': args.workers,
        'exact_threshold': args.exact_threshold,
        'players': args.players,
        'format': args.format,
        'full_precision': args.full_precision,
        'core_tolerance': tol,
        'axiom_tolerance': tol,
        'measure': getattr(args, 'measure', None),
        'drops_per_group': getattr(args, 'drops_per_group', None),
        'export_max_players': getattr(args, 'max_n', None),
    }
    return eoq_io.initialize_config(args.config_file, overrides)


def run(args: argparse.Namespace) -> Tuple[eoq_io.CommandResult, eoq_io.RunConfig]:
    config = build_config(args)
    logger.info(f"Command: {args.command}")

    if args.command == 'basic':
        if config.ordering_cost is None:
            raise ValueError("The basic model needs the ordering cost --a")
        return eoq_io.cmd_basic(args.demand, args.holding, config.ordering_cost,
                                args.exemption_quantity), config
    if args.command == 'fixtures':
        return eoq_io.cmd_fixtures(), config
    if args.command == 'axioms':
        table = None
        if args.random_count is None:
            if not args.table:
                raise ValueError("axioms needs a table or --random N")
            table, units = eoq_io.load_table(args.table)
            config = config.with_units(units)
        rules = (args.only,) if args.only else ('hd', 'sp')
        return eoq_io.cmd_axioms(config, table, args.random_count, rules), config

    table, units = eoq_io.load_table(args.table)
    config = config.with_units(units)
    if args.command == 'optimize':
        coalition = [c.strip() for c in args.coalition.split(',')] if args.coalition else None
        return eoq_io.cmd_optimize(config, table, coalition), config
    if args.command == 'allocate':
        return eoq_io.cmd_allocate(config, table), config
    if args.command == 'game-export':
        return eoq_io.cmd_game_export(config, table), config
    if args.command == 'core-check':
        return eoq_io.cmd_core_check(config, table), config
    if args.command == 'subadditivity':
        return eoq_io.cmd_subadditivity(config, table), config
    if args.command == 'drop-analysis':
        groups = parse_groups(args.groups) if args.groups else None
        return eoq_io.cmd_drop_analysis(config, table, groups), config
    return eoq_io.cmd_plotdata(config, table), config


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point"""
    args = parse_args(argv)
    if args.log_level:
        set_global_level(args.log_level)

    try:
        result, config = run(args)
    except ValueError as e:
        # EOQError, pydantic.ValidationError and malformed flags all derive from ValueError
        logger.error(f"{e}")
        return EXIT_INVALID
    except OSError as e:
        logger.error(f"{e}")
        return EXIT_INVALID

    sys.stdout.write(eoq_io.render(result, config.format, config.full_precision))
    return EXIT_VIOLATION if result.violated else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
