#!/usr/bin/env python3
"""
EOQ Allocation MCP Server (stdio transport)

Exposes the command-line reports as MCP tools. Every tool returns the JSON
report of the matching CLI command, or an error message.
"""

import argparse
import json
import os
import signal
import sys
import time
from typing import Optional

from fastmcp import FastMCP

import eoq_io
from logger_config import setup_logger

# Set up logger
logger = setup_logger(__name__, os.environ.get('LOG_LEVEL', 'INFO'))

SERVICE_NAME = "eoq-allocation-mcp"

mcp = FastMCP("EOQ Allocation MCP Server")

# Settings from the -f config file; tool arguments override them per call
base_config = eoq_io.RunConfig()


def parse_args(argv=None):
    parser = argparse.ArgumentParser(description='EOQ Allocation MCP Server')
    parser.add_argument('-f', '--config-file', default=None,
                        help='Path to a JSON run configuration (see eoq_config_sample.json)')
    return parser.parse_args(argv)


def _config_for(table: Optional[str], **overrides) -> tuple:
    settings = base_config.model_dump()
    sampling = settings.pop('sampling')
    for key in ('sample_count', 'seed'):
        value = overrides.pop(key, None)
        if value is not None:
            sampling[key] = value
    settings.update({key: value for key, value in overrides.items() if value is not None})
    config = eoq_io.RunConfig.model_validate({**settings, 'sampling': sampling})
    if table is None:
        return None, config
    loaded, units = eoq_io.load_table(table)
    return loaded, config.with_units(units)


def _respond(build) -> str:
    try:
        result = build()
    except Exception as e:
        error_msg = f"An unexpected error occurred: {e}"
        logger.error(error_msg)
        return error_msg
    return eoq_io.render(result, "json", base_config.full_precision)


# =============================================================================
# MCP TOOL DEFINITIONS
# =============================================================================

TOOLS = []


def tool(fn):
    """Register fn as an MCP tool and keep it callable as a plain function."""
    mcp.tool(name=fn.__name__)(fn)
    TOOLS.append(fn)
    return fn


@tool
def health() -> str:
    """Server health check, including the bundled fixture checksums."""
    try:
        fixtures = eoq_io.verify_fixtures()
    except OSError as e:
        fixtures = {"error": str(e)}
    return json.dumps({
        "status": "healthy",
        "service": SERVICE_NAME,
        "transport": "stdio",
        "fixtures": fixtures,
        "timestamp": time.time(),
    }, indent=2)


@tool
def basic(demand: float, holding: float, ordering_cost: float, exemption_quantity: float) -> str:
    """Optimal order size and cost of the single-item model with exemption quantity A"""
    return _respond(lambda: eoq_io.cmd_basic(demand, holding, ordering_cost, exemption_quantity))


@tool
def optimize(table: str, coalition: Optional[str] = None, ordering_cost: Optional[float] = None,
             exemption_price: Optional[float] = None) -> str:
    """Optimal joint order sizes and cycle length; table is a fixture name or CSV path, coalition comma-separated ids"""
    def build():
        loaded, config = _config_for(table, ordering_cost=ordering_cost, exemption_price=exemption_price)
        members = [c.strip() for c in coalition.split(',')] if coalition else None
        return eoq_io.cmd_optimize(config, loaded, members)
    return _respond(build)


@tool
def allocate(table: str, rule: str = "hd", sample_count: Optional[int] = None,
             seed: Optional[int] = None, ordering_cost: Optional[float] = None,
             exemption_price: Optional[float] = None) -> str:
    """Allocate the grand-coalition cost with rule hd, sp, shapley-exact or shapley-sampled"""
    def build():
        loaded, config = _config_for(table, rule=rule, sample_count=sample_count, seed=seed,
                                     ordering_cost=ordering_cost, exemption_price=exemption_price)
        return eoq_io.cmd_allocate(config, loaded)
    return _respond(build)


@tool
def game_export(table: str, players: str = "items", max_n: Optional[int] = None) -> str:
    """Costs of every coalition (bit i of mask = i-th player) for items or firms as players"""
    def build():
        loaded, config = _config_for(table, players=players)
        return eoq_io.cmd_game_export(config, loaded, max_n)
    return _respond(build)


@tool
def core_check(table: str, rule: str = "hd", players: str = "items",
               tol: Optional[float] = None) -> str:
    """Check whether an allocation rule's result lies in the core of the cost game"""
    def build():
        loaded, config = _config_for(table, rule=rule, players=players, core_tolerance=tol)
        return eoq_io.cmd_core_check(config, loaded)
    return _respond(build)


@tool
def axioms(table: Optional[str] = None, random_count: Optional[int] = None,
           seed: Optional[int] = None) -> str:
    """Check the properties of the hd and sp rules on a table or on random instances"""
    def build():
        loaded, config = _config_for(table, seed=seed)
        return eoq_io.cmd_axioms(config, loaded, random_count)
    return _respond(build)


@tool
def drop_analysis(table: str, measure: str = "marginal", drops_per_group: int = 1) -> str:
    """Items to stop in every group of the table and the cost of the remaining items"""
    def build():
        loaded, config = _config_for(table, measure=measure, drops_per_group=drops_per_group)
        return eoq_io.cmd_drop_analysis(config, loaded)
    return _respond(build)


@tool
def plotdata(table: str, sample_count: Optional[int] = None, seed: Optional[int] = None) -> str:
    """Shapley and hd-proportional values sorted by Shapley value, for plotting"""
    def build():
        loaded, config = _config_for(table, sample_count=sample_count, seed=seed)
        return eoq_io.cmd_plotdata(config, loaded)
    return _respond(build)


def signal_handler(signum, frame):
    """Handle shutdown signals"""
    logger.info(f"Shutting down (signal {signum})...")
    sys.exit(0)


def main(argv=None):
    """Main entry point"""
    global base_config
    args = parse_args(argv)
    logger.info(f"Config file: {args.config_file}")
    try:
        base_config = eoq_io.initialize_config(args.config_file)
    except ValueError as e:
        logger.error(f"Initialization failed: {e}")
        sys.exit(1)

    signal.signal(signal.SIGINT, signal_handler)
    signal.signal(signal.SIGTERM, signal_handler)

    try:
        logger.info("Starting stdio transport")
        mcp.run(transport="stdio")
    except KeyboardInterrupt:
        logger.info("Shutdown by user")
    except Exception:
        logger.exception("Unexpected error:")
        sys.exit(1)


if __name__ == "__main__":
    main()
