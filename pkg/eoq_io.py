"""
Item tables, bundled fixtures, run configuration and the report builders
shared by the command line and the MCP tool surface.

Every cmd_* function returns a CommandResult; render() turns it into JSON
or CSV text. Reports are deterministic functions of their inputs and seed.
"""
import csv
import hashlib
import io
import json
import math
import os
from typing import Any, Dict, List, Literal, Mapping, Optional, Sequence, Tuple

from pydantic import BaseModel, Field, ValidationError, model_validator

from eoq_core import (
    DEFAULT_FIRM,
    BasicProblem,
    EOQError,
    InvalidPartitionError,
    ItemRecord,
    NonNegativeReal,
    PositiveReal,
    Problem,
    TableParseError,
    ThresholdExceededError,
    basic_policy_report,
    coalition_cost,
    coalition_policy,
    id_sort_key,
)
from eoq_games import (
    DEFAULT_CORE_TOLERANCE,
    DEFAULT_ENUMERATION_THRESHOLD,
    DEFAULT_EXACT_THRESHOLD,
    Allocation,
    CostGame,
    SamplingConfig,
    core_check,
    drop_selection,
    marginal_costs,
    shapley_exact,
    shapley_sampled,
    subadditivity_check,
)
from eoq_rules import (
    DEFAULT_AXIOM_TOLERANCE,
    hd_proportional,
    random_instances,
    run_axiom_battery,
    shapley_proportional,
)
from logger_config import setup_logger

# Set up logger
logger = setup_logger(__name__, os.environ.get('LOG_LEVEL', 'INFO'))

MODULE_DIR = os.path.dirname(os.path.abspath(__file__))
FIXTURE_DIR = os.path.join(MODULE_DIR, 'fixtures')
UNITS_FILE = 'units.json'
CHECKSUM_FILE = 'SHA256SUMS'

HEADER = ('item', 'firm', 'group', 'd', 'h', 'c')
REQUIRED_COLUMNS = ('item', 'd', 'h', 'c')
NUMERIC_COLUMNS = ('d', 'h', 'c')
DEFAULT_EXPORT_LIMIT = 16
REPORT_DECIMALS = 6

RuleName = Literal["hd", "sp", "shapley-exact", "shapley-sampled"]


# =============================================================================
# ITEM TABLES
# =============================================================================

class ItemRow(BaseModel):
    item: str
    firm: Optional[str] = None
    group: Optional[str] = None
    d: PositiveReal
    h: PositiveReal
    c: PositiveReal


class ItemTable(BaseModel):
    """Rows of an item CSV in file order; blank firm means the implicit single firm."""
    rows: List[ItemRow] = Field(min_length=1)

    @model_validator(mode='after')
    def _unique_items(self):
        seen = set()
        for row in self.rows:
            if row.item in seen:
                raise ValueError(f"Duplicate item id: {row.item}")
            seen.add(row.item)
        firmless = [row.item for row in self.rows if not row.firm]
        if firmless and len(firmless) < len(self.rows):
            raise ValueError(f"Items without a firm: {', '.join(firmless)}")
        return self

    @property
    def item_ids(self) -> List[str]:
        return [row.item for row in self.rows]

    @property
    def has_firms(self) -> bool:
        return any(row.firm for row in self.rows)

    def groups(self) -> Dict[str, List[str]]:
        """Drop-analysis groups; every row needs a group once any row has one."""
        if not any(row.group for row in self.rows):
            raise InvalidPartitionError("The table has no group column values")
        ungrouped = [row.item for row in self.rows if not row.group]
        if ungrouped:
            raise InvalidPartitionError(f"Items without a group: {', '.join(ungrouped)}")
        groups: Dict[str, List[str]] = {}
        for row in self.rows:
            groups.setdefault(row.group, []).append(row.item)
        return groups


def parse_items(text: str) -> ItemTable:
    """
    Parse an item CSV with header item,firm,group,d,h,c (firm and group optional).

    Rows are numbered as file lines, the header being row 1. Blank lines are
    skipped.
    """
    reader = csv.DictReader(io.StringIO(text.lstrip('\ufeff')))
    columns = [name.strip() for name in (reader.fieldnames or [])]
    if not columns:
        raise TableParseError("Missing header row", row=1)
    missing = [name for name in REQUIRED_COLUMNS if name not in columns]
    if missing:
        raise TableParseError(f"Header lacks columns: {', '.join(missing)}", row=1)
    unknown = [name for name in columns if name not in HEADER]
    if unknown:
        raise TableParseError(f"Unexpected columns: {', '.join(unknown)}", row=1)
    reader.fieldnames = columns

    rows: List[ItemRow] = []
    lines: List[int] = []
    seen = set()
    for record in reader:
        line = reader.line_num
        if None in record:
            raise TableParseError("Too many fields", row=line)
        values = {key: (value or '').strip() for key, value in record.items()}
        if not any(values.values()):
            continue
        if not values['item']:
            raise TableParseError("Item id must not be blank", row=line, field='item')
        if values['item'] in seen:
            raise TableParseError(f"Duplicate item id {values['item']}", row=line, field='item')
        for name in NUMERIC_COLUMNS:
            try:
                float(values[name])
            except ValueError:
                raise TableParseError(f"Not a number: {values[name]!r}", row=line, field=name)
        try:
            row = ItemRow(item=values['item'], firm=values.get('firm') or None,
                          group=values.get('group') or None,
                          d=values['d'], h=values['h'], c=values['c'])
        except ValidationError as e:
            error = e.errors()[0]
            field = str(error['loc'][0]) if error['loc'] else None
            raise TableParseError(error['msg'], row=line, field=field)
        seen.add(row.item)
        rows.append(row)
        lines.append(line)

    if not rows:
        raise TableParseError("The table has no item rows")
    # The firm column is either blank throughout or filled in throughout
    if any(row.firm for row in rows):
        for row, line in zip(rows, lines):
            if not row.firm:
                raise TableParseError(f"Item {row.item} has no firm while other items do",
                                      row=line, field='firm')
    return ItemTable(rows=rows)


def format_number(value: float) -> str:
    """Shortest text that parses back to the same float; integers without '.0'."""
    if float(value).is_integer() and abs(value) < 1e15:
        return str(int(value))
    return repr(float(value))


def serialize_items(table: ItemTable) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator='\n')
    writer.writerow(HEADER)
    for row in table.rows:
        writer.writerow([row.item, row.firm or '', row.group or '',
                         format_number(row.d), format_number(row.h), format_number(row.c)])
    return buffer.getvalue()


def table_to_problem(table: ItemTable, ordering_cost: float, exemption_price: float) -> Problem:
    items = [
        ItemRecord(item_id=row.item, firm_id=row.firm or DEFAULT_FIRM, demand_rate=row.d,
                   holding_cost_rate=row.h, acquisition_cost=row.c)
        for row in table.rows
    ]
    return Problem(items=items, ordering_cost=ordering_cost, exemption_price=exemption_price)


# =============================================================================
# FIXTURES
# =============================================================================

def fixture_names() -> List[str]:
    return sorted(name[:-4] for name in os.listdir(FIXTURE_DIR) if name.endswith('.csv'))


def fixture_units() -> Dict[str, Dict[str, Any]]:
    with open(os.path.join(FIXTURE_DIR, UNITS_FILE), 'r', encoding='utf-8') as f:
        return json.load(f)


def load_fixture(name: str) -> Tuple[ItemTable, Dict[str, Any]]:
    """Bundled table by name (with or without .csv) and its units entry."""
    filename = name if name.endswith('.csv') else f"{name}.csv"
    path = os.path.join(FIXTURE_DIR, filename)
    if not os.path.isfile(path):
        raise EOQError(f"Unknown fixture '{name}'; available: {', '.join(fixture_names())}")
    with open(path, 'r', encoding='utf-8') as f:
        table = parse_items(f.read())
    return table, fixture_units().get(filename, {})


def load_table(source: str) -> Tuple[ItemTable, Dict[str, Any]]:
    """Fixture name or path to a CSV file; paths carry no units metadata."""
    if os.path.isfile(source):
        logger.info(f"Reading item table {source}")
        with open(source, 'r', encoding='utf-8') as f:
            return parse_items(f.read()), {}
    logger.info(f"Using bundled fixture {source}")
    return load_fixture(source)


def verify_fixtures() -> Dict[str, bool]:
    """Compare every bundled fixture against the pinned SHA-256 checksums."""
    results = {}
    with open(os.path.join(FIXTURE_DIR, CHECKSUM_FILE), 'r', encoding='utf-8') as f:
        for line in f:
            if not line.strip():
                continue
            digest, filename = line.split(maxsplit=1)
            filename = filename.strip().lstrip('*')
            with open(os.path.join(FIXTURE_DIR, filename), 'rb') as data:
                results[filename] = hashlib.sha256(data.read()).hexdigest() == digest
    return results


# =============================================================================
# CONFIGURATION
# =============================================================================

class RunConfig(BaseModel):
    """Settings shared by every command; CLI flags override config-file values."""
    ordering_cost: Optional[PositiveReal] = None
    exemption_price: Optional[PositiveReal] = None
    rule: RuleName = "hd"
    sp_mode: Literal["exact", "sampled"] = "exact"
    measure: Literal["marginal", "shapley", "hd"] = "marginal"
    players: Literal["items", "firms"] = "items"
    sampling: SamplingConfig = Field(default_factory=SamplingConfig)
    workers: int = Field(default=1, ge=1)
    exact_threshold: int = Field(default=DEFAULT_EXACT_THRESHOLD, ge=1)
    enumeration_threshold: int = Field(default=DEFAULT_ENUMERATION_THRESHOLD, ge=1)
    export_max_players: int = Field(default=DEFAULT_EXPORT_LIMIT, ge=1)
    core_tolerance: NonNegativeReal = DEFAULT_CORE_TOLERANCE
    axiom_tolerance: NonNegativeReal = DEFAULT_AXIOM_TOLERANCE
    subadditivity_trials: int = Field(default=10_000, ge=1)
    drops_per_group: int = Field(default=1, ge=1)
    format: Literal["json", "csv"] = "json"
    full_precision: bool = False

    def with_units(self, units: Mapping[str, Any]) -> "RunConfig":
        """Fill a and B from a fixture's units entry when not set explicitly."""
        update = {}
        if self.ordering_cost is None and 'ordering_cost' in units:
            update['ordering_cost'] = units['ordering_cost']
        if self.exemption_price is None and 'exemption_price' in units:
            update['exemption_price'] = units['exemption_price']
        return self.model_validate({**self.model_dump(), **update}) if update else self

    def problem(self, table: ItemTable) -> Problem:
        if self.ordering_cost is None or self.exemption_price is None:
            raise EOQError("Both the ordering cost a and the exemption price B are required")
        return table_to_problem(table, self.ordering_cost, self.exemption_price)


def load_config(config_file=None) -> Dict[str, Any]:
    """
    Load run settings from a JSON file.
    Args:
        config_file: Optional path to config file. Defaults to 'eoq_config.json'
    """
    if config_file is None:
        config_file = 'eoq_config.json'

    # If not absolute path, look in same directory as this script
    if not os.path.isabs(config_file) and not os.path.exists(config_file):
        config_file = os.path.join(MODULE_DIR, config_file)

    try:
        with open(config_file, 'r', encoding='utf-8') as f:
            return json.load(f)
    except FileNotFoundError:
        logger.error(f"Config file not found: {config_file}")
        logger.error("Please create a config file based on eoq_config_sample.json")
        return {}
    except json.JSONDecodeError:
        logger.error(f"Invalid JSON in config file: {config_file}")
        return {}


def initialize_config(config_file=None, overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """Config file values, then explicit overrides (None values are ignored)."""
    settings = load_config(config_file) if config_file is not None else {}
    sampling = dict(settings.get('sampling') or {})
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key in ('sample_count', 'seed'):
            sampling[key] = value
        else:
            settings[key] = value
    settings['sampling'] = sampling
    return RunConfig.model_validate(settings)


# =============================================================================
# REPORTS
# =============================================================================

class CommandResult(BaseModel):
    """JSON report plus an optional flat row view for CSV output.

    columns names the CSV header when rows may be empty; otherwise the keys
    of the first row are used.
    """
    command: str
    data: Dict[str, Any]
    rows: Optional[List[Dict[str, Any]]] = None
    columns: Optional[List[str]] = None
    violated: bool = False


def _rounded(value: Any, full_precision: bool) -> Any:
    if isinstance(value, float):
        if not math.isfinite(value):
            return None
        return value if full_precision else round(value, REPORT_DECIMALS)
    if isinstance(value, dict):
        return {key: _rounded(item, full_precision) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [_rounded(item, full_precision) for item in value]
    return value


def _cell(value: Any, full_precision: bool) -> str:
    if isinstance(value, float):
        if not math.isfinite(value):
            return ''
        return repr(value) if full_precision else f"{value:.{REPORT_DECIMALS}f}"
    if isinstance(value, (list, tuple)):
        return ' '.join(str(item) for item in value)
    if isinstance(value, bool):
        return 'true' if value else 'false'
    return '' if value is None else str(value)


def render(result: CommandResult, fmt: str = "json", full_precision: bool = False) -> str:
    if fmt == "csv" and result.rows is not None:
        buffer = io.StringIO()
        fieldnames = result.columns or (list(result.rows[0]) if result.rows else [])
        writer = csv.DictWriter(buffer, fieldnames=fieldnames, lineterminator='\n')
        writer.writeheader()
        for row in result.rows:
            writer.writerow({key: _cell(value, full_precision) for key, value in row.items()})
        return buffer.getvalue()
    return json.dumps(_rounded(result.data, full_precision), indent=2) + '\n'


# =============================================================================
# COMMANDS
# =============================================================================

def cmd_basic(demand: float, holding: float, ordering_cost: float,
              exemption_quantity: float) -> CommandResult:
    """Optimal order size of the single-item model."""
    p = BasicProblem(demand_rate=demand, holding_cost_rate=holding,
                     ordering_cost=ordering_cost, exemption_quantity=exemption_quantity)
    report = basic_policy_report(p)
    data = {'order_size': report.order_sizes["1"], **report.model_dump(exclude={'order_sizes'})}
    return CommandResult(command="basic", data=data, rows=[data])


def cmd_optimize(config: RunConfig, table: ItemTable,
                 coalition: Optional[Sequence[str]] = None) -> CommandResult:
    p = config.problem(table)
    members = list(coalition) if coalition else list(p.item_ids)
    report = coalition_policy(p, members)
    rows = [{'item': iid, 'order_size': size} for iid, size in report.order_sizes.items()]
    return CommandResult(command="optimize", data=report.model_dump(), rows=rows)


def _player_game(config: RunConfig, p: Problem) -> CostGame:
    return CostGame.firms(p) if config.players == "firms" else CostGame.items(p)


def _allocate_players(config: RunConfig, p: Problem,
                      game: CostGame) -> Tuple[Allocation, Optional[Dict[str, float]]]:
    """The configured rule evaluated on the game's players (items or firms)."""
    level = "firm" if config.players == "firms" else "item"
    if config.rule == "hd":
        return hd_proportional(p, level), None
    if config.rule == "sp":
        result = shapley_proportional(p, mode=config.sp_mode, sampling=config.sampling,
                                      exact_threshold=config.exact_threshold, workers=config.workers)
        values = result.per_firm if level == "firm" else result.per_item
        errors = None if level == "firm" else result.std_errors
        return Allocation(values=values, total=coalition_cost(p, p.item_ids)), errors
    if config.rule == "shapley-exact":
        return shapley_exact(game, exact_threshold=config.exact_threshold), None
    return shapley_sampled(game, config.sampling, workers=config.workers)


def cmd_allocate(config: RunConfig, table: ItemTable) -> CommandResult:
    """Per-item values of the configured rule, with firm sums and std errors when available."""
    p = config.problem(table)
    item_config = config.model_copy(update={'players': 'items'})
    allocation, std_errors = _allocate_players(item_config, p, CostGame.items(p))
    partition = p.firm_partition
    per_firm = {firm: math.fsum(allocation.values[iid] for iid in items)
                for firm, items in partition.items()}
    firm_of = {item.item_id: item.firm_id for item in p.items}

    data: Dict[str, Any] = {'rule': config.rule, 'total': allocation.total,
                            'values': allocation.values}
    if table.has_firms or config.rule == "sp":
        data['per_firm'] = per_firm
    if std_errors is not None:
        data['std_errors'] = std_errors
        data['sample_count'] = config.sampling.sample_count
        data['seed'] = config.sampling.seed
    rows = []
    for iid, value in allocation.values.items():
        row = {'item': iid, 'firm': firm_of[iid], 'value': value}
        if std_errors is not None:
            row['std_error'] = std_errors[iid]
        rows.append(row)
    logger.info(f"Allocated {allocation.total:.6f} with rule {config.rule}")
    return CommandResult(command="allocate", data=data, rows=rows)


def cmd_game_export(config: RunConfig, table: ItemTable,
                    max_n: Optional[int] = None) -> CommandResult:
    """Costs of all 2^n coalitions; bit i of the mask is the i-th player."""
    limit = max_n if max_n is not None else config.export_max_players
    game = _player_game(config, config.problem(table))
    if game.n > limit:
        raise ThresholdExceededError(f"{game.n} players exceed the export limit of {limit}")
    costs = game.cost_table(max_players=limit).tolist()
    rows = [{'mask': mask, 'cost': cost} for mask, cost in enumerate(costs)]
    return CommandResult(command="game-export", data={'players': list(game.players), 'coalitions': rows},
                         rows=rows)


def cmd_core_check(config: RunConfig, table: ItemTable) -> CommandResult:
    p = config.problem(table)
    game = _player_game(config, p)
    allocation, _ = _allocate_players(config, p, game)
    verdict = core_check(game, allocation, tol=config.core_tolerance,
                         max_players=config.enumeration_threshold)
    rows = [{'players': v.players, 'excess': v.magnitude} for v in verdict.violations]
    data = {'rule': config.rule, 'players': config.players, 'allocation': allocation.values,
            **verdict.model_dump()}
    if not verdict.passed:
        logger.info(f"Allocation outside the core: {len(verdict.violations)} violating coalitions")
    return CommandResult(command="core-check", data=data, rows=rows, columns=['players', 'excess'],
                         violated=not verdict.passed)


def cmd_subadditivity(config: RunConfig, table: ItemTable) -> CommandResult:
    game = _player_game(config, config.problem(table))
    verdict = subadditivity_check(game, trials=config.subadditivity_trials, seed=config.sampling.seed)
    rows = [{'players': v.players, 'magnitude': v.magnitude, 'detail': v.detail}
            for v in verdict.violations]
    return CommandResult(command="subadditivity", data=verdict.model_dump(), rows=rows,
                         columns=['players', 'magnitude', 'detail'], violated=not verdict.passed)


def cmd_axioms(config: RunConfig, table: Optional[ItemTable] = None,
               random_count: Optional[int] = None, rules: Sequence[str] = ("hd", "sp")) -> CommandResult:
    """Axiom battery on the table's problem or on random_count random instances."""
    if random_count is not None:
        problems = random_instances(random_count, seed=config.sampling.seed)
    elif table is not None:
        problems = [config.problem(table)]
    else:
        raise EOQError("Either an item table or a random instance count is required")
    results = run_axiom_battery(problems, seed=config.sampling.seed, tol=config.axiom_tolerance,
                                rules=rules)
    rows = [{'instance': r.instance, 'rule': r.rule, 'property': r.verdict.property,
             'passed': r.verdict.passed, 'checked': r.verdict.checked,
             'violations': len(r.verdict.violations), 'margin': r.verdict.margin}
            for r in results]
    failed = [r for r in results if not r.verdict.passed]
    for r in failed:
        logger.info(f"Instance {r.instance}: {r.rule} fails {r.verdict.property}")
    data = {'instances': len(problems), 'passed': not failed, 'results': rows,
            'failures': [r.model_dump() for r in failed]}
    return CommandResult(command="axioms", data=data, rows=rows, violated=bool(failed))


def _item_measure(config: RunConfig, p: Problem) -> Dict[str, float]:
    game = CostGame.items(p)
    if config.measure == "marginal":
        return marginal_costs(game)
    if config.measure == "hd":
        return hd_proportional(p).values
    return shapley_exact(game, exact_threshold=config.exact_threshold).values


def cmd_drop_analysis(config: RunConfig, table: ItemTable,
                      groups: Optional[Mapping[str, Sequence[str]]] = None) -> CommandResult:
    """Stop the largest-measure items of every group and cost the survivors."""
    p = config.problem(table)
    measure = _item_measure(config, p)
    if groups is None:
        groups = table.groups()
    result = drop_selection(p, groups, measure, drops_per_group=config.drops_per_group)
    data = {'measure': config.measure, 'grand_cost': coalition_cost(p, p.item_ids),
            'item_measure': measure, **result.model_dump()}
    rows = [{'group': group, 'dropped': items} for group, items in result.dropped_by_group.items()]
    logger.info(f"Dropping {' '.join(result.dropped)} leaves cost {result.remaining_cost:.2f}")
    return CommandResult(command="drop-analysis", data=data, rows=rows)


def cmd_plotdata(config: RunConfig, table: ItemTable) -> CommandResult:
    """Shapley and hd series aligned by item, sorted by Shapley value ascending."""
    p = config.problem(table)
    game = CostGame.items(p)
    if game.n <= config.exact_threshold:
        shapley, method = shapley_exact(game, exact_threshold=config.exact_threshold).values, "exact"
    else:
        shapley, method = shapley_sampled(game, config.sampling, workers=config.workers)[0].values, "sampled"
    hd = hd_proportional(p).values
    order = sorted(p.item_ids, key=lambda iid: (shapley[iid], id_sort_key(iid)))
    series = [{'rank': rank, 'item': iid, 'shapley': shapley[iid], 'hd_prop': hd[iid]}
              for rank, iid in enumerate(order, start=1)]
    rows = [{key: point[key] for key in ('rank', 'shapley', 'hd_prop')} for point in series]
    return CommandResult(command="plotdata", data={'shapley_method': method, 'series': series},
                         rows=rows)


def cmd_fixtures() -> CommandResult:
    status = verify_fixtures()
    units = fixture_units()
    rows = [{'fixture': name, 'checksum_ok': status.get(f"{name}.csv", False),
             'description': units.get(f"{name}.csv", {}).get('description', '')}
            for name in fixture_names()]
    return CommandResult(command="fixtures", data={'fixtures': rows}, rows=rows,
                         violated=not all(row['checksum_ok'] for row in rows))
