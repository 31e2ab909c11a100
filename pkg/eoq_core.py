"""
Core EOQ functions for inventory problems with exemptable ordering costs.

The supplier waives the ordering cost a when an order reaches a threshold:
an order size A in the basic single-item model, an order price B when items
are ordered jointly. Joint orders share one cycle length T = Q_i / d_i, so a
coalition of items costs

    c(S) = H_S * min{ B / (2 C_S), sqrt(2a / H_S) }

per unit of time, with H_S = sum of h_i d_i and C_S = sum of c_i d_i over S.
Every coalition cost depends on an item only through its products H and C.
"""
import math
import os
from typing import Annotated, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from logger_config import setup_logger

# Set up logger
logger = setup_logger(__name__, os.environ.get('LOG_LEVEL', 'INFO'))

PositiveReal = Annotated[float, Field(gt=0, allow_inf_nan=False)]
NonNegativeReal = Annotated[float, Field(ge=0, allow_inf_nan=False)]

DEFAULT_FIRM = "1"


# =============================================================================
# ERRORS
# =============================================================================

class EOQError(ValueError):
    """Base class for every domain error raised by this package."""


class UnknownItemError(EOQError):
    """A coalition or merge names an item or firm the problem does not have."""


class ThresholdExceededError(EOQError):
    """An exhaustive enumeration was requested above its configured player limit."""


class InefficientAllocationError(EOQError):
    """An allocation does not add up to the grand-coalition cost."""


class InvalidPartitionError(EOQError):
    """Groups passed to the drop analysis do not partition the items."""


class InvalidMergeError(EOQError):
    """A merge specification cannot be applied to the problem."""


class TableParseError(EOQError):
    """An item table could not be parsed; carries the offending row and field."""

    def __init__(self, message: str, row: Optional[int] = None, field: Optional[str] = None):
        location = []
        if row is not None:
            location.append(f"row {row}")
        if field is not None:
            location.append(f"field '{field}'")
        prefix = f"{', '.join(location)}: " if location else ""
        super().__init__(f"{prefix}{message}")
        self.row = row
        self.field = field


# =============================================================================
# DOMAIN TYPES
# =============================================================================

def _as_identifier(value) -> str:
    if isinstance(value, bool) or value is None:
        raise ValueError(f"Invalid identifier: {value!r}")
    if isinstance(value, float) and value.is_integer():
        value = int(value)
    text = str(value).strip()
    if not text:
        raise ValueError("Identifier must not be blank")
    return text


def id_sort_key(identifier: str) -> Tuple[int, int, str]:
    """Ascending identifier order: numeric ids by value, then the rest as text."""
    if identifier.isascii() and identifier.isdecimal():
        return (0, int(identifier), identifier)
    return (1, 0, identifier)


class BasicProblem(BaseModel):
    """Single item, ordering cost waived for orders of at least A units."""
    model_config = ConfigDict(frozen=True)

    demand_rate: PositiveReal
    holding_cost_rate: PositiveReal
    ordering_cost: PositiveReal
    exemption_quantity: PositiveReal


class ItemRecord(BaseModel):
    model_config = ConfigDict(frozen=True)

    item_id: str
    firm_id: str = DEFAULT_FIRM
    demand_rate: PositiveReal
    holding_cost_rate: PositiveReal
    acquisition_cost: PositiveReal

    @field_validator('item_id', 'firm_id', mode='before')
    @classmethod
    def _identifier(cls, value):
        return _as_identifier(value)

    @model_validator(mode='after')
    def _positive_products(self):
        for name, product in (('h*d', self.holding_of_demand), ('c*d', self.acquisition_of_demand)):
            if not (product > 0 and math.isfinite(product)):
                raise ValueError(f"Item {self.item_id}: {name} must be positive and finite, got {product}")
        return self

    @property
    def holding_of_demand(self) -> float:
        """H = h * d, the holding cost per unit of time of the demand per unit of time."""
        return self.holding_cost_rate * self.demand_rate

    @property
    def acquisition_of_demand(self) -> float:
        """C = c * d, the acquisition cost of the demand per unit of time."""
        return self.acquisition_cost * self.demand_rate


class Problem(BaseModel):
    """
    Multi-firm-item EOQ problem with exemptable ordering costs.

    A single firm is the multi-item model; one item per firm is the
    multi-firm model. Firms are given by the items' firm_id.
    """
    model_config = ConfigDict(frozen=True)

    items: List[ItemRecord] = Field(min_length=1)
    ordering_cost: PositiveReal
    exemption_price: PositiveReal

    @model_validator(mode='after')
    def _unique_items(self):
        seen = set()
        for item in self.items:
            if item.item_id in seen:
                raise ValueError(f"Duplicate item id: {item.item_id}")
            seen.add(item.item_id)
        return self

    @classmethod
    def from_parameters(cls, demand: Sequence[float], holding: Sequence[float],
                        acquisition: Sequence[float], ordering_cost: float,
                        exemption_price: float, firms: Optional[Sequence] = None,
                        item_ids: Optional[Sequence] = None) -> "Problem":
        """Build a problem from parallel parameter vectors; ids default to 1..n."""
        n = len(demand)
        if not (len(holding) == len(acquisition) == n):
            raise EOQError("Parameter vectors must have equal length")
        if item_ids is None:
            item_ids = [str(k + 1) for k in range(n)]
        if firms is None:
            firms = [DEFAULT_FIRM] * n
        items = [
            ItemRecord(item_id=item_ids[k], firm_id=firms[k], demand_rate=demand[k],
                       holding_cost_rate=holding[k], acquisition_cost=acquisition[k])
            for k in range(n)
        ]
        return cls(items=items, ordering_cost=ordering_cost, exemption_price=exemption_price)

    # -- lookups ---------------------------------------------------------------

    @property
    def item_ids(self) -> Tuple[str, ...]:
        return tuple(item.item_id for item in self.items)

    @property
    def firm_ids(self) -> Tuple[str, ...]:
        """Firms in order of first appearance."""
        return tuple(dict.fromkeys(item.firm_id for item in self.items))

    @property
    def firm_partition(self) -> Dict[str, Tuple[str, ...]]:
        partition: Dict[str, List[str]] = {firm: [] for firm in self.firm_ids}
        for item in self.items:
            partition[item.firm_id].append(item.item_id)
        return {firm: tuple(ids) for firm, ids in partition.items()}

    @property
    def holding_vector(self) -> np.ndarray:
        return np.array([item.holding_of_demand for item in self.items], dtype=float)

    @property
    def acquisition_vector(self) -> np.ndarray:
        return np.array([item.acquisition_of_demand for item in self.items], dtype=float)

    @property
    def demand_vector(self) -> np.ndarray:
        return np.array([item.demand_rate for item in self.items], dtype=float)

    def item(self, item_id) -> ItemRecord:
        item_id = _as_identifier(item_id)
        for item in self.items:
            if item.item_id == item_id:
                return item
        raise UnknownItemError(f"Unknown item id: {item_id}")

    def indices(self, item_ids: Iterable) -> np.ndarray:
        """Positions of the given items; raises UnknownItemError for strangers."""
        position = {iid: k for k, iid in enumerate(self.item_ids)}
        result = []
        for raw in item_ids:
            iid = _as_identifier(raw)
            if iid not in position:
                raise UnknownItemError(f"Unknown item id: {iid}")
            result.append(position[iid])
        return np.array(sorted(set(result)), dtype=int)

    def firm_items(self, firm_id) -> Tuple[str, ...]:
        firm_id = _as_identifier(firm_id)
        partition = self.firm_partition
        if firm_id not in partition:
            raise UnknownItemError(f"Unknown firm id: {firm_id}")
        return partition[firm_id]

    # -- derived problems ------------------------------------------------------

    def single_firm(self, firm_id: str = DEFAULT_FIRM) -> "Problem":
        """The same items ordered by one firm (multi-item model)."""
        return self.with_firm_assignment({item.item_id: firm_id for item in self.items})

    def one_item_per_firm(self) -> "Problem":
        """Every item is its own firm (multi-firm model); firm ids equal item ids."""
        return self.with_firm_assignment({item.item_id: item.item_id for item in self.items})

    def with_firm_assignment(self, assignment: Mapping) -> "Problem":
        assignment = {_as_identifier(k): _as_identifier(v) for k, v in assignment.items()}
        missing = [item.item_id for item in self.items if item.item_id not in assignment]
        if missing:
            raise InvalidPartitionError(f"Items without a firm: {', '.join(missing)}")
        items = [item.model_copy(update={'firm_id': assignment[item.item_id]}) for item in self.items]
        return self.model_copy(update={'items': items})

    def restricted_to(self, item_ids: Iterable) -> "Problem":
        keep = set(self.item_ids[k] for k in self.indices(item_ids))
        if not keep:
            raise EOQError("A problem needs at least one item")
        return self.model_copy(update={'items': [item for item in self.items if item.item_id in keep]})

    def without_items(self, item_ids: Iterable) -> "Problem":
        drop = set(self.item_ids[k] for k in self.indices(item_ids))
        remaining = [item.item_id for item in self.items if item.item_id not in drop]
        if not remaining:
            raise EOQError("Cannot remove every item of a problem")
        return self.restricted_to(remaining)


class PolicyReport(BaseModel):
    order_sizes: Dict[str, PositiveReal]
    cycle_length: PositiveReal
    orders_per_time: PositiveReal
    cost_per_time: NonNegativeReal
    exempt: bool = Field(description="True when orders reach the exemption threshold")


# =============================================================================
# BASIC MODEL
# =============================================================================

def basic_cpt(p: BasicProblem, order_size: float) -> float:
    """Average cost per unit of time of ordering Q units whenever stock runs out."""
    if not (order_size > 0 and math.isfinite(order_size)):
        raise EOQError(f"Order size must be positive and finite, got {order_size}")
    holding = p.holding_cost_rate * order_size / 2.0
    if order_size < p.exemption_quantity:
        return p.ordering_cost * p.demand_rate / order_size + holding
    return holding


def basic_optimal_policy(p: BasicProblem) -> Tuple[float, float]:
    """
    Cost-minimizing order size and its cost per unit of time.

    Orders of exactly A units are taken when 2 * sqrt(2ad/h) >= A; at equality
    both branches cost the same.
    """
    eoq = math.sqrt(2.0 * p.ordering_cost * p.demand_rate / p.holding_cost_rate)
    if 2.0 * eoq < p.exemption_quantity:
        return eoq, math.sqrt(2.0 * p.ordering_cost * p.demand_rate * p.holding_cost_rate)
    return p.exemption_quantity, p.holding_cost_rate * p.exemption_quantity / 2.0


def basic_policy_report(p: BasicProblem, item_id: str = "1") -> PolicyReport:
    order_size, cost = basic_optimal_policy(p)
    cycle = order_size / p.demand_rate
    return PolicyReport(
        order_sizes={item_id: order_size},
        cycle_length=cycle,
        orders_per_time=p.demand_rate / order_size,
        cost_per_time=cost,
        exempt=order_size == p.exemption_quantity,
    )


# =============================================================================
# JOINT ORDERS
# =============================================================================

def cost_factor(holding_total, acquisition_total, ordering_cost: float, exemption_price: float):
    """
    min{ B / (2C), sqrt(2a / H) } elementwise; 0 where H is 0 (empty coalition).

    Accepts scalars or numpy arrays of coalition sums.
    """
    holding = np.asarray(holding_total, dtype=float)
    acquisition = np.asarray(acquisition_total, dtype=float)
    with np.errstate(divide='ignore', invalid='ignore'):
        factor = np.minimum(exemption_price / (2.0 * acquisition),
                            np.sqrt(2.0 * ordering_cost / holding))
    factor = np.where(holding > 0, factor, 0.0)
    return factor if factor.ndim else float(factor)


def cost_from_sums(holding_total, acquisition_total, ordering_cost: float, exemption_price: float):
    """Coalition cost from its aggregate H and C sums (vectorized)."""
    factor = cost_factor(holding_total, acquisition_total, ordering_cost, exemption_price)
    cost = np.asarray(holding_total, dtype=float) * factor
    return cost if cost.ndim else float(cost)


def coalition_cost(p: Problem, coalition: Iterable) -> float:
    """Minimum average cost per unit of time of the items in the coalition ordering jointly."""
    idx = p.indices(coalition)
    if idx.size == 0:
        return 0.0
    return cost_from_sums(p.holding_vector[idx].sum(), p.acquisition_vector[idx].sum(),
                          p.ordering_cost, p.exemption_price)


def coalition_cpt(p: Problem, coalition: Iterable, cycle_length: float) -> float:
    """
    Average cost per unit of time of the coalition ordering every T time units.

    The ordering cost is waived when the order price C_S * T reaches B.
    """
    if not (cycle_length > 0 and math.isfinite(cycle_length)):
        raise EOQError(f"Cycle length must be positive and finite, got {cycle_length}")
    idx = p.indices(coalition)
    if idx.size == 0:
        return 0.0
    holding = p.holding_vector[idx].sum()
    acquisition = p.acquisition_vector[idx].sum()
    cost = holding * cycle_length / 2.0
    # compared as T < B / C_S so the exempt cycle B / C_S itself is exempt
    if cycle_length < p.exemption_price / acquisition:
        cost += p.ordering_cost / cycle_length
    return cost


def coalition_policy(p: Problem, coalition: Iterable) -> PolicyReport:
    """Optimal joint order sizes, cycle length and cost for a nonempty coalition."""
    idx = p.indices(coalition)
    if idx.size == 0:
        raise EOQError("Cannot compute a policy for an empty coalition")
    holding = p.holding_vector[idx].sum()
    acquisition = p.acquisition_vector[idx].sum()
    eoq_cycle = math.sqrt(2.0 * p.ordering_cost / holding)
    exempt_cycle = p.exemption_price / acquisition
    exempt = 2.0 * eoq_cycle >= exempt_cycle
    cycle = exempt_cycle if exempt else eoq_cycle
    logger.debug(f"Policy for {idx.size} items: exempt={exempt}, cycle={cycle:.6f}")

    demand = p.demand_vector
    ids = p.item_ids
    return PolicyReport(
        order_sizes={ids[k]: float(cycle * demand[k]) for k in idx},
        cycle_length=cycle,
        orders_per_time=1.0 / cycle,
        cost_per_time=cost_from_sums(holding, acquisition, p.ordering_cost, p.exemption_price),
        exempt=bool(exempt),
    )


# =============================================================================
# RANDOM INSTANCES
# =============================================================================

def random_problem(rng: np.random.Generator, max_items: int = 8, max_firms: int = 3,
                   duplicate_rate: float = 0.2, min_items: int = 1) -> Problem:
    """
    Draw a valid problem for property checks.

    With probability duplicate_rate an item copies the (d, h, c) of an earlier
    item, so symmetry checks have pairs to compare.
    """
    n = int(rng.integers(min_items, max_items + 1))
    demand = rng.uniform(1.0, 500.0, n)
    holding = rng.uniform(0.01, 1.0, n)
    acquisition = rng.uniform(0.5, 100.0, n)
    for k in range(1, n):
        if rng.random() < duplicate_rate:
            source = int(rng.integers(0, k))
            demand[k], holding[k], acquisition[k] = demand[source], holding[source], acquisition[source]

    firm_count = int(rng.integers(1, min(max_firms, n) + 1))
    firms = np.concatenate([np.arange(firm_count), rng.integers(0, firm_count, n - firm_count)])
    rng.shuffle(firms)

    ordering_cost = float(rng.uniform(1.0, 5000.0))
    exemption_price = float(math.exp(rng.uniform(math.log(10.0), math.log(1e6))))
    return Problem.from_parameters(
        demand.tolist(), holding.tolist(), acquisition.tolist(),
        ordering_cost, exemption_price,
        firms=[str(f + 1) for f in firms],
    )
