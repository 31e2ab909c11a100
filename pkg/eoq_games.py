"""
Cooperative cost games induced by EOQ problems with exemptable ordering costs.

Players are items or firms (each owning a set of items). Coalitions are
bitmasks over the player order: bit i set means player i belongs to it.
"""
import math
import os
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed
from pydantic import BaseModel, Field, model_validator

from eoq_core import (
    EOQError,
    InefficientAllocationError,
    InvalidPartitionError,
    Problem,
    ThresholdExceededError,
    UnknownItemError,
    cost_factor,
    id_sort_key,
)
from logger_config import setup_logger

# Set up logger
logger = setup_logger(__name__, os.environ.get('LOG_LEVEL', 'INFO'))

DEFAULT_EXACT_THRESHOLD = 20
DEFAULT_ENUMERATION_THRESHOLD = 22
DEFAULT_CORE_TOLERANCE = 1e-6
# Relative rounding slack on top of the absolute efficiency tolerance
EFFICIENCY_ROUNDING = 1e-12
MEMO_LIMIT = 25
TABLE_LIMIT = 25
SUBADDITIVITY_EXHAUSTIVE_LIMIT = 12
SAMPLING_CHUNK = 4096


# =============================================================================
# REPORT TYPES
# =============================================================================

class Allocation(BaseModel):
    """Per-player monetary rates adding up to the grand-coalition cost."""
    values: Dict[str, float]
    total: float

    @model_validator(mode='after')
    def _efficient(self):
        gap = abs(math.fsum(self.values.values()) - self.total)
        if gap > 1e-6 * max(1.0, abs(self.total)):
            raise ValueError(f"Allocation sums to {math.fsum(self.values.values())}, expected {self.total}")
        return self


class SamplingConfig(BaseModel):
    sample_count: int = Field(default=100_000, ge=1)
    seed: int = Field(default=0, ge=0, le=2**64 - 1)


class Violation(BaseModel):
    players: List[str]
    magnitude: float
    detail: str = ""


class Verdict(BaseModel):
    """Outcome of a property check; margin is the smallest slack observed."""
    property: str
    passed: bool
    checked: int
    violations: List[Violation] = Field(default_factory=list)
    margin: Optional[float] = None


class DropResult(BaseModel):
    dropped: List[str]
    dropped_by_group: Dict[str, List[str]]
    remaining_cost: float


# =============================================================================
# COST GAME
# =============================================================================

def subset_sums(values: Sequence[float]) -> np.ndarray:
    """Sum of values over every bitmask coalition, built by doubling."""
    values = np.asarray(values, dtype=float)
    sums = np.zeros(1 << values.size)
    for i, value in enumerate(values):
        size = 1 << i
        sums[size:2 * size] = sums[:size] + value
    return sums


def subset_sizes(n: int) -> np.ndarray:
    sizes = np.zeros(1 << n, dtype=np.int64)
    for i in range(n):
        size = 1 << i
        sizes[size:2 * size] = sizes[:size] + 1
    return sizes


class CostGame:
    """
    Cost game over players that each own a set of items of a problem.

    cost(S) is the share H_S * factor(S + background) of the players in S when
    they order jointly with the background items. With no background it is
    the coalition cost of S's items; with the other firms' items as background
    it is the per-firm game behind the Shapley-proportional rule.
    """

    def __init__(self, problem: Problem, players: Optional[Mapping] = None,
                 background: Iterable = (), memoize: Optional[bool] = None):
        if players is None:
            players = {iid: (iid,) for iid in problem.item_ids}
        holding = problem.holding_vector
        acquisition = problem.acquisition_vector

        self.problem = problem
        self.players: Tuple[str, ...] = tuple(str(player) for player in players)
        owned = [problem.indices(items) for items in players.values()]
        flat = np.concatenate(owned) if owned else np.array([], dtype=int)
        background_idx = problem.indices(background)
        if len(set(flat.tolist())) != flat.size or set(flat.tolist()) & set(background_idx.tolist()):
            raise InvalidPartitionError("Players and background must own disjoint item sets")
        if any(idx.size == 0 for idx in owned):
            raise InvalidPartitionError("Every player must own at least one item")

        self.player_items: Dict[str, Tuple[str, ...]] = {
            player: tuple(problem.item_ids[k] for k in idx) for player, idx in zip(self.players, owned)
        }
        self.holding = np.array([holding[idx].sum() for idx in owned], dtype=float)
        self.acquisition = np.array([acquisition[idx].sum() for idx in owned], dtype=float)
        self.base_holding = float(holding[background_idx].sum())
        self.base_acquisition = float(acquisition[background_idx].sum())
        self.ordering_cost = problem.ordering_cost
        self.exemption_price = problem.exemption_price

        if memoize is None:
            memoize = self.n <= MEMO_LIMIT
        # insert-only; concurrent readers may race on a miss but store equal values
        self._memo: Optional[Dict[int, float]] = {0: 0.0} if memoize else None

    @classmethod
    def items(cls, problem: Problem) -> "CostGame":
        """Every item is a player."""
        return cls(problem)

    @classmethod
    def firms(cls, problem: Problem) -> "CostGame":
        """Every firm is a player owning its items."""
        return cls(problem, players=problem.firm_partition)

    @classmethod
    def within_firm(cls, problem: Problem, firm_id: str) -> "CostGame":
        """Items of one firm as players, the other firms' items as background."""
        own = problem.firm_items(firm_id)
        others = [iid for iid in problem.item_ids if iid not in own]
        return cls(problem, players={iid: (iid,) for iid in own}, background=others)

    @property
    def n(self) -> int:
        return len(self.players)

    def mask_of(self, coalition: Iterable) -> int:
        position = {player: i for i, player in enumerate(self.players)}
        mask = 0
        for player in coalition:
            key = str(player)
            if key not in position:
                raise UnknownItemError(f"Unknown player: {key}")
            mask |= 1 << position[key]
        return mask

    def members(self, mask: int) -> List[str]:
        return [player for i, player in enumerate(self.players) if mask >> i & 1]

    def cost_of_sums(self, holding_sum, acquisition_sum):
        """Vectorized cost from the players' aggregate H and C sums."""
        holding_sum = np.asarray(holding_sum, dtype=float)
        factor = cost_factor(holding_sum + self.base_holding,
                             np.asarray(acquisition_sum, dtype=float) + self.base_acquisition,
                             self.ordering_cost, self.exemption_price)
        cost = holding_sum * factor
        return cost if cost.ndim else float(cost)

    def cost_mask(self, mask: int) -> float:
        if self._memo is not None and mask in self._memo:
            return self._memo[mask]
        members = [i for i in range(self.n) if mask >> i & 1]
        value = self.cost_of_sums(self.holding[members].sum(), self.acquisition[members].sum())
        if self._memo is not None:
            self._memo[mask] = value
        return value

    def cost(self, coalition: Iterable) -> float:
        return self.cost_mask(self.mask_of(coalition))

    __call__ = cost

    def grand_cost(self) -> float:
        return self.cost_of_sums(self.holding.sum(), self.acquisition.sum())

    def cost_table(self, max_players: int = TABLE_LIMIT) -> np.ndarray:
        """Costs of all 2^n coalitions indexed by bitmask."""
        if self.n > max_players:
            raise ThresholdExceededError(f"{self.n} players exceed the enumeration limit of {max_players}")
        logger.debug(f"Building cost table over {1 << self.n} coalitions")
        return self.cost_of_sums(subset_sums(self.holding), subset_sums(self.acquisition))


# =============================================================================
# SHAPLEY VALUE
# =============================================================================

def shapley_exact(game: CostGame, exact_threshold: int = DEFAULT_EXACT_THRESHOLD) -> Allocation:
    """Shapley value by enumerating every coalition with factorial weights."""
    n = game.n
    if n > exact_threshold:
        raise ThresholdExceededError(
            f"Exact Shapley value limited to {exact_threshold} players, game has {n}")
    table = game.cost_table(max_players=max(exact_threshold, n))
    sizes = subset_sizes(n)
    # |S|! (n - |S| - 1)! / n!
    weights = np.array([1.0 / (n * math.comb(n - 1, s)) for s in range(n)])

    values = np.empty(n)
    for i in range(n):
        block = 1 << i
        view = table.reshape(-1, 2, block)
        size_view = sizes.reshape(-1, 2, block)[:, 0, :]
        values[i] = np.sum(weights[size_view] * (view[:, 1, :] - view[:, 0, :]))

    total = float(table[-1]) if n else 0.0
    logger.debug(f"Exact Shapley value over {n} players, total {total:.6f}")
    return Allocation(values=dict(zip(game.players, values.tolist())), total=total)


def _sample_chunk(game: CostGame, seed: int, index: int, count: int) -> Tuple[int, np.ndarray, np.ndarray]:
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))
    perms = rng.permuted(np.tile(np.arange(game.n), (count, 1)), axis=1)
    costs = game.cost_of_sums(np.cumsum(game.holding[perms], axis=1),
                              np.cumsum(game.acquisition[perms], axis=1))
    marginals = np.diff(costs, axis=1, prepend=0.0)
    by_player = np.empty_like(marginals)
    np.put_along_axis(by_player, perms, marginals, axis=1)
    mean = by_player.mean(axis=0)
    return count, mean, ((by_player - mean) ** 2).sum(axis=0)


def shapley_sampled(game: CostGame, cfg: SamplingConfig,
                    workers: int = 1) -> Tuple[Allocation, Dict[str, float]]:
    """
    Permutation-sampling estimate of the Shapley value.

    Each of sample_count uniform permutations contributes every player's
    marginal cost on joining its predecessors. Chunks use their own seed
    streams and are merged in chunk order, so the result does not depend on
    the number of workers. The estimate is shifted additively so that it
    adds up to c(N) exactly; std errors are sample std / sqrt(sample_count).
    """
    n = game.n
    m = cfg.sample_count
    chunks = [(j, min(SAMPLING_CHUNK, m - j * SAMPLING_CHUNK))
              for j in range(math.ceil(m / SAMPLING_CHUNK))]
    logger.debug(f"Sampling {m} permutations of {n} players in {len(chunks)} chunks")

    def run(chunk):
        return _sample_chunk(game, cfg.seed, *chunk)

    if workers > 1:
        results = Parallel(n_jobs=workers, prefer="threads")(delayed(run)(chunk) for chunk in chunks)
    else:
        results = [run(chunk) for chunk in chunks]

    # Chan et al. pairwise merge of per-chunk means and squared deviations
    count, mean, m2 = 0, np.zeros(n), np.zeros(n)
    for chunk_count, chunk_mean, chunk_m2 in results:
        merged = count + chunk_count
        delta = chunk_mean - mean
        mean = mean + delta * chunk_count / merged
        m2 = m2 + chunk_m2 + delta ** 2 * count * chunk_count / merged
        count = merged

    total = game.grand_cost()
    values = mean + (total - math.fsum(mean)) / n
    if m > 1:
        std_errors = np.sqrt(m2 / (m - 1)) / math.sqrt(m)
    else:
        std_errors = np.full(n, np.nan)
    allocation = Allocation(values=dict(zip(game.players, values.tolist())), total=total)
    return allocation, dict(zip(game.players, std_errors.tolist()))


# =============================================================================
# CORE, SUBADDITIVITY, MARGINALS
# =============================================================================

def _allocation_vector(game: CostGame, allocation: Allocation) -> np.ndarray:
    missing = [player for player in game.players if player not in allocation.values]
    extra = [player for player in allocation.values if player not in game.player_items]
    if missing or extra:
        raise UnknownItemError(
            f"Allocation players do not match the game (missing {missing}, unexpected {extra})")
    return np.array([allocation.values[player] for player in game.players], dtype=float)


def coalition_excesses(game: CostGame, amounts: np.ndarray, max_players: int) -> Tuple[np.ndarray, np.ndarray]:
    """Allocated amount minus cost for every coalition (index = bitmask)."""
    if game.n > max_players:
        raise ThresholdExceededError(
            f"{game.n} players exceed the enumeration limit of {max_players}")
    table = game.cost_table(max_players=max_players)
    return subset_sums(amounts) - table, table


def core_check(game: CostGame, allocation: Allocation, tol: float = DEFAULT_CORE_TOLERANCE,
               max_players: int = DEFAULT_ENUMERATION_THRESHOLD) -> Verdict:
    """
    Check that no coalition is charged more than its stand-alone cost.

    The allocation must be efficient within tol; every violating coalition is
    reported with its excess, largest first.
    """
    x = _allocation_vector(game, allocation)
    grand = game.grand_cost()
    limit = tol + EFFICIENCY_ROUNDING * max(1.0, abs(grand))
    for label, amount in (("sums to", math.fsum(x)), ("has total", allocation.total)):
        if abs(amount - grand) > limit:
            raise InefficientAllocationError(
                f"Allocation {label} {amount:.9f}, grand coalition costs {grand:.9f}")

    excess, table = coalition_excesses(game, x, max_players)
    full = (1 << game.n) - 1
    proper = excess[1:full]
    violating = np.nonzero(proper > tol)[0] + 1
    order = sorted(violating.tolist(), key=lambda mask: (-excess[mask], mask))
    violations = [
        Violation(players=game.members(mask), magnitude=float(excess[mask]),
                  detail=f"allocated {excess[mask] + table[mask]:.6f} > cost {table[mask]:.6f}")
        for mask in order
    ]
    logger.debug(f"Core check over {full} coalitions: {len(violations)} violations")
    return Verdict(
        property="core",
        passed=not violations,
        checked=full,
        violations=violations,
        margin=float(-proper.max()) if proper.size else None,
    )


def subadditivity_check(game: CostGame, trials: int = 10_000, seed: int = 0,
                        exhaustive_limit: int = SUBADDITIVITY_EXHAUSTIVE_LIMIT) -> Verdict:
    """
    Verify c(S u T) < c(S) + c(T) for disjoint nonempty S and T.

    Every unordered pair is checked up to exhaustive_limit players; above
    that, `trials` random pairs are drawn.
    """
    n = game.n
    violations: List[Violation] = []
    margin = math.inf
    checked = 0

    if n <= exhaustive_limit:
        table = game.cost_table()
        masks = np.arange(1, 1 << n)
        for s in range(1, 1 << n):
            others = masks[(masks & s) == 0]
            others = others[others > s]
            if others.size == 0:
                continue
            slack = table[s] + table[others] - table[s | others]
            checked += others.size
            margin = min(margin, float(slack.min()))
            for t in others[slack <= 0].tolist():
                violations.append(Violation(
                    players=game.members(s | t), magnitude=float(table[s | t] - table[s] - table[t]),
                    detail=f"S={game.members(s)} T={game.members(t)}"))
    else:
        rng = np.random.default_rng(seed)
        labels = rng.integers(0, 3, (trials, n))
        in_s, in_t = labels == 1, labels == 2
        valid = in_s.any(axis=1) & in_t.any(axis=1)
        in_s, in_t = in_s[valid], in_t[valid]
        cost_s = game.cost_of_sums(in_s @ game.holding, in_s @ game.acquisition)
        cost_t = game.cost_of_sums(in_t @ game.holding, in_t @ game.acquisition)
        union = in_s | in_t
        cost_u = game.cost_of_sums(union @ game.holding, union @ game.acquisition)
        slack = np.atleast_1d(cost_s + cost_t - cost_u)
        checked = int(slack.size)
        if checked:
            margin = float(slack.min())
        for row in np.nonzero(slack <= 0)[0].tolist():
            players = [p for p, member in zip(game.players, union[row]) if member]
            violations.append(Violation(players=players, magnitude=float(-slack[row]),
                                        detail="random disjoint pair"))

    logger.debug(f"Subadditivity over {checked} pairs: {len(violations)} violations")
    return Verdict(property="strict-subadditivity", passed=not violations, checked=checked,
                   violations=violations, margin=None if math.isinf(margin) else margin)


def marginal_costs(game: CostGame) -> Dict[str, float]:
    """c(N) - c(N without i) for every player."""
    grand = game.grand_cost()
    without = game.cost_of_sums(game.holding.sum() - game.holding,
                                game.acquisition.sum() - game.acquisition)
    return dict(zip(game.players, (grand - without).tolist()))


# =============================================================================
# DROP ANALYSIS
# =============================================================================

def drop_selection(problem: Problem, groups: Mapping[str, Iterable], measure: Mapping[str, float],
                   drops_per_group: int = 1) -> DropResult:
    """
    Drop, in every group, the drops_per_group items with the largest measure.

    Ties go to the smaller item id. The remaining cost is the coalition cost
    of the surviving items.
    """
    groups = {str(group): [str(item) for item in members] for group, members in groups.items()}
    listed = [item for members in groups.values() for item in members]
    if sorted(listed) != sorted(problem.item_ids) or len(set(listed)) != len(listed):
        raise InvalidPartitionError("Groups must partition the items of the problem")
    missing = [item for item in problem.item_ids if item not in measure]
    if missing:
        raise EOQError(f"Measure missing for items: {', '.join(missing)}")
    if drops_per_group < 1:
        raise EOQError("drops_per_group must be at least 1")

    dropped_by_group: Dict[str, List[str]] = {}
    for group, members in groups.items():
        if drops_per_group >= len(members):
            raise EOQError(
                f"Group {group} has {len(members)} items, cannot drop {drops_per_group}")
        ranked = sorted(members, key=lambda item: (-measure[item], id_sort_key(item)))
        dropped_by_group[group] = sorted(ranked[:drops_per_group], key=id_sort_key)

    dropped = sorted((item for items in dropped_by_group.values() for item in items), key=id_sort_key)
    survivors = [item for item in problem.item_ids if item not in set(dropped)]
    game = CostGame.items(problem)
    remaining = game.cost(survivors)
    logger.debug(f"Dropping {dropped}, remaining cost {remaining:.6f}")
    return DropResult(dropped=dropped, dropped_by_group=dropped_by_group, remaining_cost=remaining)
