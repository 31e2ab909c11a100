"""
Allocation rules for EOQ problems with exemptable ordering costs and
executable checks of the properties they are characterised by.

A rule maps a Problem to an Allocation over its items. Checks run at the
item level (players are items, compared through H = h*d) or at the firm
level (players are firms, compared through their summed H).
"""
import math
import os
from typing import Callable, Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed
from pydantic import BaseModel, Field

from eoq_core import (
    InvalidMergeError,
    ItemRecord,
    Problem,
    ThresholdExceededError,
    coalition_cost,
    cost_factor,
    random_problem,
)
from eoq_games import (
    DEFAULT_ENUMERATION_THRESHOLD,
    DEFAULT_EXACT_THRESHOLD,
    Allocation,
    CostGame,
    SamplingConfig,
    Verdict,
    Violation,
    coalition_excesses,
    shapley_exact,
    shapley_sampled,
)
from logger_config import setup_logger

# Set up logger
logger = setup_logger(__name__, os.environ.get('LOG_LEVEL', 'INFO'))

DEFAULT_AXIOM_TOLERANCE = 1e-7
SYMMETRY_RTOL = 1e-12

Rule = Callable[[Problem], Allocation]
Level = Literal["item", "firm"]


class FirmAllocation(BaseModel):
    per_item: Dict[str, float]
    per_firm: Dict[str, float]
    std_errors: Optional[Dict[str, float]] = None


class MergeSpec(BaseModel):
    """Players in `absorbed` merge into `absorber`, summing their H and C."""
    absorber: str
    absorbed: List[str] = Field(min_length=1)


class AxiomResult(BaseModel):
    instance: int
    rule: str
    verdict: Verdict


# =============================================================================
# RULES
# =============================================================================

def _grand_factor(p: Problem) -> float:
    return cost_factor(p.holding_vector.sum(), p.acquisition_vector.sum(),
                       p.ordering_cost, p.exemption_price)


def hd_proportional(p: Problem, level: Level = "item") -> Allocation:
    """
    Share of c(N) proportional to the holding cost of the demand H.

    Every player gets H_i * min{ B / (2 C_N), sqrt(2a / H_N) }; at the firm
    level H_i is the firm's summed H.
    """
    factor = _grand_factor(p)
    holding = p.holding_vector
    if level == "item":
        values = dict(zip(p.item_ids, (holding * factor).tolist()))
    else:
        values = {firm: float(holding[p.indices(items)].sum() * factor)
                  for firm, items in p.firm_partition.items()}
    return Allocation(values=values, total=coalition_cost(p, p.item_ids))


def hd_rule(p: Problem) -> Allocation:
    return hd_proportional(p, "item")


def shapley_rule(p: Problem, exact_threshold: int = DEFAULT_EXACT_THRESHOLD) -> Allocation:
    """Exact Shapley value of the item game, used as a rule."""
    return shapley_exact(CostGame.items(p), exact_threshold=exact_threshold)


def shapley_proportional(p: Problem, mode: Literal["exact", "sampled"] = "exact",
                         sampling: Optional[SamplingConfig] = None,
                         exact_threshold: int = DEFAULT_EXACT_THRESHOLD,
                         workers: int = 1) -> FirmAllocation:
    """
    Two-phase rule: firms get their hd-proportional share, which is split
    among the firm's items by the Shapley value of the within-firm game.

    The within-firm game charges a set S of the firm's items the firm's share
    when the firm orders only S and the other firms order as before; the
    empty set costs 0.
    """
    partition = p.firm_partition
    if mode == "exact":
        largest = max(len(items) for items in partition.values())
        if largest > exact_threshold:
            raise ThresholdExceededError(
                f"A firm has {largest} items, exact mode is limited to {exact_threshold}")
    elif sampling is None:
        sampling = SamplingConfig()

    def split(firm: str) -> Tuple[Allocation, Optional[Dict[str, float]]]:
        game = CostGame.within_firm(p, firm)
        if mode == "exact":
            return shapley_exact(game, exact_threshold=exact_threshold), None
        return shapley_sampled(game, sampling)

    firms = list(partition)
    if workers > 1:
        results = Parallel(n_jobs=workers, prefer="threads")(delayed(split)(firm) for firm in firms)
    else:
        results = [split(firm) for firm in firms]

    per_item: Dict[str, float] = {}
    per_firm: Dict[str, float] = {}
    std_errors: Dict[str, float] = {}
    for firm, (allocation, errors) in zip(firms, results):
        per_item.update(allocation.values)
        per_firm[firm] = allocation.total
        if errors:
            std_errors.update(errors)
    # report items in problem order
    per_item = {iid: per_item[iid] for iid in p.item_ids}
    logger.debug(f"Shapley-proportional rule over {len(firms)} firms ({mode})")
    return FirmAllocation(per_item=per_item, per_firm=per_firm,
                          std_errors=std_errors if mode == "sampled" else None)


def sp_rule(p: Problem) -> Allocation:
    """Shapley-proportional rule (exact) as an item-level allocation."""
    result = shapley_proportional(p)
    return Allocation(values=result.per_item, total=coalition_cost(p, p.item_ids))


RULES: Dict[str, Rule] = {
    "hd": hd_rule,
    "sp": sp_rule,
    "shapley-exact": shapley_rule,
}


# =============================================================================
# PROPERTY CHECKS
# =============================================================================

def firm_totals(p: Problem, allocation: Allocation) -> Dict[str, float]:
    return {firm: math.fsum(allocation.values[iid] for iid in items)
            for firm, items in p.firm_partition.items()}


def _player_view(rule: Rule, p: Problem, level: Level) -> Tuple[List[str], np.ndarray, np.ndarray]:
    """Players, their allocated amounts and their H at the requested level."""
    allocation = rule(p)
    holding = p.holding_vector
    if level == "item":
        players = list(p.item_ids)
        values = np.array([allocation.values[iid] for iid in players])
        return players, values, holding
    totals = firm_totals(p, allocation)
    players = list(totals)
    values = np.array([totals[firm] for firm in players])
    firm_holding = np.array([holding[p.indices(items)].sum() for items in p.firm_partition.values()])
    return players, values, firm_holding


def check_efficiency(rule: Rule, p: Problem, tol: float = DEFAULT_AXIOM_TOLERANCE) -> Verdict:
    allocation = rule(p)
    grand = coalition_cost(p, p.item_ids)
    gap = math.fsum(allocation.values.values()) - grand
    violations = []
    if abs(gap) > tol * max(1.0, grand):
        violations.append(Violation(players=list(p.item_ids), magnitude=abs(gap),
                                    detail=f"allocated {grand + gap:.9f}, c(N) = {grand:.9f}"))
    return Verdict(property="efficiency", passed=not violations, checked=1,
                   violations=violations, margin=-abs(gap))


def check_non_negativity(rule: Rule, p: Problem, level: Level = "item",
                         tol: float = DEFAULT_AXIOM_TOLERANCE) -> Verdict:
    players, values, _ = _player_view(rule, p, level)
    violations = [Violation(players=[player], magnitude=float(-value))
                  for player, value in zip(players, values) if value < -tol]
    return Verdict(property=f"non-negativity[{level}]", passed=not violations,
                   checked=len(players), violations=violations, margin=float(values.min()))


def check_symmetry(rule: Rule, p: Problem, tol: float = DEFAULT_AXIOM_TOLERANCE,
                   level: Level = "item") -> Verdict:
    """Players with equal holding cost of the demand must receive equal amounts."""
    players, values, holding = _player_view(rule, p, level)
    violations, checked = [], 0
    for i in range(len(players)):
        for j in range(i + 1, len(players)):
            if not math.isclose(holding[i], holding[j], rel_tol=SYMMETRY_RTOL, abs_tol=0.0):
                continue
            checked += 1
            gap = abs(values[i] - values[j])
            if gap > tol:
                violations.append(Violation(players=[players[i], players[j]], magnitude=float(gap),
                                            detail=f"equal H={holding[i]:.6f}"))
    return Verdict(property=f"symmetry[{level}]", passed=not violations,
                   checked=checked, violations=violations)


def check_hd_ranking_preservation(rule: Rule, p: Problem, tol: float = DEFAULT_AXIOM_TOLERANCE,
                                  level: Level = "item") -> Verdict:
    """A player with larger H must not receive less than one with smaller H."""
    players, values, holding = _player_view(rule, p, level)
    violations, checked = [], 0
    margin = math.inf
    for i in range(len(players)):
        for j in range(len(players)):
            if i == j or holding[i] <= holding[j] or math.isclose(
                    holding[i], holding[j], rel_tol=SYMMETRY_RTOL, abs_tol=0.0):
                continue
            checked += 1
            slack = values[i] - values[j]
            margin = min(margin, float(slack))
            if slack < -tol:
                violations.append(Violation(
                    players=[players[i], players[j]], magnitude=float(-slack),
                    detail=f"H {holding[i]:.6f} > {holding[j]:.6f} but allocation "
                           f"{values[i]:.6f} < {values[j]:.6f}"))
    return Verdict(property=f"hd-ranking[{level}]", passed=not violations, checked=checked,
                   violations=violations, margin=None if math.isinf(margin) else margin)


def merge_players(p: Problem, merge: MergeSpec, level: Level = "item") -> Problem:
    """
    Problem in which the absorbed players have merged into the absorber.

    Items merge into a single item (d=1, h=H', c=C') whose H and C are the
    sums; costs only depend on these products. Firms merge by moving the
    absorbed firms' items to the absorber.
    """
    known = p.item_ids if level == "item" else p.firm_ids
    named = [merge.absorber, *merge.absorbed]
    unknown = [player for player in named if player not in known]
    if unknown:
        raise InvalidMergeError(f"Unknown {level}s in merge: {', '.join(unknown)}")
    if len(set(named)) != len(named):
        raise InvalidMergeError("Absorber and absorbed players must be distinct")

    if level == "firm":
        moved = {iid: merge.absorber for firm in merge.absorbed for iid in p.firm_items(firm)}
        return p.with_firm_assignment({item.item_id: moved.get(item.item_id, item.firm_id)
                                       for item in p.items})

    merging = [p.item(player) for player in named]
    merged = ItemRecord(
        item_id=merge.absorber,
        firm_id=merging[0].firm_id,
        demand_rate=1.0,
        holding_cost_rate=math.fsum(item.holding_of_demand for item in merging),
        acquisition_cost=math.fsum(item.acquisition_of_demand for item in merging),
    )
    absorbed = set(merge.absorbed)
    items = [merged if item.item_id == merge.absorber else item
             for item in p.items if item.item_id not in absorbed]
    return p.model_copy(update={'items': items})


def check_non_manipulability(rule: Rule, p: Problem, merge: MergeSpec,
                             tol: float = DEFAULT_AXIOM_TOLERANCE,
                             level: Level = "item") -> Verdict:
    """
    The merged player must receive what its parts received before, and (strong
    form) every untouched player must keep its allocation.
    """
    merged_problem = merge_players(p, merge, level)
    players, before, _ = _player_view(rule, p, level)
    merged_players, after, _ = _player_view(rule, merged_problem, level)
    old = dict(zip(players, before.tolist()))
    new = dict(zip(merged_players, after.tolist()))

    violations = []
    expected = old[merge.absorber] + math.fsum(old[player] for player in merge.absorbed)
    gap = abs(new[merge.absorber] - expected)
    if gap > tol:
        violations.append(Violation(players=[merge.absorber, *merge.absorbed], magnitude=gap,
                                    detail=f"merged player gets {new[merge.absorber]:.6f}, "
                                           f"parts had {expected:.6f}"))
    untouched = [player for player in merged_players if player != merge.absorber]
    for player in untouched:
        gap = abs(new[player] - old[player])
        if gap > tol:
            violations.append(Violation(players=[player], magnitude=gap,
                                        detail=f"untouched player moves from {old[player]:.6f} "
                                               f"to {new[player]:.6f}"))
    return Verdict(property=f"non-manipulability[{level}]", passed=not violations,
                   checked=1 + len(untouched), violations=violations)


def check_balanced_contributions(p: Problem, tol: float = DEFAULT_AXIOM_TOLERANCE,
                                 rule: Rule = sp_rule) -> Verdict:
    """
    Within every firm, removing item j changes i's allocation by as much as
    removing i changes j's.
    """
    base = rule(p).values
    removed: Dict[str, Dict[str, float]] = {}

    def without(item_id: str) -> Dict[str, float]:
        if item_id not in removed:
            removed[item_id] = rule(p.without_items([item_id])).values
        return removed[item_id]

    violations, checked = [], 0
    for firm, items in p.firm_partition.items():
        for a, i in enumerate(items):
            for j in items[a + 1:]:
                checked += 1
                lhs = base[i] - without(j)[i]
                rhs = base[j] - without(i)[j]
                if abs(lhs - rhs) > tol:
                    violations.append(Violation(players=[i, j], magnitude=abs(lhs - rhs),
                                                detail=f"firm {firm}: {lhs:.9f} != {rhs:.9f}"))
    return Verdict(property="balanced-contributions", passed=not violations,
                   checked=checked, violations=violations)


def check_stability_for_firms(rule: Rule, p: Problem, tol: float = DEFAULT_AXIOM_TOLERANCE,
                              max_firms: int = DEFAULT_ENUMERATION_THRESHOLD) -> Verdict:
    """No set of firms pays more than it would by ordering on its own."""
    game = CostGame.firms(p)
    if game.n > max_firms:
        raise ThresholdExceededError(f"{game.n} firms exceed the enumeration limit of {max_firms}")
    totals = firm_totals(p, rule(p))
    amounts = np.array([totals[firm] for firm in game.players])
    excess, table = coalition_excesses(game, amounts, max_firms)
    nonempty = excess[1:]
    violating = np.nonzero(nonempty > tol)[0] + 1
    violations = [
        Violation(players=game.members(int(mask)), magnitude=float(excess[mask]),
                  detail=f"pays {excess[mask] + table[mask]:.6f} > cost {table[mask]:.6f}")
        for mask in sorted(violating.tolist(), key=lambda m: (-excess[m], m))
    ]
    return Verdict(property="stability[firm]", passed=not violations, checked=int(nonempty.size),
                   violations=violations, margin=float(-nonempty.max()))


# =============================================================================
# AXIOM BATTERY
# =============================================================================

def random_merge(rng: np.random.Generator, players: Sequence[str]) -> Optional[MergeSpec]:
    if len(players) < 2:
        return None
    order = rng.permutation(len(players))
    count = int(rng.integers(1, len(players)))
    return MergeSpec(absorber=players[order[0]],
                     absorbed=[players[k] for k in order[1:1 + count]])


def run_axiom_battery(problems: Sequence[Problem], seed: int = 0,
                      tol: float = DEFAULT_AXIOM_TOLERANCE,
                      rules: Sequence[str] = ("hd", "sp")) -> List[AxiomResult]:
    """
    Check hd at the item level and sp at the firm level on every problem.

    hd: efficiency, non-negativity, symmetry, hd-ranking preservation,
    non-manipulability (random merge), stability. sp: efficiency, the three
    firm-level properties, balanced contributions and stability for firms.
    """
    rng = np.random.default_rng(seed)
    results: List[AxiomResult] = []
    for index, p in enumerate(problems):
        # both merges are drawn for every instance so the stream does not depend on `rules`
        item_merge = random_merge(rng, p.item_ids)
        firm_merge = random_merge(rng, p.firm_ids)
        if "hd" in rules:
            results.extend(AxiomResult(instance=index, rule="hd", verdict=v)
                           for v in _hd_checks(p, item_merge, tol))
        if "sp" in rules:
            results.extend(AxiomResult(instance=index, rule="sp", verdict=v)
                           for v in _sp_checks(p, firm_merge, tol))
        logger.debug(f"Axiom battery instance {index}: {len(p.items)} items, {len(p.firm_ids)} firms")
    return results


def _hd_checks(p: Problem, merge: Optional[MergeSpec], tol: float) -> List[Verdict]:
    checks = [
        check_efficiency(hd_rule, p, tol),
        check_non_negativity(hd_rule, p, "item", tol),
        check_symmetry(hd_rule, p, tol, "item"),
        check_hd_ranking_preservation(hd_rule, p, tol, "item"),
    ]
    if len(p.items) <= DEFAULT_ENUMERATION_THRESHOLD:
        checks.append(check_stability_for_firms(hd_rule, p.one_item_per_firm(), tol))
    else:
        logger.info(f"Skipping item-level stability: {len(p.items)} items")
    if merge is not None:
        checks.append(check_non_manipulability(hd_rule, p, merge, tol, "item"))
    return checks


def _sp_checks(p: Problem, merge: Optional[MergeSpec], tol: float) -> List[Verdict]:
    checks = [
        check_efficiency(sp_rule, p, tol),
        check_non_negativity(sp_rule, p, "firm", tol),
        check_symmetry(sp_rule, p, tol, "firm"),
        check_balanced_contributions(p, tol, sp_rule),
        check_stability_for_firms(sp_rule, p, tol),
    ]
    if merge is not None:
        checks.append(check_non_manipulability(sp_rule, p, merge, tol, "firm"))
    return checks


def random_instances(count: int, seed: int = 42, max_items: int = 8,
                     max_firms: int = 3) -> List[Problem]:
    rng = np.random.default_rng(seed)
    return [random_problem(rng, max_items=max_items, max_firms=max_firms) for _ in range(count)]
