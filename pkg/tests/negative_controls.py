"""
Allocation rules built to break one property each, so every verifier is
shown to reject something.
"""
import os
import sys

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from eoq_core import Problem, coalition_cost
from eoq_games import Allocation
from eoq_rules import hd_proportional


def _allocation(p: Problem, values) -> Allocation:
    return Allocation(values=dict(zip(p.item_ids, values)), total=coalition_cost(p, p.item_ids))


def perturbed_equal_split(p: Problem) -> Allocation:
    """Equal split of c(N) plus a zero-sum perturbation keyed on item position; breaks symmetry."""
    n = len(p.items)
    grand = coalition_cost(p, p.item_ids)
    shift = [0.01 * grand * (k - (n - 1) / 2) for k in range(n)]
    return _allocation(p, [grand / n + s for s in shift])


def squared_holding_split(p: Problem) -> Allocation:
    """Shares proportional to H^2; breaks non-manipulability (merging changes the shares)."""
    weights = p.holding_vector ** 2
    grand = coalition_cost(p, p.item_ids)
    return _allocation(p, (grand * weights / weights.sum()).tolist())


def inverse_holding_split(p: Problem) -> Allocation:
    """Shares proportional to 1/H; breaks hd-ranking preservation."""
    weights = 1.0 / p.holding_vector
    grand = coalition_cost(p, p.item_ids)
    return _allocation(p, (grand * weights / weights.sum()).tolist())


def first_item_overcharged(p: Problem) -> Allocation:
    """The first item pays one unit more than on its own, the rest share the remainder; breaks stability."""
    n = len(p.items)
    grand = coalition_cost(p, p.item_ids)
    if n == 1:
        return _allocation(p, [grand])
    first = coalition_cost(p, p.item_ids[:1]) + 1.0
    return _allocation(p, [first] + [(grand - first) / (n - 1)] * (n - 1))


def negative_last_item(p: Problem) -> Allocation:
    """hd shares with the last item pushed below zero; breaks non-negativity."""
    values = list(hd_proportional(p).values.values())
    shift = values[-1] + 1.0
    values[-1] -= shift
    values[0] += shift
    return _allocation(p, values)


def overcharging_hd(p: Problem) -> Allocation:
    """hd shares scaled up by one percent; breaks efficiency."""
    values = [1.01 * v for v in hd_proportional(p).values.values()]
    return Allocation(values=dict(zip(p.item_ids, values)), total=sum(values))
