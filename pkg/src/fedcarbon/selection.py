"""Client utilities, threshold filtering and per-round client selection."""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Collection, Mapping, Sequence

import numpy as np

from .errors import ConfigurationError, InvariantViolation
from .model import PerSampleGradStats

BUDGET_TOLERANCE = 1e-9


class UtilitySource(str, Enum):
    PROBING_GRAD_NORM = "probing_grad_norm"
    RUNNING_LOSS = "running_loss"


@dataclass(frozen=True)
class ClientUtility:
    client_id: int
    utility: float
    source: UtilitySource

    def __post_init__(self) -> None:
        if not (math.isfinite(self.utility) and self.utility >= 0):
            raise ConfigurationError(f"client {self.client_id}: utility must be finite and >= 0")


@dataclass(frozen=True)
class SelectionDecision:
    round: int
    selected: list[int]
    budget_spent: float = 0.0
    fallback_fill_count: int = 0


@dataclass(frozen=True)
class BudgetState:
    total_budget: float
    per_round_allotment: float
    available: float
    spent_cumulative: float = 0.0

    @classmethod
    def start(cls, total_budget: float, rounds: int) -> BudgetState:
        """Even split of ``total_budget`` over ``rounds``; the first allotment is available."""
        if rounds < 1:
            raise ConfigurationError("rounds must be >= 1")
        if not total_budget >= 0:
            raise ConfigurationError(f"total budget must be >= 0, got {total_budget}")
        allot = total_budget / rounds
        return cls(total_budget, allot, allot, 0.0)


def statistical_utility(size: int, values: Sequence[float] | np.ndarray) -> float:
    """``size * sqrt(mean(v_k^2))`` over a client's per-sample values."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or v.size != size or size < 1:
        raise ConfigurationError(f"expected {size} per-sample values, got {v.size}")
    return float(size * math.sqrt(float(np.mean(v * v))))


def probing_utility(
    sizes: Mapping[int, int], grad_stats: Mapping[int, PerSampleGradStats]
) -> list[ClientUtility]:
    missing = set(sizes) ^ set(grad_stats)
    if missing:
        raise ConfigurationError(f"sizes and gradient stats cover different clients: {sorted(missing)}")
    out = []
    for cid in sorted(sizes):
        stats = grad_stats[cid]
        if stats.count != sizes[cid]:
            raise ConfigurationError(f"client {cid}: {stats.count} gradient norms for {sizes[cid]} samples")
        out.append(ClientUtility(cid, sizes[cid] * math.sqrt(stats.mean_square), UtilitySource.PROBING_GRAD_NORM))
    return out


def loss_utility(sizes: Mapping[int, int], per_sample_losses: Mapping[int, Sequence[float]]) -> list[ClientUtility]:
    missing = set(sizes) ^ set(per_sample_losses)
    if missing:
        raise ConfigurationError(f"sizes and losses cover different clients: {sorted(missing)}")
    return [
        ClientUtility(cid, statistical_utility(sizes[cid], per_sample_losses[cid]), UtilitySource.RUNNING_LOSS)
        for cid in sorted(sizes)
    ]


def threshold_filter(utilities: Sequence[ClientUtility], c: float) -> set[int]:
    """Keep clients whose utility is at least ``c`` times the largest utility."""
    if not utilities:
        raise ConfigurationError("threshold_filter needs at least one utility")
    if not 0.0 <= c <= 1.0:
        raise ConfigurationError(f"threshold coefficient must lie in [0, 1], got {c}")
    cutoff = c * max(u.utility for u in utilities)
    return {u.client_id for u in utilities if u.utility >= cutoff}


def _round_rng(seed: int, round_idx: int) -> np.random.Generator:
    return np.random.default_rng([seed, round_idx])


def select_random(pool: Collection[int], k: int, seed: int, round_idx: int) -> SelectionDecision:
    members = sorted(set(pool))
    if not members:
        raise ConfigurationError("selection pool is empty")
    if k < 1:
        raise ConfigurationError("K must be >= 1")
    if len(members) <= k:
        return SelectionDecision(round_idx, members)
    rng = _round_rng(seed, round_idx)
    picked = rng.choice(len(members), size=k, replace=False)
    return SelectionDecision(round_idx, sorted(members[i] for i in picked))


def select_topk_utility(
    pool: Collection[int],
    utilities: Mapping[int, float],
    k: int,
    epsilon: float,
    seed: int,
    round_idx: int,
) -> SelectionDecision:
    """Epsilon-greedy top-K by utility.

    Each slot takes the best remaining client with probability ``1 - epsilon``
    (ties go to the lower id) and a uniformly random remaining client
    otherwise. Clients without a utility yet count as +inf.
    """
    members = sorted(set(pool))
    if not members:
        raise ConfigurationError("selection pool is empty")
    if k < 1:
        raise ConfigurationError("K must be >= 1")
    if not 0.0 <= epsilon <= 1.0:
        raise ConfigurationError("epsilon must lie in [0, 1]")
    rng = _round_rng(seed, round_idx)
    remaining = list(members)
    chosen = []
    for _ in range(min(k, len(members))):
        explore = rng.random() < epsilon
        if explore:
            pick = remaining[int(rng.integers(len(remaining)))]
        else:
            pick = min(remaining, key=lambda c: (-utilities.get(c, math.inf), c))
        remaining.remove(pick)
        chosen.append(pick)
    return SelectionDecision(round_idx, sorted(chosen))


def _better(value: float, cost: float, ids: tuple[int, ...], best: tuple[float, float, tuple[int, ...]]) -> bool:
    bv, bc, bids = best
    if value != bv:
        return value > bv
    if cost != bc:
        return cost < bc
    return ids < bids


def solve_knapsack(
    items: Sequence[tuple[int, float, float]], budget: float, k: int
) -> tuple[int, ...]:
    """Exact ``max sum r s.t. sum c <= budget, |S| <= k`` by branch and bound.

    ``items`` are ``(id, utility, cost)``. Ties go to the cheaper set, then to
    the lexicographically smallest sorted id tuple. Zero-utility items are
    never part of the returned set.
    """
    cand = [(cid, r, c) for cid, r, c in items if r > 0 and c <= budget]
    cand.sort(key=lambda it: (-(it[1] / it[2]) if it[2] > 0 else -math.inf, -it[1], it[0]))
    n = len(cand)
    utils = [it[1] for it in cand]
    costs = [it[2] for it in cand]
    best: list = [0.0, 0.0, ()]

    def bound(j: int, room: float, slots: int) -> float:
        if slots <= 0 or j >= n:
            return 0.0
        top = math.fsum(heapq.nlargest(slots, utils[j:]))
        frac = 0.0
        for idx in range(j, n):
            if costs[idx] <= room:
                room -= costs[idx]
                frac += utils[idx]
            else:
                frac += utils[idx] * room / costs[idx]
                break
        return min(top, frac)

    chosen: list[int] = []

    def visit(j: int, value: float, spent: float) -> None:
        if j >= n:
            return
        slots = k - len(chosen)
        if slots <= 0:
            return
        slack = 1e-9 * max(1.0, abs(best[0]))
        if value + bound(j, budget - spent, slots) < best[0] - slack:
            return
        if spent + costs[j] <= budget * (1 + 1e-12) + 1e-12:
            chosen.append(j)
            members = [cand[i] for i in chosen]
            total_cost = math.fsum(m[2] for m in members)
            if total_cost <= budget:
                total_value = math.fsum(m[1] for m in members)
                ids = tuple(sorted(m[0] for m in members))
                if _better(total_value, total_cost, ids, tuple(best)):
                    best[:] = [total_value, total_cost, ids]
            visit(j + 1, value + utils[j], spent + costs[j])
            chosen.pop()
        visit(j + 1, value, spent)

    visit(0, 0.0, 0.0)
    return best[2]


def select_budgeted(
    pool: Collection[int],
    utilities: Mapping[int, float],
    costs: Mapping[int, float],
    budget: float,
    k: int,
    round_idx: int = 0,
) -> SelectionDecision:
    """Utility-maximising selection under a per-round emissions budget.

    Leftover slots are filled with zero-cost clients in descending utility
    order; those cannot add emissions.
    """
    members = sorted(set(pool))
    if not members:
        raise ConfigurationError("selection pool is empty")
    if k < 1:
        raise ConfigurationError("K must be >= 1")
    if math.isnan(budget) or budget < 0:
        raise ConfigurationError(f"budget must be >= 0, got {budget}")
    for cid in members:
        if cid not in utilities or cid not in costs:
            raise ConfigurationError(f"client {cid} lacks a utility or a cost")
        u, c = utilities[cid], costs[cid]
        if not (math.isfinite(u) and u >= 0):
            raise ConfigurationError(f"client {cid}: utility must be finite and >= 0, got {u}")
        if not (math.isfinite(c) and c >= 0):
            raise ConfigurationError(f"client {cid}: cost must be finite and >= 0, got {c}")

    chosen = list(solve_knapsack([(cid, utilities[cid], costs[cid]) for cid in members], budget, k))
    fill = 0
    if len(chosen) < k:
        taken = set(chosen)
        free = sorted((cid for cid in members if costs[cid] == 0 and cid not in taken), key=lambda c: (-utilities[c], c))
        extra = free[: k - len(chosen)]
        chosen.extend(extra)
        fill = len(extra)
    spent = math.fsum(costs[cid] for cid in chosen)
    return SelectionDecision(round_idx, sorted(chosen), spent, fill)


def budget_update(state: BudgetState, spent: float) -> BudgetState:
    """Charge ``spent`` and add the next round's allotment; unused budget carries over."""
    if spent < 0 or not math.isfinite(spent):
        raise ConfigurationError(f"spent must be finite and >= 0, got {spent}")
    if spent > state.available + BUDGET_TOLERANCE:
        raise InvariantViolation(f"spent {spent} g exceeds available budget {state.available} g")
    available = max(state.available - spent, 0.0) + state.per_round_allotment
    return replace(state, available=available, spent_cumulative=state.spent_cumulative + spent)
