"""Stake-weighted allocation of an EVA's power to its member EVs.

Each slot one EV is drawn as proposer with probability proportional to its
locked energy, discounted by battery age. The proposal splits the EVA request
in proportion to every EV's headroom, the safety correction clips it to the
per-EV power/SOC limits and water-fills the clipped surplus, and every member
re-checks the plan deterministically before it is executed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

AGE_REF_CYCLES = 1000.0


@dataclass(frozen=True)
class Stake:
    ev_id: int
    locked_energy_kwh: float
    battery_age_cycles: float = 0.0
    random_salt: int = 0

    def __post_init__(self):
        if self.locked_energy_kwh < 0:
            raise ValueError("locked energy must be >= 0")


@dataclass
class AllocationPlan:
    power_kw: np.ndarray
    residual_kw: float
    requested_kw: float
    proposer_id: int = -1
    validated: bool = False
    proposed_kw: np.ndarray | None = field(default=None, repr=False)


@dataclass(frozen=True)
class EvLimits:
    """Per-EV admissible power interval for one slot, plus what produced it."""

    lower_kw: np.ndarray
    upper_kw: np.ndarray
    energy_kwh: np.ndarray
    e_next_lower: np.ndarray
    e_next_upper: np.ndarray
    efficiency: np.ndarray
    dt: float = 1.0


def age_discount(cycles_w) -> np.ndarray:
    return 1.0 / (1.0 + np.asarray(cycles_w, dtype=float) / AGE_REF_CYCLES)


def stake_weights(stakes) -> np.ndarray:
    locked = np.array([s.locked_energy_kwh for s in stakes], dtype=float)
    w = locked * age_discount([s.battery_age_cycles for s in stakes])
    total = w.sum()
    if not total > 0:
        return np.full(len(stakes), 1.0 / len(stakes))
    return w / total


def select_proposer(stakes, seed=None, rng: np.random.Generator | None = None) -> int:
    """Draw a proposer id; all-zero stakes fall back to a uniform draw."""
    if not stakes:
        raise ValueError("no stakes to select from")
    rng = rng if rng is not None else np.random.default_rng(seed)
    probs = stake_weights(stakes)
    u = rng.random()
    idx = int(np.searchsorted(np.cumsum(probs), u, side="right"))
    return stakes[min(idx, len(stakes) - 1)].ev_id


def energy_weights(p_eva_kw: float, limits: EvLimits) -> np.ndarray:
    """Headroom-proportional share of the request for each EV.

    Charging shares follow the distance to each EV's upper power limit,
    discharging shares the distance to its lower one; an EV sitting on the
    binding bound gets zero weight. Returns weights summing to 1, or all zeros
    when nobody has headroom in the requested direction.
    """
    if p_eva_kw > 0:
        room = np.maximum(limits.upper_kw, 0.0)
    elif p_eva_kw < 0:
        room = np.maximum(-limits.lower_kw, 0.0)
    else:
        return np.zeros_like(limits.upper_kw)
    total = room.sum()
    if not total > 0:
        return np.zeros_like(room)
    return room / total


def propose_allocation(proposer_id: int, p_eva_kw: float, limits: EvLimits) -> AllocationPlan:
    zeta = energy_weights(p_eva_kw, limits)
    power = p_eva_kw * zeta
    residual = p_eva_kw - power.sum()
    return AllocationPlan(power_kw=power, residual_kw=float(residual),
                          requested_kw=float(p_eva_kw), proposer_id=proposer_id,
                          proposed_kw=power.copy())


def _water_fill(p, target, lo, hi, tol=1e-12):
    """Move ``p`` inside ``[lo, hi]`` toward ``sum(p) == target`` in proportion
    to each entry's remaining room; at most a couple of passes are needed."""
    p = np.clip(p, lo, hi)
    for _ in range(len(p) + 2):
        gap = target - p.sum()
        if abs(gap) <= tol * max(1.0, abs(target)):
            break
        room = (hi - p) if gap > 0 else (p - lo)
        room = np.maximum(room, 0.0)
        total = room.sum()
        if not total > 0:
            break
        if total <= abs(gap):
            p = hi.copy() if gap > 0 else lo.copy()
            break
        p = np.clip(p + np.sign(gap) * room * (abs(gap) / total), lo, hi)
    return p


def safety_correct(plan: AllocationPlan, limits: EvLimits) -> AllocationPlan:
    """Clip each EV to its limits and redistribute the surplus.

    Redistribution first stays sign-consistent with the request (no EV moves
    against it); only if that cannot cover the request are the full intervals
    used. Whatever cannot be placed is reported as residual.
    """
    lo, hi = limits.lower_kw, limits.upper_kw
    r = plan.requested_kw
    p0 = np.asarray(plan.power_kw, dtype=float)
    if (np.all(np.isfinite(p0)) and np.all(p0 >= lo) and np.all(p0 <= hi)
            and abs(p0.sum() - r) <= 1e-12 * max(1.0, abs(r))):
        # a plan that already holds needs no correction
        return AllocationPlan(power_kw=p0.copy(), residual_kw=float(r - p0.sum()),
                              requested_kw=r, proposer_id=plan.proposer_id, validated=False,
                              proposed_kw=plan.proposed_kw)
    if r > 0:
        slo, shi = np.minimum(np.maximum(lo, 0.0), hi), hi
    elif r < 0:
        slo, shi = lo, np.maximum(np.minimum(hi, 0.0), lo)
    else:
        slo = shi = np.clip(0.0, lo, hi)
    p = _water_fill(np.asarray(plan.power_kw, dtype=float), r, slo, shi)
    p = _water_fill(p, r, lo, hi)
    return AllocationPlan(power_kw=p, residual_kw=float(r - p.sum()), requested_kw=r,
                          proposer_id=plan.proposer_id, validated=False,
                          proposed_kw=plan.proposed_kw)


def projected_energy(plan: AllocationPlan, limits: EvLimits) -> np.ndarray:
    return limits.energy_kwh + limits.efficiency * plan.power_kw * limits.dt


def validate_plan(plan: AllocationPlan, limits: EvLimits, tol: float = 1e-9) -> bool:
    """Unanimous deterministic check by every member: own power bounds, own
    projected energy bounds, and the plan's sum identity."""
    p = np.asarray(plan.power_kw, dtype=float)
    if p.shape != limits.lower_kw.shape or not np.all(np.isfinite(p)):
        return False
    votes = (p >= limits.lower_kw - tol) & (p <= limits.upper_kw + tol)
    e = projected_energy(plan, limits)
    votes &= (e >= limits.e_next_lower - tol) & (e <= limits.e_next_upper + tol)
    sum_ok = abs(p.sum() + plan.residual_kw - plan.requested_kw) <= tol * max(1.0, abs(plan.requested_kw))
    return bool(np.all(votes) and sum_ok)


def allocate(p_eva_kw: float, limits: EvLimits, stakes, rng: np.random.Generator,
             proposal=None) -> AllocationPlan:
    """Full round: proposer draw, proposal, correction, validation.

    ``proposal`` replaces the headroom-proportional split with explicit per-EV
    powers (used by planners that already dispatch per EV); it still goes
    through the same correction and validation.
    """
    proposer = select_proposer(stakes, rng=rng) if stakes else -1
    if proposal is None:
        plan = propose_allocation(proposer, p_eva_kw, limits)
    else:
        power = np.asarray(proposal, dtype=float).copy()
        plan = AllocationPlan(power_kw=power, residual_kw=float(p_eva_kw - power.sum()),
                              requested_kw=float(p_eva_kw), proposer_id=proposer,
                              proposed_kw=power.copy())
    plan = safety_correct(plan, limits)
    plan.validated = validate_plan(plan, limits)
    return plan


@dataclass(frozen=True)
class LedgerEntry:
    ev_id: int
    energy_kwh: float
    charge_cost: float
    degradation_cost: float
    slashed_kwh: float


def settle_rewards(plan: AllocationPlan, ev_ids, tariff: float, degradation_delta,
                   locked_kwh, deviated=None, dt: float = 1.0,
                   slash_fraction: float = 0.05) -> list[LedgerEntry]:
    """Per-EV settlement: energy bought (or sold) at the tariff, the EV's
    degradation cost, and a slash of locked collateral for EVs that deviated
    from the plan or left early."""
    p = np.asarray(plan.power_kw, dtype=float)
    deg = np.broadcast_to(np.asarray(degradation_delta, dtype=float), p.shape)
    locked = np.broadcast_to(np.asarray(locked_kwh, dtype=float), p.shape)
    dev = np.zeros(p.shape, bool) if deviated is None else np.asarray(deviated, bool)
    out = []
    for i, ev in enumerate(ev_ids):
        energy = float(p[i] * dt)
        out.append(LedgerEntry(ev_id=int(ev), energy_kwh=energy, charge_cost=tariff * energy,
                               degradation_cost=float(deg[i]),
                               slashed_kwh=float(slash_fraction * locked[i]) if dev[i] else 0.0))
    return out
