"""Reference dispatch strategies.

Each planner returns one ``(n_evs, horizon)`` per-EV power plan per EVA. The
plans are executed through ``V2GEnv.step_dispatch``, i.e. through the same
clipping, allocation correction and validation as a learned policy.

* BL1 uncontrolled: charge flat out from arrival until full, never discharge.
* BL2 optimal charging: charge-only valley filling, one EV at a time.
* BL3 minimum variance: V2G dispatch minimising the window load variance.
* BL4 minimum cost: V2G dispatch minimising the charging bill.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.optimize import linprog, minimize

from .fleet import MemberArrays, ev_energy_bounds, ev_power_bounds


class BaselineKind(Enum):
    UNCONTROLLED = "uncontrolled"
    OPTIMAL_CHARGING = "optimal_charging"
    MIN_VARIANCE_V2G = "min_variance_v2g"
    MIN_COST_V2G = "min_cost_v2g"

    @classmethod
    def parse(cls, name: str) -> "BaselineKind":
        alias = {"bl1": cls.UNCONTROLLED, "bl2": cls.OPTIMAL_CHARGING,
                 "bl3": cls.MIN_VARIANCE_V2G, "bl4": cls.MIN_COST_V2G}
        key = name.strip().lower()
        if key in alias:
            return alias[key]
        try:
            return cls(key)
        except ValueError:
            raise ValueError(f"unknown baseline {name!r}; expected bl1..bl4 or one of "
                             f"{[k.value for k in cls]}") from None


@dataclass
class EvCorridor:
    """Per-EV planning data: energy corridor on boundaries, power box per slot."""

    members: MemberArrays
    e_lo: np.ndarray  # (n, K+1)
    e_hi: np.ndarray
    p_lo: np.ndarray  # (n, K)
    p_hi: np.ndarray
    dt: float

    @classmethod
    def build(cls, m: MemberArrays, horizon: int, dt: float = 1.0,
              energy_bounds=None) -> "EvCorridor":
        lo, hi = energy_bounds if energy_bounds is not None else ev_energy_bounds(m, horizon, dt)
        plo, phi = ev_power_bounds(m, horizon, dt, (lo, hi))
        return cls(m, lo, hi, plo, phi, dt)

    @property
    def horizon(self) -> int:
        return self.p_lo.shape[1]

    def energy(self, plan: np.ndarray) -> np.ndarray:
        steps = self.members.eff[:, None] * plan * self.dt
        return self.members.e0[:, None] + np.concatenate(
            [np.zeros((len(plan), 1)), np.cumsum(steps, axis=1)], axis=1)

    def admits(self, plan: np.ndarray, tol: float = 1e-6) -> bool:
        e = self.energy(plan)
        return bool(np.all(plan >= self.p_lo - tol) and np.all(plan <= self.p_hi + tol)
                    and np.all(e >= self.e_lo - tol) and np.all(e <= self.e_hi + tol))


@dataclass
class PlanProblem:
    """Per-EV corridors plus the day they are planned against.

    ``day_kw`` is the uncontrolled load of the whole day and ``hours`` maps each
    window slot to its hour, so variance objectives see all 24 hours.
    """

    corridors: list[EvCorridor]  # one per EVA
    day_kw: np.ndarray  # (24,) or any length covering ``hours``
    hours: np.ndarray  # (K,)
    tariff: np.ndarray  # (K,)
    dt: float = 1.0

    @classmethod
    def from_env(cls, env) -> "PlanProblem":
        """Planning view of a freshly reset ``V2GEnv``."""
        cfg = env.cfg
        cors = [EvCorridor.build(ev.m, cfg.horizon, cfg.dt_hours, (ev.lo, ev.hi))
                for ev in env.evas]
        hours = np.asarray(env.hours)
        return cls(cors, np.asarray(env.uncontrolled, dtype=float), hours,
                   np.asarray(env.day.tariff[hours], dtype=float), cfg.dt_hours)

    @classmethod
    def window_only(cls, corridors, base_kw, tariff, dt: float = 1.0) -> "PlanProblem":
        """Problem whose variance is taken over the window slots alone."""
        base = np.asarray(base_kw, dtype=float)
        return cls(list(corridors), base, np.arange(len(base)),
                   np.asarray(tariff, dtype=float), dt)

    @property
    def horizon(self) -> int:
        return len(self.hours)

    @property
    def base_kw(self) -> np.ndarray:
        return self.day_kw[self.hours]

    def total_load(self, plans) -> np.ndarray:
        total = self.day_kw.astype(float).copy()
        np.add.at(total, self.hours, sum(p.sum(axis=0) for p in plans))
        return total


@dataclass
class PlanResult:
    plans: list[np.ndarray]
    converged: bool = True
    iterations: int = 0
    shortfall_kwh: float = 0.0

    def eva_power(self) -> np.ndarray:
        return np.array([p.sum(axis=0) for p in self.plans])


# ---------------------------------------------------------------------------
# BL1


def bl1_uncontrolled(problem: PlanProblem) -> PlanResult:
    """Full charger power from arrival until the EV is full, never discharging.

    Full means the highest energy the EV may leave with, so a charge-only plan
    never needs a forced discharge before departure.
    """
    plans = []
    for c in problem.corridors:
        m, K = c.members, problem.horizon
        plan = np.zeros((len(m), K))
        e = m.e0.copy()
        target = c.e_hi[:, -1]
        for k in range(K):
            ceiling = np.minimum(c.e_hi[:, k + 1], target)
            room = np.maximum(ceiling - e, 0.0) / (m.eff * c.dt)
            p = np.minimum(np.maximum(c.p_hi[:, k], 0.0), room)
            plan[:, k] = p
            e = e + m.eff * p * c.dt
        plans.append(plan)
    return PlanResult(plans)


# ---------------------------------------------------------------------------
# BL2


def water_fill(load: np.ndarray, cap: np.ndarray, need: float) -> np.ndarray:
    """Spread ``need`` over the slots so the filled slots share one load level.

    Returns powers ``x`` with ``0 <= x <= cap``, ``sum(x) = min(need, sum(cap))``
    and ``load + x`` flat at a common level wherever ``0 < x < cap``.
    """
    cap = np.maximum(cap, 0.0)
    if need <= 0 or cap.sum() <= 0:
        return np.zeros_like(load)
    if need >= cap.sum():
        return cap.copy()
    open_ = cap > 0
    lo = float(load[open_].min())
    hi = float((load + cap)[open_].max())
    # the delivered amount is monotone in the level; bisect to round-off
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if np.clip(mid - load, 0.0, cap).sum() < need:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-13 * max(1.0, abs(hi)):
            break
    x = np.clip(hi - load, 0.0, cap)
    # hand the last round-off to the slots still below their cap
    gap = need - x.sum()
    room = np.flatnonzero(x < cap - 1e-12) if gap > 0 else np.flatnonzero(x > 1e-12)
    if room.size:
        x[room] = np.clip(x[room] + gap / room.size, 0.0, cap[room])
    return x


def bl2_optimal_charging(problem: PlanProblem) -> PlanResult:
    """Charge-only valley filling.

    EVs are served in arrival order (ties by id). Each EV's energy need, up to
    its departure upper bound, is water-filled into its plug-in window against
    the load left by the EVs before it, at most its charge limit per slot. Needs
    that cannot be met even at full power every slot are reported as shortfall.
    """
    K = problem.horizon
    load = problem.base_kw.astype(float).copy()
    plans = [np.zeros((len(c.members), K)) for c in problem.corridors]
    order = []
    for a, c in enumerate(problem.corridors):
        for j in range(len(c.members)):
            order.append((int(c.members.arr_idx[j]), int(c.members.ids[j]), a, j))
    order.sort()
    shortfall = 0.0
    for _, _, a, j in order:
        c = problem.corridors[a]
        m = c.members
        rate = m.eff[j] * c.dt
        need = max(c.e_hi[j, -1] - m.e0[j], 0.0) / rate  # kW-slots still to place
        cap = np.maximum(c.p_hi[j], 0.0)
        x = water_fill(load, cap, need)
        shortfall += max(need - x.sum(), 0.0) * rate
        plans[a][j] = x
        load += x
    return PlanResult(plans, shortfall_kwh=shortfall)


# ---------------------------------------------------------------------------
# BL3


def _free_slots(c: EvCorridor, j: int):
    """Slots where the EV's power is a decision, and its forced power elsewhere."""
    width = c.p_hi[j] - c.p_lo[j]
    fixed = np.where(width > 1e-12, 0.0, c.p_lo[j])
    return np.flatnonzero(width > 1e-12), fixed


def _ev_constraints(c: EvCorridor, j: int, slots: np.ndarray, fixed: np.ndarray):
    """Linear inequality data ``A x <= b`` on the EV's free-slot powers.

    Energy is checked on the boundary after every free slot; forced powers in
    the other slots enter through the right-hand side.
    """
    m = c.members
    n = len(slots)
    rate = m.eff[j] * c.dt
    cum = np.tril(np.ones((n, n))) * rate
    boundary = slots + 1
    e_start = m.e0[j] + np.concatenate([[0.0], np.cumsum(fixed * rate)])[boundary]
    A = np.vstack([cum, -cum])
    b = np.concatenate([c.e_hi[j, boundary] - e_start, e_start - c.e_lo[j, boundary]])
    bounds = list(zip(c.p_lo[j, slots], c.p_hi[j, slots]))
    return A, b, bounds


def _variance_objective(x, other, idx):
    total = other.copy()
    total[idx] += x
    dev = total - total.mean()
    return float(np.mean(dev ** 2)), 2.0 * dev[idx] / len(total)


def bl3_min_variance(problem: PlanProblem, tol: float = 1e-6, max_sweeps: int = 200,
                     start: PlanResult | None = None) -> PlanResult:
    """Minimise the variance of the total load over the planning day.

    Block-coordinate descent: each EV in turn solves its own small convex QP
    (power box plus energy corridor) against the load left by everyone else.
    The objective is convex and the constraints separate by EV, so the sweeps
    converge to the joint optimum; iteration stops once a full sweep improves
    the variance by less than ``tol`` (relative to the starting variance).
    """
    init = start if start is not None else bl2_optimal_charging(problem)
    plans = [p.copy() for p in init.plans]
    cons = []
    for a, c in enumerate(problem.corridors):
        for j in range(len(c.members)):
            slots, fixed = _free_slots(c, j)
            plans[a][j] = np.where(c.p_hi[j] - c.p_lo[j] > 1e-12, plans[a][j], fixed)
            if slots.size:
                cons.append((a, j, slots, *_ev_constraints(c, j, slots, fixed)))
    total = problem.total_load(plans)
    best = float(np.var(total))
    scale = max(best, 1e-12)
    converged = False
    sweep = 0
    for sweep in range(1, max_sweeps + 1):
        for a, j, slots, A, b, bounds in cons:
            own = plans[a][j]
            idx = problem.hours[slots]
            other = total.copy()
            np.subtract.at(other, problem.hours, own)
            x0 = np.clip(own[slots], [lo for lo, _ in bounds], [hi for _, hi in bounds])
            res = minimize(_variance_objective, x0, args=(other, idx), jac=True,
                           method="SLSQP", bounds=bounds,
                           constraints=[{"type": "ineq", "fun": lambda x, A=A, b=b: b - A @ x,
                                         "jac": lambda x, A=A: -A}],
                           options={"ftol": 1e-12, "maxiter": 200})
            x = res.x
            # keep the old point if the solver's answer is not strictly better and feasible
            if np.all(A @ x <= b + 1e-9) and res.fun < _variance_objective(own[slots], other,
                                                                          idx)[0]:
                own = own.copy()
                own[slots] = np.clip(x, [lo for lo, _ in bounds], [hi for _, hi in bounds])
                plans[a][j] = own
                total = other
                np.add.at(total, problem.hours, own)
        var = float(np.var(total))
        if best - var <= tol * scale:
            converged = True
            best = min(best, var)
            break
        best = var
    return PlanResult(plans, converged=converged, iterations=sweep)


# ---------------------------------------------------------------------------
# BL4


def bl4_min_cost(problem: PlanProblem, movement_weight: float = 1e-6) -> PlanResult:
    """Minimise the charging bill, one linear program per EV.

    The bill separates by EV, so each EV is solved exactly on its own: split
    power into charge and discharge parts, minimise tariff-weighted energy plus
    a tiny movement penalty that is slightly larger for earlier charging. With
    a flat tariff this yields the least-movement plan, charging as late as
    possible. Degradation is not part of this objective.
    """
    plans = []
    K = problem.horizon
    late = 1.0 + (K - 1 - np.arange(K)) / K  # earlier slots carry a larger penalty
    for c in problem.corridors:
        m = c.members
        plan = np.zeros((len(m), K))
        for j in range(len(m)):
            slots, fixed = _free_slots(c, j)
            plan[j] = fixed
            if slots.size == 0:
                continue
            n = slots.size
            A, b, _ = _ev_constraints(c, j, slots, fixed)
            tariff = problem.tariff[slots] * c.dt
            cost = np.concatenate([tariff + movement_weight * late[slots],
                                   -tariff + movement_weight])
            A2 = np.hstack([A, -A])
            hi = np.maximum(c.p_hi[j, slots], 0.0)
            lo = np.maximum(-c.p_lo[j, slots], 0.0)
            # forced-sign slots: a lower bound above zero or an upper bound below it
            bounds = ([(max(c.p_lo[j, s], 0.0), h) for s, h in zip(slots, hi)]
                      + [(max(-c.p_hi[j, s], 0.0), l) for s, l in zip(slots, lo)])
            res = linprog(cost, A_ub=A2, b_ub=b, bounds=bounds, method="highs")
            if res.status != 0:
                raise FloatingPointError(f"min-cost LP failed for EV {m.ids[j]}: {res.message}")
            plan[j, slots] = res.x[:n] - res.x[n:]
        plans.append(plan)
    return PlanResult(plans)


PLANNERS = {
    BaselineKind.UNCONTROLLED: bl1_uncontrolled,
    BaselineKind.OPTIMAL_CHARGING: bl2_optimal_charging,
    BaselineKind.MIN_VARIANCE_V2G: bl3_min_variance,
    BaselineKind.MIN_COST_V2G: bl4_min_cost,
}


def plan_baseline(kind: BaselineKind | str, problem: PlanProblem) -> PlanResult:
    kind = kind if isinstance(kind, BaselineKind) else BaselineKind.parse(kind)
    return PLANNERS[kind](problem)


def run_baseline(env, kind: BaselineKind | str, seed: int):
    """Reset ``env`` with ``seed``, plan, and execute the plan slot by slot.

    Returns ``(transitions, plan_result)``.
    """
    env.reset(seed)
    result = plan_baseline(kind, PlanProblem.from_env(env))
    out = []
    while not env.terminal:
        k = env.k
        out.append(env.step_dispatch([p[:, k] for p in result.plans]))
    return out, result
