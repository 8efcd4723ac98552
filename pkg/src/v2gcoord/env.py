"""Constrained multi-agent environment over the overnight scheduling window.

One agent per EVA. Each step an agent's action in [-1, 1] is mapped onto the
EVA's aggregate power range for the slot, clipped to what the plugged EVs can
actually absorb or deliver (which also keeps the EVA energy inside its
envelope), jointly clipped to the feeder limits, and dispatched to the EVs by
the stake-weighted allocator. An agent's cost is 1 whenever its action had to
be clipped, or when the joint request broke a feeder limit.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .battery import (CellPack, OcvCurve, SohParams, SohState, marginal_degradation_cost,
                      sop_power_limits_array)
from .fleet import (FleetEnvelope, FleetParams, MemberArrays, build_envelope,
                    ev_energy_bounds, feeder_rate_caps, next_energy_interval, partition_evas,
                    sample_fleet)
from .microgrid import (GridDay, GridRating, ProfileParams, read_profile_csv, synthetic_day,
                        window_hours)
from .pos import AllocationPlan, EvLimits, Stake, allocate

REFERENCE_FLEET = 509
OBS_DIM = 28
CLIP_TOL = 1e-9


@dataclass(frozen=True)
class RewardConfig:
    fluctuation_coeff: float | None = None  # None: take the grid day's value
    mean_net_load_coeff: float | None = None
    cost_coeff: float = 1.0  # weight on the EVA charging cost in the reward
    beta: float = 1.0  # offset added on top of the automatic lower-bound shift
    auto_shift: bool = True
    degradation: bool = True


@dataclass(frozen=True)
class EnvConfig:
    n_agents: int = 2
    n_evs: int = 20
    horizon: int = 20
    window_start: int = 15
    dt_hours: float = 1.0
    cost_limit: float = 0.1
    fleet: FleetParams = FleetParams()
    profile: ProfileParams = ProfileParams()
    rating: GridRating = GridRating()
    profile_csv: str | None = None  # measured day instead of the synthetic one
    scale_grid: bool = True  # shrink the feeder to the fleet size
    fleet_seed: int | None = None  # fixed fleet; None resamples on every reset
    partition_seed: int = 0
    reward: RewardConfig = RewardConfig()
    pack: CellPack = CellPack()
    ocv: OcvCurve = OcvCurve()
    soh: SohState = SohState()
    soh_params: SohParams = SohParams()
    use_sop: bool = True
    lock_fraction: float = 0.1
    c_bat: float = 300.0
    c_labor: float = 240.0
    soh_eol: float = 0.8

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.cost_limit < 0:
            raise ValueError("cost_limit must be >= 0")
        if self.n_agents < 1 or self.n_evs < self.n_agents:
            raise ValueError("need at least one EV per agent")
        if self.dt_hours <= 0:
            raise ValueError("dt_hours must be positive")

    def grid_day(self) -> GridDay:
        rating = asdict(self.rating)
        if self.profile_csv:
            day = read_profile_csv(self.profile_csv, **rating)
        else:
            day = synthetic_day(self.profile, **rating)
        if self.scale_grid:
            day = day.scaled(self.n_evs / REFERENCE_FLEET)
        return day


@dataclass
class Transition:
    states: np.ndarray  # (n_agents, OBS_DIM)
    raw_actions: np.ndarray
    scaled_kw: np.ndarray
    clipped_kw: np.ndarray
    reward: float
    costs: np.ndarray  # 0/1 per agent
    next_states: np.ndarray
    terminal: bool
    info: dict = field(default_factory=dict)


def scale_action(raw: float, p_lower_kw: float, p_upper_kw: float) -> float:
    if p_lower_kw > p_upper_kw:
        raise ValueError("p_lower exceeds p_upper")
    return p_lower_kw + (raw + 1.0) * 0.5 * (p_upper_kw - p_lower_kw)


def safety_clip(p_eva_kw: float, envelope: FleetEnvelope, history_kwh, slot: int,
                dt: float = 1.0, tol: float = CLIP_TOL) -> tuple[float, bool]:
    """Clip an EVA power so the next EVA energy stays inside the envelope.

    ``history_kwh`` is the realised energy prefix up to boundary ``slot``.
    """
    eta = envelope.efficiency
    e_now = float(np.asarray(history_kwh)[-1])
    e_lo, e_hi = next_energy_interval(envelope, history_kwh)
    lo = max(envelope.p_lower_kw[slot], (e_lo - e_now) / (eta * dt))
    hi = min(envelope.p_upper_kw[slot], (e_hi - e_now) / (eta * dt))
    hi = max(hi, lo)
    clipped = min(max(p_eva_kw, lo), hi)
    return clipped, abs(clipped - p_eva_kw) > tol


class _Eva:
    """Mutable per-EVA bookkeeping for one episode."""

    def __init__(self, members: MemberArrays, cfg: EnvConfig, rate_caps=None):
        K = cfg.horizon
        self.m = members
        self.lo, self.hi = ev_energy_bounds(members, K, cfg.dt_hours, rate_caps)
        self.envelope = build_envelope(members, K, cfg.dt_hours, rate_caps=rate_caps)
        self.energy = members.e0.copy()
        self.energy_hist = np.zeros((len(members), K + 1))
        self.energy_hist[:, 0] = self.energy
        self.power_hist = np.zeros((len(members), K))
        self.total_hist = [float(self.energy.sum())]
        self.capacity_total = float(members.capacity.sum())
        self.soh_w = np.full(len(members), cfg.soh.equivalent_full_cycles)
        self.deg_cost = np.array([
            marginal_degradation_cost(q, w, cfg.c_bat, cfg.c_labor, cfg.soh_eol)
            for q, w in zip(members.capacity, self.soh_w)])

    def limits(self, k: int, cfg: EnvConfig) -> EvLimits:
        m, dt = self.m, cfg.dt_hours
        on = m.plugged(k)
        e = self.energy
        e_lo, e_hi = self.lo[:, k + 1], self.hi[:, k + 1]
        a = np.maximum(m.p_dis, (e_lo - e) / (m.eff * dt))
        b = np.minimum(m.p_ch, (e_hi - e) / (m.eff * dt))
        b = np.maximum(a, b)
        if cfg.use_sop:
            q = m.q_eff
            sop_ch, sop_dis = sop_power_limits_array(cfg.pack, cfg.ocv, e / q, m.soc_min, m.soc_max,
                                                     1, dt)
            # the state-of-power limits never override what the SOC window requires
            a2 = np.clip(np.maximum(a, sop_dis), a, b)
            b2 = np.clip(np.minimum(b, sop_ch), a2, b)
            a, b = a2, b2
        a = np.where(on, a, 0.0)
        b = np.where(on, b, 0.0)
        return EvLimits(lower_kw=a, upper_kw=b, energy_kwh=e.copy(),
                        e_next_lower=np.where(on, e_lo, e), e_next_upper=np.where(on, e_hi, e),
                        efficiency=m.eff, dt=dt)

    def apply(self, k: int, plan: AllocationPlan, limits: EvLimits):
        p = plan.power_kw
        e_new = self.energy + self.m.eff * p * limits.dt
        # absorb last-ulp drift against the bounds
        e_new = np.clip(e_new, limits.e_next_lower, limits.e_next_upper)
        self.energy = e_new
        self.energy_hist[:, k + 1] = e_new
        self.power_hist[:, k] = p
        self.total_hist.append(float(e_new.sum()))


class V2GEnv:
    def __init__(self, config: EnvConfig | None = None, day: GridDay | None = None):
        self.cfg = config or EnvConfig()
        self.day = day if day is not None else self.cfg.grid_day()
        self.hours = window_hours(self.cfg.window_start, self.cfg.horizon)
        self.uncontrolled = self.day.uncontrolled_kw
        self.alpha = (self.cfg.reward.fluctuation_coeff if self.cfg.reward.fluctuation_coeff
                      is not None else self.day.fluctuation_coeff)
        self.psi = (self.cfg.reward.mean_net_load_coeff if self.cfg.reward.mean_net_load_coeff
                    is not None else self.day.mean_net_load_coeff)
        self.load_scale = self.day.grid_upper_kw
        self.tariff_scale = float(np.max(np.abs(self.day.tariff))) or 1.0
        self.k = None
        self.fleet = None
        self.evas: list[_Eva] = []

    # ------------------------------------------------------------------ setup
    @property
    def n_agents(self) -> int:
        return self.cfg.n_agents

    def reset(self, seed: int) -> np.ndarray:
        cfg = self.cfg
        self.rng = np.random.default_rng(seed)
        fleet_seed = cfg.fleet_seed if cfg.fleet_seed is not None else int(
            self.rng.integers(2 ** 31))
        self.fleet = sample_fleet(cfg.n_evs, fleet_seed, replace(cfg.fleet, count=cfg.n_evs))
        parts = partition_evas(self.fleet, cfg.n_agents, cfg.partition_seed)
        self.members = parts
        groups = []
        for part in parts:
            m = MemberArrays.from_members(part, cfg.window_start, cfg.horizon)
            m.soh_frac[:] = cfg.soh.soh_fraction
            m.e0[:] = np.array([ev.soc_arrival for ev in part]) * m.q_eff
            groups.append(m)
        # forced charging (discharging) must fit under the feeder in every slot
        base = self.uncontrolled[self.hours]
        caps = feeder_rate_caps(groups, self.day.grid_upper_kw - base,
                                base - self.day.tie_line_min_kw)
        self.evas = [_Eva(m, cfg, c) for m, c in zip(groups, caps)]
        # pre-window hours see no EVA power
        start = cfg.window_start
        self.load_hist = [float(self.uncontrolled[(start - 24 + j) % 24]) for j in range(24)]
        self.k = 0
        self.beta = self._reward_shift()
        return self._observe()

    def _reward_shift(self) -> float:
        """Offset making every reward denominator at least ``beta``."""
        r = self.cfg.reward
        if not r.auto_shift:
            return r.beta
        dis = sum(float(np.sum(-ev.m.p_dis)) for ev in self.evas) * self.cfg.dt_hours
        ren = float(np.max(self.day.pv_kw + self.day.wind_kw))
        c_max = float(np.max(np.maximum(self.day.tariff, 0.0)))
        return r.beta + self.psi * (ren + dis) + r.cost_coeff * c_max * dis

    def _observe(self) -> np.ndarray:
        k = min(self.k, self.cfg.horizon - 1)
        hist = np.array(self.load_hist[-23:] + [float(self.uncontrolled[self.hours[k]])])
        var = float(np.var(hist))
        tariff = float(self.day.tariff[self.hours[k]])
        obs = np.zeros((self.n_agents, OBS_DIM))
        for i, ev in enumerate(self.evas):
            e_scale = ev.capacity_total or 1.0
            e_now = ev.total_hist[-1]
            de = abs(e_now - ev.total_hist[-2]) if len(ev.total_hist) > 1 else 0.0
            obs[i, :24] = hist / self.load_scale
            obs[i, 24] = e_now / e_scale
            obs[i, 25] = var / self.load_scale ** 2
            obs[i, 26] = tariff / self.tariff_scale
            obs[i, 27] = de / e_scale
        return obs

    # ------------------------------------------------------------------- step
    @property
    def terminal(self) -> bool:
        return self.k is not None and self.k >= self.cfg.horizon

    def action_bounds(self) -> np.ndarray:
        k = self.k
        return np.array([[ev.envelope.p_lower_kw[k], ev.envelope.p_upper_kw[k]]
                         for ev in self.evas])

    def step(self, raw_actions) -> Transition:
        if self.k is None or self.terminal:
            raise RuntimeError("step() on a terminal or un-reset episode")
        k = self.k
        raw = np.clip(np.asarray(raw_actions, dtype=float).reshape(self.n_agents), -1.0, 1.0)
        scaled = np.array([scale_action(raw[i], ev.envelope.p_lower_kw[k], ev.envelope.p_upper_kw[k])
                           for i, ev in enumerate(self.evas)])
        return self._advance(raw, scaled, None)

    def step_dispatch(self, per_ev_kw) -> Transition:
        """Step with explicit per-EV powers, one array per EVA for the current
        slot. The EVA request is their sum; it goes through the same clipping,
        correction and validation as an agent action."""
        if self.k is None or self.terminal:
            raise RuntimeError("step() on a terminal or un-reset episode")
        k = self.k
        proposals = [np.asarray(p, dtype=float).reshape(len(ev.m)) for p, ev in
                     zip(per_ev_kw, self.evas, strict=True)]
        scaled = np.array([p.sum() for p in proposals])
        raw = np.zeros(self.n_agents)
        for i, ev in enumerate(self.evas):
            p_lo, p_hi = ev.envelope.p_lower_kw[k], ev.envelope.p_upper_kw[k]
            if p_hi > p_lo:
                raw[i] = np.clip(2.0 * (scaled[i] - p_lo) / (p_hi - p_lo) - 1.0, -1.0, 1.0)
        return self._advance(raw, scaled, proposals)

    def _advance(self, raw, scaled, proposals) -> Transition:
        cfg, k, dt = self.cfg, self.k, self.cfg.dt_hours
        state = self._observe()
        hour = self.hours[k]
        lo = np.zeros(self.n_agents)
        hi = np.zeros(self.n_agents)
        limits = []
        for i, ev in enumerate(self.evas):
            lim = ev.limits(k, cfg)
            limits.append(lim)
            a, b = float(lim.lower_kw.sum()), float(lim.upper_kw.sum())
            # the per-EV range lies inside the envelope range; intersect for safety
            env_p, _ = safety_clip(a, ev.envelope, ev.total_hist, k, dt)
            env_q, _ = safety_clip(b, ev.envelope, ev.total_hist, k, dt)
            lo[i], hi[i] = max(a, env_p), max(min(b, env_q), max(a, env_p))
        clipped = np.clip(scaled, lo, hi)
        own_violation = np.abs(clipped - scaled) > CLIP_TOL

        # feeder limits act on the joint request
        base = float(self.uncontrolled[hour])
        total = base + clipped.sum()
        upper, lower = self.day.grid_upper_kw, self.day.tie_line_min_kw
        grid_violation = bool(total > upper + CLIP_TOL or total < lower - CLIP_TOL)
        if total > upper:
            clipped = self._shrink(clipped, lo, total - upper, down=True)
        elif total < lower:
            clipped = self._shrink(clipped, hi, lower - total, down=False)

        realized = np.zeros(self.n_agents)
        plans = []
        deg = 0.0
        for i, ev in enumerate(self.evas):
            on = ev.m.plugged(k)
            stakes = [Stake(int(ev.m.ids[j]), cfg.lock_fraction * float(ev.energy[j]),
                            float(ev.soh_w[j])) for j in np.flatnonzero(on)]
            plan = allocate(float(clipped[i]), limits[i], stakes, self.rng,
                            None if proposals is None else proposals[i])
            if abs(plan.residual_kw) > 1e-6 or not plan.validated:
                raise RuntimeError(f"allocation failed for EVA {i} at slot {k}: "
                                   f"residual {plan.residual_kw}")
            ev.apply(k, plan, limits[i])
            plans.append(plan)
            realized[i] = float(plan.power_kw.sum())
            deg += float(np.sum(ev.deg_cost * np.abs(plan.power_kw))) * dt

        p_eva = float(realized.sum())
        p_total = base + p_eva
        self.load_hist.append(p_total)
        self.load_hist = self.load_hist[-24:]
        sigma2 = float(np.var(self.load_hist))
        p_load = -float(self.day.pv_kw[hour] + self.day.wind_kw[hour]) + p_eva
        tariff = float(self.day.tariff[hour])
        rc = cfg.reward
        denom = (self.alpha * sigma2 + self.psi * p_load + rc.cost_coeff * tariff * p_eva * dt
                 + (deg if rc.degradation else 0.0) + self.beta)
        reward = 1.0 / denom
        costs = (own_violation | grid_violation).astype(float)

        self.k += 1
        next_state = self._observe()
        return Transition(
            states=state, raw_actions=raw, scaled_kw=scaled, clipped_kw=realized,
            reward=reward, costs=costs, next_states=next_state, terminal=self.terminal,
            info={"slot": k, "hour": int(hour), "sigma2": sigma2, "p_total": p_total,
                  "energy": np.array([ev.total_hist[-1] for ev in self.evas]),
                  "lower": lo, "upper": hi, "grid_violation": grid_violation,
                  "own_violation": own_violation, "plans": plans, "limits": limits,
                  "grid_ok_after": bool(lower - 1e-6 <= p_total <= upper + 1e-6),
                  "degradation_cost": deg, "denominator": denom},
        )

    @staticmethod
    def _shrink(p, bound, excess, down):
        room = (p - bound) if down else (bound - p)
        room = np.maximum(room, 0.0)
        total = room.sum()
        if total <= excess:
            return bound.copy()
        step = room * (excess / total)
        return p - step if down else p + step

    # -------------------------------------------------------------- summaries
    def eva_power(self) -> np.ndarray:
        """Realised power per EVA and slot, shape (n_agents, horizon)."""
        return np.array([ev.power_hist.sum(axis=0) for ev in self.evas])

    def energy_trajectories(self) -> list[np.ndarray]:
        return [np.array(ev.total_hist) for ev in self.evas]


def episode_rollout(env: V2GEnv, policy, seed: int) -> list[Transition]:
    """Run one episode; ``policy(obs, rng)`` returns raw actions for all agents
    and draws any randomness from the env-provided generator."""
    obs = env.reset(seed)
    rng = np.random.default_rng([seed, 1])
    out = []
    while not env.terminal:
        tr = env.step(policy(obs, rng))
        out.append(tr)
        obs = tr.next_states
    return out
