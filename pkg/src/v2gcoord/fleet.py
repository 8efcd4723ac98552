"""EV population, EVA partitioning and aggregate flexibility envelopes.

Time convention: the scheduling window has ``horizon`` hourly slots starting at
``window_start`` (15:00). Energies live on the ``horizon + 1`` slot boundaries,
slot ``k`` moves energy from boundary ``k`` to ``k + 1``. An EV that arrives at
hour ``a`` and leaves at hour ``d`` (next morning) is plugged for slots
``a - 15 <= k < d + 24 - 15``.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .battery import SohState


@dataclass(frozen=True)
class EvSpec:
    id: int
    capacity_kwh: float
    p_charge_max_kw: float
    p_discharge_max_kw: float
    arrival_slot: int  # hour of day
    departure_slot: int  # hour of day (next morning)
    soc_arrival: float
    soc_min: float
    soc_max: float
    soc_depart_low: float
    soc_depart_high: float
    efficiency: float

    def __post_init__(self):
        if not self.soc_min <= self.soc_arrival <= self.soc_max:
            raise ValueError(f"EV {self.id}: soc_arrival outside [soc_min, soc_max]")
        if not self.soc_min < self.soc_depart_low <= self.soc_depart_high <= self.soc_max:
            raise ValueError(f"EV {self.id}: inconsistent departure SOC window")
        if not self.p_discharge_max_kw < 0 < self.p_charge_max_kw:
            raise ValueError(f"EV {self.id}: power limits must straddle zero")
        if not 0 < self.efficiency <= 1:
            raise ValueError(f"EV {self.id}: efficiency must lie in (0, 1]")


@dataclass
class EvState:
    energy_kwh: float
    plugged: bool = False
    soh: SohState = SohState()


@dataclass(frozen=True)
class FleetParams:
    count: int = 509
    arrival_mean: float = 18.0
    arrival_std: float = 1.0
    arrival_min: int = 15
    arrival_max: int = 21
    departure_mean: float = 8.0
    departure_std: float = 1.0
    departure_min: int = 6
    departure_max: int = 10
    soc_mean: float = 0.5
    soc_std: float = 0.1
    soc_arrival_min: float = 0.2
    soc_arrival_max: float = 0.8
    capacity_kwh: float = 24.0
    p_charge_max_kw: float = 6.0
    p_discharge_max_kw: float = -6.0
    soc_min: float = 0.2
    soc_max: float = 0.9
    soc_depart_low: float = 0.8
    soc_depart_high: float = 0.9
    efficiency: float = 0.95

    def validate(self):
        if self.count < 0:
            raise ValueError("fleet count must be >= 0")
        for name in ("arrival_std", "departure_std", "soc_std"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.arrival_min > self.arrival_max or self.departure_min > self.departure_max:
            raise ValueError("time bounds are inverted")
        if self.soc_arrival_min > self.soc_arrival_max:
            raise ValueError("arrival SOC bounds are inverted")
        if self.soc_arrival_min < self.soc_min or self.soc_arrival_max > self.soc_max:
            raise ValueError("arrival SOC bounds must lie inside [soc_min, soc_max]")
        if self.capacity_kwh <= 0:
            raise ValueError("capacity_kwh must be positive")


def sample_fleet(count: int, seed: int, params: FleetParams | None = None) -> list[EvSpec]:
    params = params or FleetParams()
    params.validate()
    if count < 0:
        raise ValueError("count must be >= 0")
    rng = np.random.default_rng(seed)
    arrival = np.clip(np.rint(rng.normal(params.arrival_mean, params.arrival_std, count)),
                      params.arrival_min, params.arrival_max).astype(int)
    departure = np.clip(np.rint(rng.normal(params.departure_mean, params.departure_std, count)),
                        params.departure_min, params.departure_max).astype(int)
    soc = np.clip(rng.normal(params.soc_mean, params.soc_std, count),
                  params.soc_arrival_min, params.soc_arrival_max)
    return [
        EvSpec(id=i, capacity_kwh=params.capacity_kwh, p_charge_max_kw=params.p_charge_max_kw,
               p_discharge_max_kw=params.p_discharge_max_kw, arrival_slot=int(arrival[i]),
               departure_slot=int(departure[i]), soc_arrival=float(soc[i]),
               soc_min=params.soc_min, soc_max=params.soc_max,
               soc_depart_low=params.soc_depart_low, soc_depart_high=params.soc_depart_high,
               efficiency=params.efficiency)
        for i in range(count)
    ]


def partition_evas(fleet: Sequence[EvSpec], n_agents: int, seed: int) -> list[list[EvSpec]]:
    """Random near-equal partition; members of each EVA are ordered by id."""
    if n_agents < 1:
        raise ValueError("n_agents must be >= 1")
    if n_agents > len(fleet):
        raise ValueError("more EVAs than EVs")
    order = np.random.default_rng(seed).permutation(len(fleet))
    parts = np.array_split(order, n_agents)
    return [sorted((fleet[i] for i in part), key=lambda ev: ev.id) for part in parts]


FLEET_CSV_FIELDS = [f.name for f in fields(EvSpec)]


def write_fleet_csv(path, fleet: Sequence[EvSpec]):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(FLEET_CSV_FIELDS)
        for ev in fleet:
            row = asdict(ev)
            writer.writerow([repr(row[k]) if isinstance(row[k], float) else row[k]
                             for k in FLEET_CSV_FIELDS])


def read_fleet_csv(path) -> list[EvSpec]:
    types = {f.name: f.type for f in fields(EvSpec)}
    out = []
    with open(Path(path), newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != FLEET_CSV_FIELDS:
            raise ValueError(f"unexpected fleet CSV header: {reader.fieldnames}")
        for row in reader:
            kw = {k: (int(v) if types[k] in ("int", int) else float(v)) for k, v in row.items()}
            out.append(EvSpec(**kw))
    return out


# ---------------------------------------------------------------------------
# vectorised per-EV view


@dataclass
class MemberArrays:
    """Column view of an EVA's members, one entry per EV."""

    ids: np.ndarray
    capacity: np.ndarray
    p_ch: np.ndarray
    p_dis: np.ndarray
    arr_idx: np.ndarray
    dep_idx: np.ndarray
    soc_min: np.ndarray
    soc_max: np.ndarray
    dep_lo: np.ndarray
    dep_hi: np.ndarray
    eff: np.ndarray
    e0: np.ndarray  # energy at window start (frozen until arrival)
    soh_frac: np.ndarray

    @property
    def q_eff(self) -> np.ndarray:
        return self.capacity * self.soh_frac

    def __len__(self):
        return len(self.ids)

    def plugged(self, slot: int) -> np.ndarray:
        return (self.arr_idx <= slot) & (slot < self.dep_idx)

    @classmethod
    def from_members(cls, members, window_start: int = 15, horizon: int = 20):
        """``members`` is a sequence of ``EvSpec`` or ``(EvSpec, EvState)`` pairs."""
        specs, states = [], []
        for m in members:
            if isinstance(m, EvSpec):
                specs.append(m)
                states.append(None)
            else:
                specs.append(m[0])
                states.append(m[1])
        n = len(specs)
        soh = np.array([1.0 if s is None else s.soh.soh_fraction for s in states])
        cap = np.array([ev.capacity_kwh for ev in specs], dtype=float)
        e0 = np.array([ev.soc_arrival * ev.capacity_kwh * soh[i] if states[i] is None
                       else states[i].energy_kwh for i, ev in enumerate(specs)], dtype=float)
        arr = np.array([ev.arrival_slot - window_start for ev in specs], dtype=int)
        dep = np.array([(ev.departure_slot + 24 if ev.departure_slot < window_start
                         else ev.departure_slot) - window_start for ev in specs], dtype=int)
        arr = np.clip(arr, 0, horizon)
        dep = np.clip(np.maximum(dep, arr), 0, horizon)
        return cls(
            ids=np.array([ev.id for ev in specs], dtype=int),
            capacity=cap,
            p_ch=np.array([ev.p_charge_max_kw for ev in specs], dtype=float),
            p_dis=np.array([ev.p_discharge_max_kw for ev in specs], dtype=float),
            arr_idx=arr.reshape(n), dep_idx=dep.reshape(n),
            soc_min=np.array([ev.soc_min for ev in specs], dtype=float),
            soc_max=np.array([ev.soc_max for ev in specs], dtype=float),
            dep_lo=np.array([ev.soc_depart_low for ev in specs], dtype=float),
            dep_hi=np.array([ev.soc_depart_high for ev in specs], dtype=float),
            eff=np.array([ev.efficiency for ev in specs], dtype=float),
            e0=e0, soh_frac=soh,
        )


def ev_energy_bounds(m: MemberArrays, horizon: int, dt: float = 1.0, rate_caps=None):
    """Per-EV energy bounds on every slot boundary, shape ``(n, horizon + 1)``.

    The SOC box is intersected with forward reachability from the arrival energy
    and backward reachability of the departure window, so any energy inside the
    bounds can still be driven to the departure requirement. If the requirement
    is physically out of reach, the target is relaxed to the best reachable
    energy.

    ``rate_caps`` is an optional ``(charge_kw, discharge_kw)`` pair of
    ``(n, horizon)`` arrays limiting the power the backward pass may count on in
    each slot, so the charging (or discharging) a corridor ever forces stays
    within those caps.
    """
    n = len(m)
    t = np.arange(horizon + 1)[None, :]
    arr = m.arr_idx[:, None]
    dep = m.dep_idx[:, None]
    q = m.q_eff[:, None]
    e0 = m.e0[:, None]
    up = (m.eff * m.p_ch * dt)[:, None]
    dn = (m.eff * m.p_dis * dt)[:, None]
    window = dep - arr
    since = np.clip(t - arr, 0, window)

    ch = np.broadcast_to(m.p_ch[:, None], (n, horizon))
    dis = np.broadcast_to(m.p_dis[:, None], (n, horizon))
    if rate_caps is not None:
        ch = np.clip(rate_caps[0], 0.0, ch)
        dis = np.clip(rate_caps[1], dis, 0.0)
    rows = np.arange(n)[:, None]
    cum_up = np.concatenate([np.zeros((n, 1)), np.cumsum(m.eff[:, None] * ch * dt, 1)], 1)
    cum_dn = np.concatenate([np.zeros((n, 1)), np.cumsum(m.eff[:, None] * dis * dt, 1)], 1)
    pos = np.clip(t, arr, dep)
    # energy the EV can still gain (lose) between boundary t and departure
    gain = cum_up[rows, dep] - cum_up[rows, pos]
    loss = cum_dn[rows, dep] - cum_dn[rows, pos]
    reach_up = cum_up[rows, dep] - cum_up[rows, arr]
    reach_dn = cum_dn[rows, dep] - cum_dn[rows, arr]

    target_lo = np.minimum(m.dep_lo[:, None] * q, e0 + reach_up)
    target_hi = np.maximum(m.dep_hi[:, None] * q, e0 + reach_dn)
    lo = np.maximum.reduce([e0 + dn * since, m.soc_min[:, None] * q + 0 * t,
                            target_lo - gain])
    hi = np.minimum.reduce([e0 + up * since, m.soc_max[:, None] * q + 0 * t,
                            target_hi - loss])
    frozen = t <= arr
    lo = np.where(frozen, e0, lo)
    hi = np.where(frozen, e0, hi)
    return lo, hi


def feeder_rate_caps(groups: Sequence[MemberArrays], headroom_up_kw, headroom_dn_kw):
    """Split per-slot feeder headroom over the plugged EVs of every group in
    proportion to their power ratings.

    Returns one ``(charge_kw, discharge_kw)`` pair per group. Charging caps sum
    to at most ``headroom_up_kw`` per slot and discharging caps to at least
    ``-headroom_dn_kw``.
    """
    up = np.maximum(np.asarray(headroom_up_kw, dtype=float), 0.0)
    dn = np.maximum(np.asarray(headroom_dn_kw, dtype=float), 0.0)
    K = len(up)
    k = np.arange(K)[None, :]
    on = [(g.arr_idx[:, None] <= k) & (k < g.dep_idx[:, None]) for g in groups]
    tot_ch = sum((o * g.p_ch[:, None]).sum(0) for o, g in zip(on, groups))
    tot_dis = sum((o * -g.p_dis[:, None]).sum(0) for o, g in zip(on, groups))
    out = []
    for o, g in zip(on, groups):
        share_ch = np.divide(o * g.p_ch[:, None], tot_ch, out=np.zeros((len(g), K)),
                             where=tot_ch > 0)
        share_dis = np.divide(o * -g.p_dis[:, None], tot_dis, out=np.zeros((len(g), K)),
                              where=tot_dis > 0)
        out.append((np.minimum(g.p_ch[:, None], share_ch * up),
                    np.maximum(g.p_dis[:, None], -share_dis * dn)))
    return out


def ev_power_bounds(m: MemberArrays, horizon: int, dt: float = 1.0, energy_bounds=None):
    """Per-EV power bounds per slot, zero while unplugged; shape ``(n, horizon)``.

    The design limits are narrowed to the powers that can connect some energy
    of the EV's corridor at ``k`` to some energy of its corridor at ``k + 1``,
    so every feasible dispatch still satisfies them.
    """
    k = np.arange(horizon)[None, :]
    on = (m.arr_idx[:, None] <= k) & (k < m.dep_idx[:, None])
    lo, hi = energy_bounds if energy_bounds is not None else ev_energy_bounds(m, horizon, dt)
    rate = m.eff[:, None] * dt
    p_lo = np.maximum(m.p_dis[:, None], (lo[:, 1:] - hi[:, :-1]) / rate)
    p_hi = np.minimum(m.p_ch[:, None], (hi[:, 1:] - lo[:, :-1]) / rate)
    p_hi = np.maximum(p_hi, p_lo)
    return np.where(on, p_lo, 0.0), np.where(on, p_hi, 0.0)


@dataclass(frozen=True)
class FleetEnvelope:
    e_lower_kwh: np.ndarray  # (K+1,)
    e_upper_kwh: np.ndarray
    p_lower_kw: np.ndarray  # (K,)
    p_upper_kw: np.ndarray
    pair_lower: np.ndarray  # (K+1, K+1), [k2, k1] lower bound on E[k1] - E[k2]
    pair_upper: np.ndarray
    efficiency: float
    dt: float

    @property
    def horizon(self) -> int:
        return len(self.p_lower_kw)


def build_envelope(members, horizon: int = 20, dt: float = 1.0,
                   window_start: int = 15, rate_caps=None) -> FleetEnvelope:
    """Aggregate energy/power envelope of an EVA.

    Pairwise bounds keep the per-EV max/min inside the sum over EVs, which is
    never looser than applying them to the aggregated bounds.
    """
    m = members if isinstance(members, MemberArrays) else MemberArrays.from_members(
        members, window_start, horizon)
    K = horizon
    if len(m) == 0:
        z1, z = np.zeros(K + 1), np.zeros(K)
        zz = np.zeros((K + 1, K + 1))
        return FleetEnvelope(z1, z1.copy(), z, z.copy(), zz, zz.copy(), 1.0, dt)
    lo, hi = ev_energy_bounds(m, K, dt, rate_caps)
    plo, phi = ev_power_bounds(m, K, dt, (lo, hi))
    rate_lo = m.eff[:, None] * plo * dt
    rate_hi = m.eff[:, None] * phi * dt
    cum_lo = np.concatenate([np.zeros((len(m), 1)), np.cumsum(rate_lo, axis=1)], axis=1)
    cum_hi = np.concatenate([np.zeros((len(m), 1)), np.cumsum(rate_hi, axis=1)], axis=1)
    # [n, k2, k1]
    move_lo = cum_lo[:, None, :] - cum_lo[:, :, None]
    move_hi = cum_hi[:, None, :] - cum_hi[:, :, None]
    pair_lo = np.maximum(lo[:, None, :] - hi[:, :, None], move_lo).sum(axis=0)
    pair_hi = np.minimum(hi[:, None, :] - lo[:, :, None], move_hi).sum(axis=0)
    return FleetEnvelope(
        e_lower_kwh=lo.sum(axis=0), e_upper_kwh=hi.sum(axis=0),
        p_lower_kw=plo.sum(axis=0), p_upper_kw=phi.sum(axis=0),
        pair_lower=pair_lo, pair_upper=pair_hi,
        efficiency=float(np.mean(m.eff)), dt=dt,
    )


def envelope_admits(env: FleetEnvelope, energy_traj, dt: float | None = None,
                    tol: float = 1e-9) -> bool:
    """Whether an EVA energy trajectory (starting at boundary 0) lies in the envelope."""
    if dt is not None and abs(dt - env.dt) > 1e-12:
        raise ValueError("dt differs from the envelope's slot length")
    e = np.asarray(energy_traj, dtype=float)
    n = len(e)
    if n > env.horizon + 1:
        raise ValueError("trajectory longer than the envelope horizon")
    if n == 0:
        return True
    if np.any(e < env.e_lower_kwh[:n] - tol) or np.any(e > env.e_upper_kwh[:n] + tol):
        return False
    diff = e[None, :] - e[:, None]  # [k2, k1] = E[k1] - E[k2]
    iu = np.triu_indices(n, 1)
    d = diff[iu]
    return bool(np.all(d >= env.pair_lower[:n, :n][iu] - tol)
                and np.all(d <= env.pair_upper[:n, :n][iu] + tol))


def next_energy_interval(env: FleetEnvelope, history) -> tuple[float, float]:
    """Admissible interval for the next EVA energy given the realised prefix."""
    h = np.asarray(history, dtype=float)
    k = len(h) - 1
    lo = max(env.e_lower_kwh[k + 1], float(np.max(h + env.pair_lower[:k + 1, k + 1])))
    hi = min(env.e_upper_kwh[k + 1], float(np.min(h + env.pair_upper[:k + 1, k + 1])))
    return lo, hi
