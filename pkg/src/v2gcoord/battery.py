"""Battery conditioning models: SOC bookkeeping, state of power, state of health.

Currents are per parallel branch (one series string of cells); pack-level
powers are obtained by scaling with the series/parallel counts and the
pack-to-vehicle ``capacity_scale``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import NamedTuple, Sequence

import numpy as np


@dataclass(frozen=True)
class CellPack:
    series_count: int = 39
    parallel_count: int = 4
    cell_nominal_voltage: float = 3.3
    cell_capacity: float = 2.3  # Ah per branch
    internal_resistance: float = 0.01  # ohm per cell
    design_current_charge_max: float = 6.9  # A per branch (3C)
    design_current_discharge_max: float = 6.9
    capacity_scale: float = 24000.0 / (39 * 4 * 3.3 * 2.3)

    def __post_init__(self):
        if self.series_count < 1 or self.parallel_count < 1:
            raise ValueError("series_count and parallel_count must be >= 1")
        for name in ("cell_nominal_voltage", "cell_capacity", "internal_resistance",
                     "design_current_charge_max", "design_current_discharge_max",
                     "capacity_scale"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    @property
    def nominal_energy_wh(self) -> float:
        return (self.series_count * self.parallel_count
                * self.cell_nominal_voltage * self.cell_capacity)

    @property
    def vehicle_energy_kwh(self) -> float:
        return self.nominal_energy_wh * self.capacity_scale / 1000.0


DEFAULT_OCV_POINTS = (
    (0.0, 2.80), (0.1, 3.10), (0.2, 3.20), (0.3, 3.25), (0.4, 3.30),
    (0.5, 3.30), (0.6, 3.30), (0.7, 3.32), (0.8, 3.36), (0.9, 3.45),
    (1.0, 3.60),
)


@dataclass(frozen=True)
class OcvCurve:
    """Piecewise-linear open-circuit voltage of one cell as a function of SOC."""

    breakpoints: tuple = DEFAULT_OCV_POINTS

    def __post_init__(self):
        pts = tuple((float(s), float(v)) for s, v in self.breakpoints)
        if len(pts) < 2:
            raise ValueError("OCV curve needs at least two breakpoints")
        soc = np.array([p[0] for p in pts])
        volt = np.array([p[1] for p in pts])
        if soc[0] != 0.0 or soc[-1] != 1.0:
            raise ValueError("OCV breakpoints must span SOC 0 to 1")
        if np.any(np.diff(soc) <= 0):
            raise ValueError("OCV SOC breakpoints must be strictly increasing")
        if np.any(np.diff(volt) < 0):
            raise ValueError("OCV must be non-decreasing in SOC")
        object.__setattr__(self, "breakpoints", pts)

    @property
    def _soc(self):
        return np.array([p[0] for p in self.breakpoints])

    @property
    def _volt(self):
        return np.array([p[1] for p in self.breakpoints])

    def voltage(self, soc: float) -> float:
        return float(np.interp(soc, self._soc, self._volt))

    def slope(self, soc: float) -> float:
        """dU_oc/dSOC of the segment containing ``soc`` (right segment at a knot,
        left segment at SOC 1)."""
        s = self._soc
        v = self._volt
        i = int(np.searchsorted(s, soc, side="right")) - 1
        i = min(max(i, 0), len(s) - 2)
        return float((v[i + 1] - v[i]) / (s[i + 1] - s[i]))


class HalfCycle(NamedTuple):
    dod: float  # percent
    avg_discharge_current: float  # A, mean |I| over discharging samples
    avg_charge_current: float  # A, mean |I| over charging samples
    direction: int = 0  # +1 charging swing, -1 discharging swing


@dataclass(frozen=True)
class SohParams:
    cycle_constant_m1: float = 1500.0
    cycle_life_scale: float = 3000.0
    dod_exponent: float = 0.5
    discharge_current_exponent: float = 0.2
    charge_current_exponent: float = 0.2

    def __post_init__(self):
        for name in ("cycle_constant_m1", "cycle_life_scale", "dod_exponent",
                     "discharge_current_exponent", "charge_current_exponent"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class SohState:
    equivalent_full_cycles: float = 50.0
    aging_factor: float = 1e-5
    half_cycle_history: tuple = ()
    soh_percent: float = field(default=None)  # type: ignore[assignment]
    soc_avg: float = 0.5
    delta_soc: float = 0.6
    dod_guard_hits: int = 0

    def __post_init__(self):
        if self.soh_percent is None:
            object.__setattr__(self, "soh_percent", soh_evaluate(
                self.soc_avg, self.delta_soc, self.equivalent_full_cycles))
        if not 0 < self.soh_percent <= 100:
            raise ValueError("soh_percent must lie in (0, 100]")
        if self.equivalent_full_cycles < 0:
            raise ValueError("equivalent_full_cycles must be >= 0")
        for hc in self.half_cycle_history:
            if not 0 < hc.dod <= 100:
                raise ValueError("half-cycle dod must lie in (0, 100]")

    @property
    def soh_fraction(self) -> float:
        return self.soh_percent / 100.0


def soc_step(energy_kwh: float, power_kw: float, efficiency: float, dt: float) -> float:
    """Single-efficiency energy update, applied in both power directions."""
    if not 0 < efficiency <= 1:
        raise ValueError("efficiency must lie in (0, 1]")
    if not dt > 0:
        raise ValueError("dt must be positive")
    return energy_kwh + efficiency * power_kw * dt


def soh_evaluate(soc_avg: float, delta_soc: float, cycles_w: float) -> float:
    """Capacity-fade SOH in percent after ``cycles_w`` equivalent full cycles."""
    stress = 1.0 + 3.25 * delta_soc - 2.25 * delta_soc ** 2
    return 100.0 - 3.25 * soc_avg * stress * (cycles_w / 100.0) ** 0.453


def count_half_cycles(soc_series: Sequence[float], current_series: Sequence[float],
                      dod_floor: float = 1.0) -> list[HalfCycle]:
    """Split a SOC trajectory into half-cycles at its turning points.

    A reversal only counts once the retrace exceeds ``dod_floor`` percent, so
    sub-floor wiggles are absorbed into the surrounding swing. ``current_series[j]``
    is the current applied while moving from sample ``j`` to ``j + 1``
    (positive = charging).
    """
    soc = np.asarray(soc_series, dtype=float)
    cur = np.asarray(current_series, dtype=float)
    if soc.size == 0 or soc.size != cur.size:
        raise ValueError("soc_series and current_series must be non-empty and equal length")
    floor = dod_floor / 100.0

    # hysteresis turning-point detection
    turns = [0]
    direction = 0
    ext = 0  # index of running extreme since last turn
    for j in range(1, soc.size):
        if direction == 0:
            if abs(soc[j] - soc[0]) >= floor and soc[j] != soc[0]:
                direction = 1 if soc[j] > soc[0] else -1
                ext = j
            continue
        if (soc[j] - soc[ext]) * direction > 0:
            ext = j
        elif abs(soc[j] - soc[ext]) >= floor:
            turns.append(ext)
            direction = -direction
            ext = j
    if direction != 0:
        turns.append(ext)

    out = []
    for a, b in zip(turns[:-1], turns[1:]):
        swing = soc[b] - soc[a]
        dod = abs(swing) * 100.0
        if dod < dod_floor or dod == 0.0:
            continue
        span = cur[a:b]
        dis = np.abs(span[span < 0])
        ch = span[span > 0]
        out.append(HalfCycle(
            dod=float(min(dod, 100.0)),
            avg_discharge_current=float(dis.mean()) if dis.size else 0.0,
            avg_charge_current=float(ch.mean()) if ch.size else 0.0,
            direction=1 if swing > 0 else -1,
        ))
    return out


def max_cycle_count(hc: HalfCycle, params: SohParams) -> float:
    """Cycle life M of a half-cycle. A current that is absent from the half-cycle
    (zero mean) contributes a neutral factor of 1."""
    m = params.cycle_life_scale * (hc.dod / 100.0) ** (-params.dod_exponent)
    if hc.avg_discharge_current > 0:
        m *= hc.avg_discharge_current ** (-params.discharge_current_exponent)
    if hc.avg_charge_current > 0:
        m *= hc.avg_charge_current ** (-params.charge_current_exponent)
    return m


def soh_advance(state: SohState, params: SohParams, half_cycles: Sequence[HalfCycle],
                soc_avg: float | None = None, delta_soc: float | None = None,
                dod_floor: float = 1.0) -> SohState:
    """Advance the aging recursion over ``half_cycles``.

    ``w`` grows by the previous aging factor times M1 for every half-cycle; the
    aging factor drifts with the second difference of consecutive DODs. The
    SOC statistics of the new cycling are blended into the lifetime averages
    weighted by the cycles they produced, and SOH is re-evaluated and never
    allowed to rise.
    """
    if not half_cycles:
        return state
    hist = list(state.half_cycle_history)
    w = state.equivalent_full_cycles
    eps = state.aging_factor
    hits = state.dod_guard_hits
    for hc in half_cycles:
        w = w + max(eps, 0.0) * params.cycle_constant_m1
        hist.append(hc)
        if len(hist) >= 3:
            d2, d1, d0 = hist[-3].dod, hist[-2].dod, hist[-1].dod
            if d1 < dod_floor:
                ratio = 2.0
                hits += 1
            else:
                ratio = (d2 + d0) / d1
            eps = max(eps + 0.5 / max_cycle_count(hist[-2], params) * (2.0 - ratio), 0.0)
    # only the last two half-cycles feed the recursion
    hist = hist[-2:]

    dw = w - state.equivalent_full_cycles
    new_avg, new_delta = state.soc_avg, state.delta_soc
    if soc_avg is not None and delta_soc is not None and w > 0:
        wt = dw / w
        new_avg = (1 - wt) * state.soc_avg + wt * soc_avg
        new_delta = (1 - wt) * state.delta_soc + wt * delta_soc
    soh = min(state.soh_percent, soh_evaluate(new_avg, new_delta, w))
    return replace(state, equivalent_full_cycles=w, aging_factor=eps,
                   half_cycle_history=tuple(hist), soh_percent=soh,
                   soc_avg=new_avg, delta_soc=new_delta, dod_guard_hits=hits)


def sop_current_limits(pack: CellPack, ocv: OcvCurve, soc: float, soc_min: float,
                       soc_max: float, horizon_slots: int = 1, slot_hours: float = 1.0,
                       u_min: float = 2.5, u_max: float = 3.65) -> tuple[float, float]:
    """Peak (charge, discharge) branch currents as the minimum of the SOC-,
    terminal-voltage- and design-based limits."""
    if not soc_min <= soc <= soc_max:
        raise ValueError("soc outside [soc_min, soc_max]")
    if horizon_slots < 1:
        raise ValueError("horizon_slots must be >= 1")
    span = horizon_slots * slot_hours
    q = pack.cell_capacity
    i_soc_dis = q * (soc - soc_min) / span
    i_soc_ch = q * (soc_max - soc) / span

    u = ocv.voltage(soc)
    denom = pack.internal_resistance + span / q * ocv.slope(soc)
    i_u_dis = max((u - u_min) / denom, 0.0)
    i_u_ch = abs((u - u_max) / denom) if u < u_max else 0.0

    i_ch = min(i_soc_ch, i_u_ch, pack.design_current_charge_max)
    i_dis = min(i_soc_dis, i_u_dis, pack.design_current_discharge_max)
    return max(i_ch, 0.0), max(i_dis, 0.0)


def sop_power_limits(pack: CellPack, ocv: OcvCurve, soc: float, soc_min: float,
                     soc_max: float, horizon_slots: int = 1, slot_hours: float = 1.0,
                     u_min: float = 2.5, u_max: float = 3.65) -> tuple[float, float]:
    """Vehicle-level (charge, discharge) power limits in kW; discharge is <= 0."""
    i_ch, i_dis = sop_current_limits(pack, ocv, soc, soc_min, soc_max,
                                     horizon_slots, slot_hours, u_min, u_max)
    volts = ocv.voltage(soc) * pack.series_count
    k = pack.parallel_count * pack.capacity_scale / 1000.0
    p_dis = volts * i_dis * k
    return volts * i_ch * k, (-p_dis if p_dis > 0 else 0.0)


def branch_current(power_kw: float, pack: CellPack) -> float:
    """Branch current (A) drawn by a vehicle-level power at nominal pack voltage."""
    volts = pack.series_count * pack.cell_nominal_voltage
    return power_kw * 1000.0 / (volts * pack.parallel_count * pack.capacity_scale)


def marginal_degradation_cost(capacity_kwh: float, cycles_w: float, c_bat: float = 300.0,
                              c_labor: float = 240.0, soh_eol: float = 0.8,
                              soc_avg: float = 0.5, delta_soc: float = 0.6) -> float:
    """Degradation cost per kWh of energy throughput at the given cycle count.

    One equivalent full cycle moves twice the capacity through the battery, so
    the cost per kWh is the SOH slope in w times the replacement-cost weight,
    divided by ``2 * capacity``.
    """
    w = max(cycles_w, 1e-6)
    stress = 1.0 + 3.25 * delta_soc - 2.25 * delta_soc ** 2
    dsoh_dw = 3.25 * soc_avg * stress * 0.453 / 100.0 * (w / 100.0) ** (0.453 - 1.0)
    weight = c_bat + c_labor / (1.0 - soh_eol)
    return weight * (dsoh_dw / 100.0) * capacity_kwh / (2.0 * capacity_kwh)


def sop_power_limits_array(pack: CellPack, ocv: OcvCurve, soc, soc_min, soc_max,
                           horizon_slots: int = 1, slot_hours: float = 1.0,
                           u_min: float = 2.5, u_max: float = 3.65):
    """Element-wise ``sop_power_limits`` over arrays of EVs (kW; discharge <= 0).

    SOC values are clipped into their window first so floating-point drift at a
    bound yields a zero limit rather than an error.
    """
    soc_min = np.asarray(soc_min, dtype=float)
    soc_max = np.asarray(soc_max, dtype=float)
    soc = np.clip(np.asarray(soc, dtype=float), soc_min, soc_max)
    span = horizon_slots * slot_hours
    q = pack.cell_capacity
    s_knots = np.array([p[0] for p in ocv.breakpoints])
    v_knots = np.array([p[1] for p in ocv.breakpoints])
    u = np.interp(soc, s_knots, v_knots)
    i = np.clip(np.searchsorted(s_knots, soc, side="right") - 1, 0, len(s_knots) - 2)
    slope = (v_knots[i + 1] - v_knots[i]) / (s_knots[i + 1] - s_knots[i])
    denom = pack.internal_resistance + span / q * slope
    i_dis = np.minimum.reduce([q * (soc - soc_min) / span, np.maximum((u - u_min) / denom, 0.0),
                               np.full_like(soc, pack.design_current_discharge_max)])
    i_ch = np.minimum.reduce([q * (soc_max - soc) / span,
                              np.where(u < u_max, np.abs((u - u_max) / denom), 0.0),
                              np.full_like(soc, pack.design_current_charge_max)])
    k = u * pack.series_count * pack.parallel_count * pack.capacity_scale / 1000.0
    return np.maximum(i_ch, 0.0) * k, -np.maximum(i_dis, 0.0) * k
