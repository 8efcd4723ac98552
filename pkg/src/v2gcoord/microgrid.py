"""Exogenous day profiles, net load, load variance and stakeholder costs."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

HOURS = 24


@dataclass(frozen=True)
class GridDay:
    base_load_kw: np.ndarray
    pv_kw: np.ndarray
    wind_kw: np.ndarray
    tariff: np.ndarray
    transformer_kva: float = 4000.0
    power_factor: float = 0.8
    tie_line_min_kw: float = 0.0
    fluctuation_coeff: float = 0.01
    mean_net_load_coeff: float = 0.1

    def __post_init__(self):
        for name in ("base_load_kw", "pv_kw", "wind_kw", "tariff"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != (HOURS,):
                raise ValueError(f"{name} must have {HOURS} entries")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if np.any(self.pv_kw < 0) or np.any(self.wind_kw < 0):
            raise ValueError("renewable profiles must be non-negative")
        if not self.fluctuation_coeff > 0:
            raise ValueError("fluctuation_coeff must be positive")
        if not 0 < self.power_factor <= 1 or not self.transformer_kva > 0:
            raise ValueError("invalid transformer rating")

    @property
    def grid_upper_kw(self) -> float:
        return self.transformer_kva * self.power_factor

    @property
    def uncontrolled_kw(self) -> np.ndarray:
        return self.base_load_kw - self.pv_kw - self.wind_kw

    def scaled(self, factor: float) -> "GridDay":
        """Shrink the feeder to a smaller fleet: powers and rating scale linearly,
        the fluctuation weight inversely so ``alpha * variance`` scales linearly too."""
        return replace(self, base_load_kw=self.base_load_kw * factor,
                       pv_kw=self.pv_kw * factor, wind_kw=self.wind_kw * factor,
                       transformer_kva=self.transformer_kva * factor,
                       tie_line_min_kw=self.tie_line_min_kw * factor,
                       fluctuation_coeff=self.fluctuation_coeff / factor)


@dataclass(frozen=True)
class GridRating:
    """Feeder ratings and cost weights that accompany a day profile."""

    transformer_kva: float = 4000.0
    power_factor: float = 0.8
    tie_line_min_kw: float = 0.0
    fluctuation_coeff: float = 0.01
    mean_net_load_coeff: float = 0.1


@dataclass(frozen=True)
class ProfileParams:
    base_mean_kw: float = 1700.0
    base_swing_kw: float = 500.0
    base_peak_hour: float = 19.0
    pv_peak_kw: float = 800.0
    wind_mean_kw: float = 300.0
    wind_swing_kw: float = 100.0
    noise_std_kw: float = 20.0
    tariff_offpeak: float = 0.10
    tariff_peak: float = 0.25
    peak_start: int = 8
    peak_end: int = 22  # exclusive
    seed: int = 0


def synthetic_day(params: ProfileParams | None = None, **grid_kw) -> GridDay:
    """Default day: sinusoidal residential load peaking in the evening, a
    half-sine PV bump between 06:00 and 18:00, night-heavy wind, small seeded
    noise, and a two-level time-of-use tariff."""
    p = params or ProfileParams()
    h = np.arange(HOURS, dtype=float)
    rng = np.random.default_rng(p.seed)
    base = p.base_mean_kw + p.base_swing_kw * np.cos(2 * np.pi * (h - p.base_peak_hour) / HOURS)
    base = base + rng.normal(0.0, p.noise_std_kw, HOURS)
    pv = p.pv_peak_kw * np.clip(np.sin(np.pi * (h - 6.0) / 12.0), 0.0, None)
    wind = np.clip(p.wind_mean_kw + p.wind_swing_kw * np.cos(2 * np.pi * h / HOURS)
                   + rng.normal(0.0, p.noise_std_kw, HOURS), 0.0, None)
    tariff = np.where((h >= p.peak_start) & (h < p.peak_end), p.tariff_peak, p.tariff_offpeak)
    return GridDay(base, pv, wind, tariff, **grid_kw)


def window_hours(window_start: int = 15, horizon: int = 20) -> np.ndarray:
    return (window_start + np.arange(horizon)) % HOURS


def window_to_day(p_window: Sequence[float], window_start: int = 15) -> np.ndarray:
    """Place a window-indexed series onto the 24 hours of the day (zeros elsewhere)."""
    p = np.asarray(p_window, dtype=float)
    out = np.zeros(HOURS)
    out[window_hours(window_start, len(p))] += p
    return out


@dataclass(frozen=True)
class CostBreakdown:
    f1_grid: float
    f2_charging: float
    f3_degradation: float
    load_variance: float
    mean_net_load: float
    fluctuation: float
    dso_total: float


def power_load(day: GridDay, p_eva_kw) -> np.ndarray:
    return day.base_load_kw - day.pv_kw - day.wind_kw + np.asarray(p_eva_kw, dtype=float)


def load_variance(p_total_kw) -> float:
    p = np.asarray(p_total_kw, dtype=float)
    if p.size == 0:
        raise ValueError("empty load profile")
    return float(np.mean((p - p.mean()) ** 2))


def cost_f1(day: GridDay, p_total, p_net_load) -> float:
    return (day.fluctuation_coeff * load_variance(p_total)
            + day.mean_net_load_coeff * float(np.mean(p_net_load)))


def net_load(day: GridDay, p_eva_kw) -> np.ndarray:
    """Renewable-offset EVA load (base load excluded), as used in the grid cost."""
    return -day.pv_kw - day.wind_kw + np.asarray(p_eva_kw, dtype=float)


def cost_f2(tariff, p_eva_kw, dt: float = 1.0) -> float:
    return float(np.sum(np.asarray(tariff, dtype=float) * np.asarray(p_eva_kw, dtype=float)) * dt)


def degradation_weight(c_bat: float = 300.0, c_labor: float = 240.0,
                       soh_eol: float = 0.8) -> float:
    if not 0 < soh_eol < 1:
        raise ValueError("soh_eol must lie in (0, 1)")
    return c_bat + c_labor / (1.0 - soh_eol)


def cost_f3(fleet_soh, c_bat: float = 300.0, c_labor: float = 240.0,
            soh_eol: float = 0.8) -> float:
    """Replacement-cost-weighted capacity loss; ``fleet_soh`` holds
    ``(SohState or SOH fraction, capacity_kwh)`` pairs."""
    weight = degradation_weight(c_bat, c_labor, soh_eol)
    total = 0.0
    for soh, cap in fleet_soh:
        frac = soh.soh_fraction if hasattr(soh, "soh_fraction") else float(soh)
        total += weight * (1.0 - frac) * cap
    return total


def dso_decomposition(day: GridDay, p_eva_kw, fleet_soh=(), dt: float = 1.0,
                      fleet_soh_start=None, c_bat: float = 300.0, c_labor: float = 240.0,
                      soh_eol: float = 0.8) -> CostBreakdown:
    """One-day DSO cost lines. With ``fleet_soh_start`` the degradation line is
    the day's increment of F3 rather than the lifetime total."""
    p_eva = np.asarray(p_eva_kw, dtype=float)
    p_total = power_load(day, p_eva)
    p_net = net_load(day, p_eva)
    var = load_variance(p_total)
    charging = cost_f2(day.tariff, p_eva, dt)
    degradation = cost_f3(fleet_soh, c_bat, c_labor, soh_eol)
    if fleet_soh_start is not None:
        degradation -= cost_f3(fleet_soh_start, c_bat, c_labor, soh_eol)
    fluctuation = day.fluctuation_coeff * var
    return CostBreakdown(
        f1_grid=cost_f1(day, p_total, p_net),
        f2_charging=charging,
        f3_degradation=degradation,
        load_variance=var,
        mean_net_load=float(np.mean(p_net)),
        fluctuation=fluctuation,
        dso_total=charging + degradation + fluctuation,
    )


def check_grid_constraints(day: GridDay, p_total, tol: float = 0.0) -> np.ndarray:
    p = np.asarray(p_total, dtype=float)
    return (p >= day.tie_line_min_kw - tol) & (p <= day.grid_upper_kw + tol)


PROFILE_FIELDS = ["slot", "base_kw", "pv_kw", "wind_kw", "tariff"]


def write_profile_csv(path, day: GridDay):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PROFILE_FIELDS)
        for k in range(HOURS):
            w.writerow([k, repr(float(day.base_load_kw[k])), repr(float(day.pv_kw[k])),
                        repr(float(day.wind_kw[k])), repr(float(day.tariff[k]))])


def read_profile_csv(path, **grid_kw) -> GridDay:
    """Strict parse: exact header, 24 rows with slots 0..23, finite numbers only."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != PROFILE_FIELDS:
        raise ValueError(f"profile header must be {','.join(PROFILE_FIELDS)}")
    body = rows[1:]
    if len(body) != HOURS:
        raise ValueError(f"profile must have {HOURS} data rows, got {len(body)}")
    cols = np.zeros((HOURS, 4))
    for k, row in enumerate(body):
        if len(row) != 5 or any(v.strip() == "" for v in row):
            raise ValueError(f"row {k + 1}: missing values")
        if int(row[0]) != k:
            raise ValueError(f"row {k + 1}: expected slot {k}")
        vals = [float(v) for v in row[1:]]
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"row {k + 1}: non-finite value")
        cols[k] = vals
    return GridDay(cols[:, 0], cols[:, 1], cols[:, 2], cols[:, 3], **grid_kw)
