"""One-day evaluation, one-year SOH replay, and the report/CSV emitters."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .baselines import BaselineKind, run_baseline
from .battery import (CellPack, OcvCurve, SohParams, SohState, branch_current,
                      count_half_cycles, soh_advance, sop_power_limits_array)
from .env import V2GEnv, episode_rollout
from .microgrid import CostBreakdown, dso_decomposition, window_to_day

REPORT_VERSION = 1


@dataclass
class DayRecord:
    """Everything observed while dispatching one scheduling day."""

    source: str
    transitions: list
    eva_power_kw: np.ndarray  # (n_agents, K)
    day_eva_kw: np.ndarray  # (24,) EVA power placed on the clock
    ev_ids: list[np.ndarray]
    ev_energy_kwh: list[np.ndarray]  # per EVA, (n, K+1)
    ev_power_kw: list[np.ndarray]  # per EVA, (n, K)
    proposed_kw: list[np.ndarray]  # per EVA, (n, K) proposals before correction


def _record(env: V2GEnv, source: str, transitions) -> DayRecord:
    K = env.cfg.horizon
    proposed = []
    for i, ev in enumerate(env.evas):
        prop = np.zeros((len(ev.m), K))
        for k, tr in enumerate(transitions):
            plan = tr.info["plans"][i]
            if plan.proposed_kw is not None:
                prop[:, k] = plan.proposed_kw
        proposed.append(prop)
    p = env.eva_power()
    return DayRecord(
        source=source, transitions=transitions, eva_power_kw=p,
        day_eva_kw=window_to_day(p.sum(axis=0), env.cfg.window_start),
        ev_ids=[ev.m.ids.copy() for ev in env.evas],
        ev_energy_kwh=[ev.energy_hist.copy() for ev in env.evas],
        ev_power_kw=[ev.power_hist.copy() for ev in env.evas],
        proposed_kw=proposed)


def run_policy_day(env: V2GEnv, policy, seed: int, source: str = "policy") -> DayRecord:
    return _record(env, source, episode_rollout(env, policy, seed))


def run_baseline_day(env: V2GEnv, kind: BaselineKind | str, seed: int) -> DayRecord:
    kind = kind if isinstance(kind, BaselineKind) else BaselineKind.parse(kind)
    transitions, _ = run_baseline(env, kind, seed)
    return _record(env, kind.value, transitions)


def run_idle_day(env: V2GEnv, seed: int) -> DayRecord:
    """Zero power request for every EV; only forced charging survives the clip."""
    env.reset(seed)
    out = []
    while not env.terminal:
        out.append(env.step_dispatch([np.zeros(len(ev.m)) for ev in env.evas]))
    return _record(env, "idle", out)


# ---------------------------------------------------------------------------
# SOH


def ev_day_cycles(soc: np.ndarray, power_kw: np.ndarray, arr: int, dep: int,
                  pack: CellPack, dod_floor: float = 1.0):
    """Half-cycles of one EV over one day plus its SOC statistics.

    The plugged SOC path runs from arrival to departure; the drive home closes
    the loop back to the arrival SOC. The drive current is unknown and enters
    as zero, i.e. with a neutral current factor.
    """
    if dep <= arr:
        return [], None, None
    path = np.concatenate([soc[arr:dep + 1], [soc[arr]]])
    cur = np.array([branch_current(p, pack) for p in power_kw[arr:dep]] + [0.0, 0.0])
    cycles = count_half_cycles(path, cur, dod_floor)
    return cycles, float(path.mean()), float(path.max() - path.min())


def _ev_cycles(env: V2GEnv, record: DayRecord):
    out = []
    for i, ev in enumerate(env.evas):
        m = ev.m
        soc = record.ev_energy_kwh[i] / m.q_eff[:, None]
        for j in range(len(m)):
            out.append((float(m.capacity[j]),
                        ev_day_cycles(soc[j], record.ev_power_kw[i][j], int(m.arr_idx[j]),
                                      int(m.dep_idx[j]), env.cfg.pack)))
    return out


def simulate_year(env: V2GEnv, record: DayRecord, days: int = 365,
                  params: SohParams | None = None, start: SohState | None = None):
    """Replay the day's dispatch ``days`` times and advance every EV's SOH.

    Returns ``(mean_soh, final_states)`` where ``mean_soh[d]`` is the fleet
    mean SOH in percent after ``d`` days (``mean_soh[0]`` is the start value).
    """
    params = params or env.cfg.soh_params
    start = start or env.cfg.soh
    cycles = _ev_cycles(env, record)
    states = [start] * len(cycles)
    series = np.empty(days + 1)
    series[0] = float(np.mean([s.soh_percent for s in states])) if states else start.soh_percent
    for d in range(1, days + 1):
        for n, (_, (hc, avg, delta)) in enumerate(cycles):
            if hc:
                states[n] = soh_advance(states[n], params, hc, avg, delta)
        series[d] = float(np.mean([s.soh_percent for s in states])) if states else series[0]
    return series, [(s, cap) for s, (cap, _) in zip(states, cycles)]


# ---------------------------------------------------------------------------
# report


@dataclass
class EvaluationReport:
    source: str
    seed: int
    one_year_soh: float
    one_day_load_variance: float
    one_day_ev_cost: float
    dso_breakdown: CostBreakdown
    window_hours: list[int]
    eva_power_kw: list[list[float]]  # per agent, per slot
    day_total_load_kw: list[float]  # 24 values the variance is taken over
    tariff: list[float]
    soc_distribution: list[dict]
    discharge_slots: list[int]
    cost_signals: int
    version: int = REPORT_VERSION
    soh_series: list[float] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("soh_series")
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "EvaluationReport":
        d = dict(d)
        if d.get("version") != REPORT_VERSION:
            raise ValueError(f"unsupported report version {d.get('version')}")
        d["dso_breakdown"] = CostBreakdown(**d["dso_breakdown"])
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "EvaluationReport":
        return cls.from_dict(json.loads(text))

    def check(self, tol: float = 1e-9) -> None:
        """Raise if the stored series and the headline numbers disagree."""
        var = float(np.var(np.asarray(self.day_total_load_kw)))
        if abs(var - self.one_day_load_variance) > tol * max(1.0, var):
            raise ValueError("load variance does not match the stored series")
        b = self.dso_breakdown
        if b.dso_total != b.f2_charging + b.f3_degradation + b.fluctuation:
            raise ValueError("DSO breakdown does not add up")


SOC_QUANTILES = (0.0, 0.25, 0.5, 0.75, 1.0)


def soc_distribution(env: V2GEnv, record: DayRecord) -> list[dict]:
    """Per-boundary SOC quantiles over the EVs plugged in at that boundary."""
    K = env.cfg.horizon
    rows = []
    for t in range(K + 1):
        vals = []
        for i, ev in enumerate(env.evas):
            m = ev.m
            on = (m.arr_idx <= t) & (t <= m.dep_idx) & (m.dep_idx > m.arr_idx)
            vals.append(record.ev_energy_kwh[i][on, t] / m.q_eff[on])
        v = np.concatenate(vals) if vals else np.zeros(0)
        row = {"boundary": t, "hour": int((env.cfg.window_start + t) % 24), "count": int(v.size)}
        for q in SOC_QUANTILES:
            row[f"q{int(q * 100)}"] = float(np.quantile(v, q)) if v.size else math.nan
        row["mean"] = float(v.mean()) if v.size else math.nan
        rows.append(row)
    return rows


def build_report(env: V2GEnv, record: DayRecord, seed: int, days: int = 365,
                 params: SohParams | None = None) -> EvaluationReport:
    cfg = env.cfg
    params = params or cfg.soh_params
    series, final = simulate_year(env, record, days, params)
    _, after_one_day = simulate_year(env, record, 1, params)
    start = [(cfg.soh, cap) for _, cap in after_one_day]
    b = dso_decomposition(env.day, record.day_eva_kw, after_one_day, cfg.dt_hours,
                          fleet_soh_start=start, c_bat=cfg.c_bat, c_labor=cfg.c_labor,
                          soh_eol=cfg.soh_eol)
    total = env.day.base_load_kw - env.day.pv_kw - env.day.wind_kw + record.day_eva_kw
    p = record.eva_power_kw
    discharge = [int(k) for k in np.flatnonzero(p.sum(axis=0) < -1e-9)]
    return EvaluationReport(
        source=record.source, seed=int(seed),
        one_year_soh=float(series[-1]),
        one_day_load_variance=b.load_variance,
        one_day_ev_cost=b.f2_charging + b.f3_degradation,
        dso_breakdown=b,
        window_hours=[int(h) for h in env.hours],
        eva_power_kw=p.tolist(),
        day_total_load_kw=total.tolist(),
        tariff=env.day.tariff.tolist(),
        soc_distribution=soc_distribution(env, record),
        discharge_slots=discharge,
        cost_signals=int(sum(tr.costs.sum() for tr in record.transitions)),
        soh_series=series.tolist(),
    )


# ---------------------------------------------------------------------------
# CSV emitters


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: missing header row")
    return rows[0], rows[1:]


def trajectory_header(n_agents: int) -> list[str]:
    h = ["slot", "hour", "base_kw"]
    for i in range(n_agents):
        h += [f"raw_{i}", f"scaled_kw_{i}", f"clipped_kw_{i}", f"energy_kwh_{i}", f"cost_{i}"]
    return h + ["p_total_kw", "sigma2", "tariff", "reward"]


def write_trajectory_csv(path, env: V2GEnv, record: DayRecord):
    rows = []
    for tr in record.transitions:
        k, hour = tr.info["slot"], tr.info["hour"]
        row = [k, hour, float(env.uncontrolled[hour])]
        for i in range(env.n_agents):
            row += [float(tr.raw_actions[i]), float(tr.scaled_kw[i]), float(tr.clipped_kw[i]),
                    float(tr.info["energy"][i]), int(tr.costs[i])]
        row += [float(tr.info["p_total"]), float(tr.info["sigma2"]),
                float(env.day.tariff[hour]), float(tr.reward)]
        rows.append(row)
    _write_rows(path, trajectory_header(env.n_agents), rows)


LOAD_FIELDS = ["hour", "base_kw", "pv_kw", "wind_kw", "eva_kw", "total_kw"]


def write_load_csv(path, env: V2GEnv, record: DayRecord):
    d = env.day
    rows = [[h, float(d.base_load_kw[h]), float(d.pv_kw[h]), float(d.wind_kw[h]),
             float(record.day_eva_kw[h]),
             float(d.base_load_kw[h] - d.pv_kw[h] - d.wind_kw[h] + record.day_eva_kw[h])]
            for h in range(len(d.base_load_kw))]
    _write_rows(path, LOAD_FIELDS, rows)


SOC_FIELDS = ["boundary", "hour", "count"] + [f"q{int(q * 100)}" for q in SOC_QUANTILES] + ["mean"]


def write_soc_csv(path, rows: list[dict]):
    _write_rows(path, SOC_FIELDS, [[r[f] for f in SOC_FIELDS] for r in rows])


SOP_FIELDS = ["slot", "hour", "ev_id", "soc", "power_kw", "sop_charge_kw", "sop_discharge_kw"]


def pick_tracked_ev(env: V2GEnv) -> tuple[int, int]:
    """(EVA index, member index) of the EV plugged in longest; ties by id."""
    best = None
    for i, ev in enumerate(env.evas):
        for j in range(len(ev.m)):
            key = (-(int(ev.m.dep_idx[j]) - int(ev.m.arr_idx[j])), int(ev.m.ids[j]))
            if best is None or key < best[0]:
                best = (key, i, j)
    if best is None:
        raise ValueError("fleet is empty")
    return best[1], best[2]


def write_sop_csv(path, env: V2GEnv, record: DayRecord, ev: tuple[int, int] | None = None):
    i, j = ev if ev is not None else pick_tracked_ev(env)
    m = env.evas[i].m
    q = m.q_eff[j]
    rows = []
    for k in range(env.cfg.horizon):
        soc = record.ev_energy_kwh[i][j, k] / q
        ch, dis = sop_power_limits_array(env.cfg.pack, env.cfg.ocv, np.array([soc]),
                                         m.soc_min[j], m.soc_max[j], 1, env.cfg.dt_hours)
        on = m.arr_idx[j] <= k < m.dep_idx[j]
        rows.append([k, int(env.hours[k]), int(m.ids[j]), float(soc),
                     float(record.ev_power_kw[i][j, k]),
                     float(ch[0]) if on else 0.0, float(dis[0]) if on else 0.0])
    _write_rows(path, SOP_FIELDS, rows)


AUDIT_FIELDS = ["slot", "eva", "ev_id", "proposer_id", "proposed_kw", "allocated_kw",
                "lower_kw", "upper_kw", "residual_kw", "validated"]


def write_allocation_csv(path, env: V2GEnv, record: DayRecord):
    rows = []
    for tr in record.transitions:
        k = tr.info["slot"]
        for i, plan in enumerate(tr.info["plans"]):
            ids = record.ev_ids[i]
            prop = plan.proposed_kw if plan.proposed_kw is not None else plan.power_kw
            lims = tr.info["limits"][i]
            for j in np.flatnonzero(env.evas[i].m.plugged(k)):
                rows.append([k, i, int(ids[j]), int(plan.proposer_id), float(prop[j]),
                             float(plan.power_kw[j]), float(lims.lower_kw[j]),
                             float(lims.upper_kw[j]), float(plan.residual_kw),
                             int(plan.validated)])
    _write_rows(path, AUDIT_FIELDS, rows)


YEAR_FIELDS = ["day", "mean_soh_percent"]


def write_year_csv(path, series):
    _write_rows(path, YEAR_FIELDS, [[d, float(v)] for d, v in enumerate(series)])


def find_ev(env: V2GEnv, ev_id: int) -> tuple[int, int]:
    for i, ev in enumerate(env.evas):
        hit = np.flatnonzero(ev.m.ids == ev_id)
        if hit.size:
            return i, int(hit[0])
    raise ValueError(f"EV {ev_id} is not in the fleet")


def write_outputs(out_dir, env: V2GEnv, record: DayRecord, report: EvaluationReport,
                  prefix: str = "", tracked_ev: int | None = None):
    """Report JSON plus every per-slot CSV, all named ``<prefix><kind>``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{prefix}report.json").write_text(report.to_json() + "\n")
    write_trajectory_csv(out / f"{prefix}trajectory.csv", env, record)
    write_load_csv(out / f"{prefix}load.csv", env, record)
    write_soc_csv(out / f"{prefix}soc.csv", report.soc_distribution)
    write_sop_csv(out / f"{prefix}sop.csv", env, record,
                  None if tracked_ev is None else find_ev(env, tracked_ev))
    write_allocation_csv(out / f"{prefix}allocation.csv", env, record)
    write_year_csv(out / f"{prefix}soh_year.csv", report.soh_series)
    return out
