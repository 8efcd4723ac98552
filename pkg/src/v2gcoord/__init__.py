"""Coordinated vehicle-to-grid scheduling with constrained multi-agent learning."""

from .baselines import BaselineKind, PlanProblem, plan_baseline, run_baseline
from .battery import (CellPack, HalfCycle, OcvCurve, SohParams, SohState, count_half_cycles,
                      soh_advance, soh_evaluate, sop_power_limits)
from .config import ConfigError, RunConfig
from .env import EnvConfig, RewardConfig, V2GEnv, episode_rollout
from .evaluation import (EvaluationReport, build_report, run_baseline_day, run_idle_day,
                         run_policy_day, simulate_year)
from .fleet import (EvSpec, FleetEnvelope, FleetParams, build_envelope, envelope_admits,
                    sample_fleet)
from .macpo import TrainConfig, Trainer, greedy_policy, train
from .microgrid import GridDay, dso_decomposition, synthetic_day
from .pos import EvLimits, Stake, allocate

__version__ = "0.1.0"

__all__ = [
    "BaselineKind", "PlanProblem", "plan_baseline", "run_baseline",
    "CellPack", "HalfCycle", "OcvCurve", "SohParams", "SohState", "count_half_cycles",
    "soh_advance", "soh_evaluate", "sop_power_limits",
    "ConfigError", "RunConfig",
    "EnvConfig", "RewardConfig", "V2GEnv", "episode_rollout",
    "EvaluationReport", "build_report", "run_baseline_day", "run_idle_day", "run_policy_day",
    "simulate_year",
    "EvSpec", "FleetEnvelope", "FleetParams", "build_envelope", "envelope_admits",
    "sample_fleet",
    "TrainConfig", "Trainer", "greedy_policy", "train",
    "GridDay", "dso_decomposition", "synthetic_day",
    "EvLimits", "Stake", "allocate",
]
