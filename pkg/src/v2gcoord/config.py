"""Run configuration: one flat JSON object with namespaced keys.

Every tunable lives under a section prefix (``fleet.``, ``grid.``, ``env.``,
``reward.``, ``battery.``, ``soh.``, ``pos.``, ``train.``, ``eval.``) plus the
top-level ``master_seed`` and ``output_dir``. Defaults come straight from the
dataclasses they feed, unknown keys are rejected, and ``dumps``/``loads``
round-trip losslessly.
"""

from __future__ import annotations

import json
from dataclasses import MISSING, dataclass, field, fields, replace
from pathlib import Path

from .battery import CellPack, OcvCurve, SohParams, SohState
from .env import EnvConfig, RewardConfig
from .fleet import FleetParams
from .macpo import TrainConfig
from .microgrid import GridRating, ProfileParams


class ConfigError(ValueError):
    pass


def _prefixed(prefix: str, cls, skip=(), rename=None):
    rename = rename or {}
    out = {}
    for f in fields(cls):
        if f.name in skip:
            continue
        default = f.default if f.default is not MISSING else f.default_factory()
        out[prefix + rename.get(f.name, f.name)] = (cls, f.name, default)
    return out


# key -> (owning dataclass, field name, default)
_SCHEMA: dict = {}
_SCHEMA.update(_prefixed("fleet.", FleetParams))
_SCHEMA.update(_prefixed("grid.", ProfileParams, rename={"seed": "profile_seed"}))
_SCHEMA.update(_prefixed("grid.", GridRating))
_SCHEMA.update(_prefixed("reward.", RewardConfig))
_SCHEMA.update(_prefixed("battery.", CellPack))
_SCHEMA["battery.ocv_breakpoints"] = (OcvCurve, "breakpoints",
                                      [list(p) for p in OcvCurve().breakpoints])
_SCHEMA.update(_prefixed("soh.", SohParams))
_SCHEMA.update(_prefixed("soh.", SohState, skip=("half_cycle_history", "soh_percent",
                                                 "dod_guard_hits"),
                         rename={"soc_avg": "initial_soc_avg",
                                 "delta_soc": "initial_delta_soc",
                                 "equivalent_full_cycles": "initial_cycles",
                                 "aging_factor": "initial_aging_factor"}))
_SCHEMA.update(_prefixed("train.", TrainConfig, skip=("seed",)))
_SCHEMA["train.hidden"] = (TrainConfig, "hidden", list(TrainConfig().hidden))

_ENV_KEYS = {
    "env.n_agents": "n_agents", "env.horizon": "horizon", "env.window_start": "window_start",
    "env.dt_hours": "dt_hours", "env.cost_limit": "cost_limit", "env.use_sop": "use_sop",
    "env.partition_seed": "partition_seed", "grid.scale_to_fleet": "scale_grid",
    "grid.profile_csv": "profile_csv", "pos.lock_fraction": "lock_fraction",
    "battery.c_bat": "c_bat", "battery.c_labor": "c_labor", "battery.soh_eol": "soh_eol",
}
for key, name in _ENV_KEYS.items():
    default = next(f.default for f in fields(EnvConfig) if f.name == name)
    _SCHEMA[key] = (EnvConfig, name, default)

_EXTRA = {
    "fleet.seed": None,  # null: use master_seed
    "fleet.resample": False,  # draw a fresh fleet on every episode instead
    "eval.days": 365,
    "eval.tracked_ev": None,  # EV id for the SOP trace; null picks the longest stay
    "master_seed": 0,
    "output_dir": "runs",
}

DEFAULTS: dict = {k: v[2] for k, v in _SCHEMA.items()}
DEFAULTS.update(_EXTRA)
DEFAULTS = dict(sorted(DEFAULTS.items()))

# keys that accept null, with the type of their non-null values
_NULLABLE = {"grid.profile_csv": str, "fleet.seed": int, "eval.tracked_ev": int,
             "reward.fluctuation_coeff": float, "reward.mean_net_load_coeff": float}


def _check_type(key: str, value, default):
    if value is None:
        if key in _NULLABLE:
            return None
        raise ConfigError(f"{key}: null is not allowed")
    kind = _NULLABLE[key] if default is None else type(default)
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if kind is str:
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    if kind in (list, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return json.loads(json.dumps(value))
    raise ConfigError(f"{key}: unsupported value {value!r}")


@dataclass
class RunConfig:
    values: dict = field(default_factory=lambda: dict(DEFAULTS))

    # ------------------------------------------------------------- parsing
    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        unknown = sorted(set(data) - set(DEFAULTS))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        values = dict(DEFAULTS)
        for key, value in data.items():
            values[key] = _check_type(key, value, DEFAULTS[key])
        cfg = cls(values)
        cfg.validate()
        return cfg

    @classmethod
    def loads(cls, text: str) -> "RunConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        return cls.from_dict(data)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.loads(Path(path).read_text())

    def dumps(self) -> str:
        return json.dumps(dict(sorted(self.values.items())), indent=2) + "\n"

    def with_overrides(self, **kv) -> "RunConfig":
        data = dict(self.values)
        data.update(kv)
        return RunConfig.from_dict(data)

    def __getitem__(self, key):
        return self.values[key]

    def validate(self) -> None:
        """Build every component once so invalid combinations fail early."""
        try:
            self.env_config()
            self.train_config()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        if self["eval.days"] < 0:
            raise ConfigError("eval.days must be >= 0")
        try:
            self.fleet_params().validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    # ------------------------------------------------------------ builders
    def _section(self, cls, **extra):
        kw = {}
        for key, (owner, name, _) in _SCHEMA.items():
            if owner is cls:
                kw[name] = self.values[key]
        kw.update(extra)
        return cls(**kw)

    def fleet_seed(self) -> int:
        seed = self["fleet.seed"]
        return self["master_seed"] if seed is None else seed

    def fleet_params(self) -> FleetParams:
        return self._section(FleetParams)

    def profile_params(self) -> ProfileParams:
        return self._section(ProfileParams)

    def soh_state(self) -> SohState:
        return self._section(SohState)

    def env_config(self) -> EnvConfig:
        ocv = OcvCurve(tuple(tuple(p) for p in self["battery.ocv_breakpoints"]))
        env_kw = {name: self.values[key] for key, name in _ENV_KEYS.items()}
        fleet = self.fleet_params()
        return EnvConfig(
            n_evs=fleet.count, fleet=fleet,
            fleet_seed=None if self["fleet.resample"] else self.fleet_seed(),
            profile=self.profile_params(), rating=self._section(GridRating),
            reward=self._section(RewardConfig), pack=self._section(CellPack), ocv=ocv,
            soh=self.soh_state(), soh_params=self._section(SohParams), **env_kw)

    def train_config(self) -> TrainConfig:
        cfg = self._section(TrainConfig, seed=self["master_seed"])
        return replace(cfg, hidden=tuple(self["train.hidden"]))


def smoke_overrides() -> dict:
    """Small run: 2 agents, 20 EVs, 300 training iterations."""
    return {"fleet.count": 20, "env.n_agents": 2, "train.episodes": 300}
