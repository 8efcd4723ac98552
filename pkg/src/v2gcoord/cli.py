"""Command line: gen-fleet, train, evaluate, simulate-year, baseline.

Exit codes: 0 success, 2 configuration error, 3 numerical failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .baselines import BaselineKind
from .config import ConfigError, RunConfig
from .env import V2GEnv
from .evaluation import (build_report, run_baseline_day, run_idle_day,
                         run_policy_day, simulate_year, write_outputs, write_year_csv)
from .fleet import sample_fleet, write_fleet_csv
from .macpo import Trainer, greedy_policy

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
CHECKPOINT = "checkpoint.json"
COMPARE_FIELDS = ["source", "one_year_soh", "load_variance", "ev_cost", "charging",
                  "degradation", "fluctuation", "dso_total", "cost_signals"]


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = cfg.with_overrides(master_seed=args.seed)
    return cfg


def _out_dir(args, cfg: RunConfig) -> Path:
    out = Path(args.out if args.out else cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.dumps())
    return out


def _env_factory(cfg: RunConfig):
    env_cfg = cfg.env_config()
    return lambda: V2GEnv(env_cfg)


# ----------------------------------------------------------------- commands


def cmd_gen_fleet(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    fleet = sample_fleet(cfg["fleet.count"], cfg.fleet_seed(), cfg.fleet_params())
    write_fleet_csv(out / "fleet.csv", fleet)
    print(f"wrote {len(fleet)} EVs to {out / 'fleet.csv'}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    if args.episodes is not None:
        cfg = cfg.with_overrides(**{"train.episodes": args.episodes})
    out = _out_dir(args, cfg)
    ckpt_dir = out / "checkpoints"
    tcfg = cfg.train_config()
    factory = _env_factory(cfg)
    path = ckpt_dir / CHECKPOINT
    if args.resume and path.exists():
        trainer = Trainer.load(path, tcfg, factory)
        print(f"resuming at iteration {trainer.episode}")
    else:
        trainer = Trainer(tcfg, factory)
        trainer.save(path)

    def progress(row):
        if not args.quiet and (row.episode % 10 == 0 or row.episode + 1 == tcfg.episodes):
            print(f"iter {row.episode:5d}  return {row.mean_return:.5f}  "
                  f"Jc_max {row.jc_max:.3f}  kl {row.kl:.5f}", flush=True)

    trainer.run(checkpoint_dir=ckpt_dir, progress=progress)
    trainer.save(path)
    trainer.log.to_csv(out / "training_log.csv")
    print(f"trained {trainer.episode} iterations; log at {out / 'training_log.csv'}")
    return EXIT_OK


def _day_record(args, cfg: RunConfig):
    env = _env_factory(cfg)()
    seed = cfg["master_seed"]
    if args.checkpoint:
        trainer = Trainer.load(args.checkpoint, cfg.train_config(), lambda: env)
        return env, run_policy_day(env, greedy_policy(trainer.policies), seed, "macpo")
    if args.baseline:
        return env, run_baseline_day(env, BaselineKind.parse(args.baseline), seed)
    return env, run_idle_day(env, seed)


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    env, record = _day_record(args, cfg)
    report = build_report(env, record, cfg["master_seed"], cfg["eval.days"])
    report.check()
    write_outputs(out, env, record, report, tracked_ev=cfg["eval.tracked_ev"])
    print(f"{record.source}: variance {report.one_day_load_variance:.3f} kW^2, "
          f"EV cost {report.one_day_ev_cost:.3f}, one-year SOH {report.one_year_soh:.3f} %")
    return EXIT_OK


def cmd_simulate_year(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    env, record = _day_record(args, cfg)
    series, _ = simulate_year(env, record, cfg["eval.days"])
    write_year_csv(out / "soh_year.csv", series)
    print(f"{record.source}: SOH {series[0]:.3f} % -> {series[-1]:.3f} % "
          f"after {len(series) - 1} days")
    return EXIT_OK


def cmd_baseline(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    kinds = list(BaselineKind) if args.kind == "all" else [BaselineKind.parse(args.kind)]
    rows = []
    for kind in kinds:
        env = _env_factory(cfg)()
        record = run_baseline_day(env, kind, cfg["master_seed"])
        report = build_report(env, record, cfg["master_seed"], cfg["eval.days"])
        report.check()
        write_outputs(out / kind.value, env, record, report, tracked_ev=cfg["eval.tracked_ev"])
        b = report.dso_breakdown
        rows.append([kind.value, report.one_year_soh, report.one_day_load_variance,
                     report.one_day_ev_cost, b.f2_charging, b.f3_degradation, b.fluctuation,
                     b.dso_total, report.cost_signals])
        print(f"{kind.value:18s} variance {report.one_day_load_variance:10.3f}  "
              f"EV cost {report.one_day_ev_cost:9.3f}  SOH {report.one_year_soh:.3f}")
    with open(out / "comparison.csv", "w") as fh:
        fh.write(",".join(COMPARE_FIELDS) + "\n")
        for r in rows:
            fh.write(",".join(repr(float(v)) if isinstance(v, float) else str(v) for v in r)
                     + "\n")
    return EXIT_OK


# --------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="v2gcoord", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config with namespaced keys")
        p.add_argument("--seed", type=int, help="override master_seed")
        p.add_argument("--out", help="output directory (default: output_dir from config)")
        return p

    def source(p):
        g = p.add_mutually_exclusive_group()
        g.add_argument("--checkpoint", help="trained checkpoint to run greedily")
        g.add_argument("--baseline", help="bl1..bl4 or a baseline name")
        g.add_argument("--idle", action="store_true",
                       help="zero power request (default when no source is given)")

    common(sub.add_parser("gen-fleet", help="sample the fleet and write fleet.csv"))
    p = common(sub.add_parser("train", help="train the multi-agent policy"))
    p.add_argument("--resume", action="store_true", help="continue from the last checkpoint")
    p.add_argument("--episodes", type=int, help="override train.episodes")
    p.add_argument("--quiet", action="store_true")
    source(common(sub.add_parser("evaluate", help="run one day and write the report")))
    source(common(sub.add_parser("simulate-year", help="replay one day's dispatch for a year")))
    p = common(sub.add_parser("baseline", help="run reference strategies"))
    p.add_argument("--kind", default="all", help="bl1..bl4 or all (default)")
    return parser


COMMANDS = {"gen-fleet": cmd_gen_fleet, "train": cmd_train, "evaluate": cmd_evaluate,
            "simulate-year": cmd_simulate_year, "baseline": cmd_baseline}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FloatingPointError, ArithmeticError, RuntimeError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except json.JSONDecodeError as exc:
        print(f"unreadable file: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError) as exc:
        # checkpoint/config mismatches and bad baseline names
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
