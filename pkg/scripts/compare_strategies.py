"""Compare the trained policy with the four reference strategies on the
default synthetic day and check the expected ordering.

    python3 scripts/compare_strategies.py --run runs/smoke
"""

import argparse
import json
from pathlib import Path

from v2gcoord.cli import main
from v2gcoord.config import smoke_overrides
from v2gcoord.evaluation import EvaluationReport


def load(path: Path) -> EvaluationReport:
    return EvaluationReport.from_json(path.read_text())


def run(run_dir: Path) -> int:
    config = run_dir / "config.json"
    if not (run_dir / "eval" / "report.json").exists():
        run_dir.mkdir(parents=True, exist_ok=True)
        config.write_text(json.dumps(smoke_overrides()))
        for argv in (["train", "--config", str(config), "--out", str(run_dir), "--quiet"],
                     ["evaluate", "--config", str(config), "--out", str(run_dir / "eval"),
                      "--checkpoint", str(run_dir / "checkpoints" / "checkpoint.json")]):
            if code := main(argv):
                return code
    if code := main(["baseline", "--config", str(config), "--out", str(run_dir / "baselines")]):
        return code

    reports = {"macpo": load(run_dir / "eval" / "report.json")}
    for p in sorted((run_dir / "baselines").glob("*/report.json")):
        reports[p.parent.name] = load(p)
    print(f"\n{'source':18s} {'variance':>10s} {'f2':>9s} {'DSO':>9s} {'SOH 1y':>8s}")
    for name, r in reports.items():
        b = r.dso_breakdown
        print(f"{name:18s} {r.one_day_load_variance:10.2f} {b.f2_charging:9.2f} "
              f"{b.dso_total:9.2f} {r.one_year_soh:8.3f}")

    var = {k: r.one_day_load_variance for k, r in reports.items()}
    f2 = {k: r.dso_breakdown.f2_charging for k, r in reports.items()}
    checks = {
        "variance: policy < optimal charging < uncontrolled":
            var["macpo"] < var["optimal_charging"] < var["uncontrolled"],
        "variance ratio uncontrolled / policy >= 2": var["uncontrolled"] / var["macpo"] >= 2,
        "min-cost V2G has the lowest charging cost": min(f2, key=f2.get) == "min_cost_v2g",
        "SOH uncontrolled >= SOH min-variance V2G":
            reports["uncontrolled"].one_year_soh >= reports["min_variance_v2g"].one_year_soh,
    }
    print()
    for text, ok in checks.items():
        print(f"{'PASS' if ok else 'FAIL'}  {text}")
    return 0 if all(checks.values()) else 1


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--run", type=Path, default=Path("runs/smoke"))
    raise SystemExit(run(ap.parse_args().run))
