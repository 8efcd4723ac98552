"""Train the small policy (2 agents, 20 EVs, 300 iterations), evaluate it and
summarise the trust-region numbers from the training log.

    python3 scripts/smoke_train.py --out runs/smoke
"""

import argparse
import json
from pathlib import Path

import numpy as np

from v2gcoord.cli import main
from v2gcoord.config import smoke_overrides
from v2gcoord.macpo import read_training_log


def run(out: Path, config: Path | None) -> int:
    out.mkdir(parents=True, exist_ok=True)
    if config is None:
        config = out / "smoke.json"
        config.write_text(json.dumps(smoke_overrides()))
    code = main(["train", "--config", str(config), "--out", str(out), "--quiet"])
    if code:
        return code
    code = main(["evaluate", "--config", str(config), "--out", str(out / "eval"),
                 "--checkpoint", str(out / "checkpoints" / "checkpoint.json")])
    if code:
        return code
    log = read_training_log(out / "training_log.csv")
    kl = log.column("kl")[log.column("accepted") > 0]
    ret = log.column("mean_return")
    jc = log.column("jc_max")[-30:]
    print(f"max KL of accepted updates   {kl.max():.6f}")
    print(f"mean return first/last 30    {ret[:30].mean():.5f} / {ret[-30:].mean():.5f} "
          f"({ret[-30:].mean() / ret[:30].mean() - 1:+.1%})")
    print(f"cost estimate last 30        mean {np.mean(jc):.3f}  max {np.max(jc):.3f}")
    return 0


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("runs/smoke"))
    ap.add_argument("--config", type=Path, default=None)
    args = ap.parse_args()
    raise SystemExit(run(args.out, args.config))
