"""Sample a trained policy and attribute every cost signal to the slot and
the constraint that produced it.

    python3 scripts/cost_attribution.py --run runs/smoke --episodes 40
"""

import argparse
from collections import Counter
from dataclasses import replace
from pathlib import Path

import numpy as np

from v2gcoord.config import RunConfig
from v2gcoord.env import V2GEnv
from v2gcoord.macpo import Trainer


def run(run_dir: Path, episodes: int) -> int:
    cfg = RunConfig.load(run_dir / "config.json")
    env = V2GEnv(cfg.env_config())
    trainer = Trainer.load(run_dir / "checkpoints" / "checkpoint.json", cfg.train_config(),
                           lambda: env)
    no_sop = replace(env.cfg, use_sop=False)
    rng = np.random.default_rng(12345)
    by_slot, causes = Counter(), Counter()
    for ep in range(episodes):
        obs = env.reset(10_000 + ep)
        while not env.terminal:
            k = env.k
            # the SOC corridor alone, without state-of-power limits
            plain = [ev.limits(k, no_sop) for ev in env.evas]
            act = np.array([pol.sample(obs[i:i + 1], rng)[0][0]
                            for i, pol in enumerate(trainer.policies)])
            tr = env.step(act)
            obs = tr.next_states
            for i in np.flatnonzero(tr.costs):
                by_slot[k] += 1
                s = tr.scaled_kw[i]
                if tr.info["grid_violation"] and not tr.info["own_violation"][i]:
                    causes["feeder"] += 1
                elif plain[i].lower_kw.sum() - 1e-9 <= s <= plain[i].upper_kw.sum() + 1e-9:
                    causes["state of power only"] += 1
                else:
                    causes["SOC corridor or envelope"] += 1
    total = sum(by_slot.values())
    print(f"{total} cost signals over {episodes} episodes x {env.n_agents} agents")
    for k in sorted(by_slot):
        print(f"  slot {k:2d} (hour {env.hours[k]:2d}): {by_slot[k]}")
    for cause, n in causes.most_common():
        print(f"  {cause}: {n}")
    return 0


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--run", type=Path, default=Path("runs/smoke"))
    ap.add_argument("--episodes", type=int, default=40)
    args = ap.parse_args()
    raise SystemExit(run(args.run, args.episodes))
