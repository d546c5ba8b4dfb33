"""Paired naive vs staggered runs on the slow-progression demo config.

Prints per-seed peak value MSE, mean forgetting and final success, plus the
naive/staggered ratios.

    python3 scripts/slow_gate_pair.py --seeds 5 --out runs/demo
"""

import argparse
from pathlib import Path

from stagger_lab.labrunner import EnvSettings, RunConfig, ScheduleSettings, run_experiment, set_threads

DEMO_ENV = EnvSettings(horizon=200, block_length=5, progression_prob=0.1, mastery_threshold=3, reset_lambda=0.0)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--first-seed", type=int, default=0)
    ap.add_argument("--out", type=Path, default=None)
    args = ap.parse_args()
    set_threads(1)

    print("seed  mode       peak_mse  forgetting  final_success")
    mse_ratio, forg = [], {"naive": [], "staggered": []}
    for seed in range(args.first_seed, args.first_seed + args.seeds):
        res = {}
        for mode in ("naive", "staggered"):
            cfg = RunConfig(env=DEMO_ENV, schedule=ScheduleSettings(mode=mode), seed=seed)
            out = args.out / f"{mode}_s{seed}" if args.out else None
            r = res[mode] = run_experiment(cfg, out)
            print(f"{seed:4d}  {mode:9s} {r.peak_value_mse:9.3f}  {r.mean_forgetting:10.4f}  {r.final_success:13.3f}", flush=True)
            forg[mode].append(r.mean_forgetting)
        mse_ratio.append(res["naive"].peak_value_mse / res["staggered"].peak_value_mse)

    mean_n = sum(forg["naive"]) / len(forg["naive"])
    mean_s = sum(forg["staggered"]) / len(forg["staggered"])
    print("peak MSE ratio per seed:", " ".join(f"{x:.1f}" for x in mse_ratio))
    print(f"mean forgetting naive {mean_n:.4f}  staggered {mean_s:.4f}  ratio {mean_n / mean_s:.2f}")


if __name__ == "__main__":
    main()
