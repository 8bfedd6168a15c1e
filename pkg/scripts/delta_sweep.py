"""Sweep the maximum noise-encoding timestep and plot metrics against it.

    python scripts/delta_sweep.py --out runs/sweep --deltas 1 5 10 20 50

Each value gets its own run directory; the report of the last run carries
``delta_sweep.png`` and ``delta_sweep.json`` over all of them.
"""
import argparse
from pathlib import Path

from wdtmd.config import build_config
from wdtmd.pipeline import run_experiment
from wdtmd.report import report


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="runs/sweep")
    ap.add_argument("--deltas", type=int, nargs="+", default=[1, 5, 10, 20, 50])
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    out = Path(args.out)
    dirs = []
    for d in args.deltas:
        name = f"delta{d:03d}"
        cfg = build_config("desk", overrides={"data.root": str(out / "corpus"), "run_name": name,
                                               "train.seed": args.seed, "condition.delta_max": d})
        m = run_experiment(cfg, out / name)
        dirs.append(out / name)
        print(f"delta_max {d}: pixel AUC {m['pixel']['auc']:.4f}, image AUC {m['image']['auc']:.3f}", flush=True)
    for path in report(dirs[-1], dirs[:-1]):
        print(path)


if __name__ == "__main__":
    main()
