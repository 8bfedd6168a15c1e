"""Train and evaluate the desk configuration for several seeds, then render reports.

    python scripts/desk_experiment.py --out runs/desk --seeds 0 1 2

Extra ``section.key=value`` arguments are applied to every run.
"""
import argparse
import json
import time
from pathlib import Path

from wdtmd.config import build_config, parse_value
from wdtmd.pipeline import run_experiment
from wdtmd.report import report


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--preset", default="desk")
    ap.add_argument("overrides", nargs="*", metavar="KEY=VALUE")
    args = ap.parse_args()

    out = Path(args.out)
    extra = {k: parse_value(v) for k, v in (o.split("=", 1) for o in args.overrides)}
    rows = []
    for seed in args.seeds:
        name = f"seed{seed}"
        cfg = build_config(args.preset, overrides={"data.root": str(out / "corpus"), "run_name": name,
                                                   "train.seed": seed, **extra})
        t0 = time.time()
        m = run_experiment(cfg, out / name)
        report(out / name, sweep_dirs=[])
        rows.append({"seed": seed, "minutes": round((time.time() - t0) / 60, 2),
                     **{f"{lvl}_{k}": m[lvl][k] for lvl in ("pixel", "image") for k in ("auc", "sen", "spe", "f1")}})
        print(json.dumps(rows[-1]), flush=True)
    (out / "summary.json").write_text(json.dumps(rows, indent=2) + "\n")


if __name__ == "__main__":
    main()
