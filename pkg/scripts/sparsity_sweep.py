"""Accuracy and achieved sparsity against the sparsity target on the planted task.

Trains one run per (target, seed) through the command line entry point and
collects the final metrics row of each run into sweep.csv.

    python3 scripts/sparsity_sweep.py --out runs/sweep --targets 0,0.1,0.2,0.3,0.4 --seeds 0,1,2
"""

import argparse
import csv
import os

import numpy as np

from finegates.cli import main

HERE = os.path.dirname(os.path.abspath(__file__))


def last_row(metrics_path):
    with open(metrics_path, newline="") as fh:
        return list(csv.DictReader(fh))[-1]


def run(config, out, targets, seeds, extra=()):
    rows = []
    for target in targets:
        for seed in seeds:
            run_dir = os.path.join(out, f"s{target:g}_seed{seed}")
            args = ["train", "--config", config, "--out", run_dir, "--quiet", "--seed", str(seed),
                    "--set", f"train.target_sparsity={target}", "--set", f"data.seed={seed}",
                    "--set", f"model.init_seed={seed}"]
            for item in extra:
                args += ["--set", item]
            code = main(args)
            if code != 0:
                raise SystemExit(f"run {run_dir} failed with exit code {code}")
            row = last_row(os.path.join(run_dir, "metrics.csv"))
            rows.append({"target": target, "seed": seed, "accuracy": float(row["accuracy"]),
                         "achieved_sparsity": float(row["achieved_sparsity"])})
            print(f"target {target:g} seed {seed}: accuracy {rows[-1]['accuracy']:.4f} "
                  f"sparsity {rows[-1]['achieved_sparsity']:.4f}", flush=True)
    return rows


def summarize(rows, targets):
    print("target  median_accuracy  median_sparsity")
    for t in targets:
        sel = [r for r in rows if r["target"] == t]
        print(f"{t:6g}  {np.median([r['accuracy'] for r in sel]):15.4f}  "
              f"{np.median([r['achieved_sparsity'] for r in sel]):15.4f}")


def parse_args():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", default=os.path.join(HERE, "planted.ini"))
    p.add_argument("--out", default="runs/sweep")
    p.add_argument("--targets", default="0,0.1,0.2,0.3,0.4")
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    return p.parse_args()


if __name__ == "__main__":
    a = parse_args()
    targets = [float(t) for t in a.targets.split(",")]
    seeds = [int(s) for s in a.seeds.split(",")]
    rows = run(a.config, a.out, targets, seeds, a.set)
    os.makedirs(a.out, exist_ok=True)
    with open(os.path.join(a.out, "sweep.csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, ["target", "seed", "accuracy", "achieved_sparsity"], lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    summarize(rows, targets)
