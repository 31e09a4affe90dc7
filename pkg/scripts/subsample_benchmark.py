"""Denoised vs raw DTI error on a subsampled phantom, averaged over noise seeds.

Each seed runs the full benchmark (noise, 6- and 12-direction subsets, RAW and
MPPCA, DTI fit) and the per-region MAE rows are averaged.

    python3 scripts/subsample_benchmark.py --seeds 5 --snr 20 --out benchmark.csv
"""
import argparse
import warnings
import csv
import tempfile
from collections import defaultdict
from pathlib import Path

import numpy as np

from dmribench.pipeline import PipelineConfig, run_pipeline


def run_seed(seed, args, workdir):
    cfg = PipelineConfig.from_dict({
        "output": f"seed{seed}",
        "seed": seed,
        "inputs": {"phantom": {"preset": "two-region", "n": args.size, "scheme": {
            "multishell": {"shells": [1000], "n_dirs": args.dirs, "n_b0": 6}}}},
        "noise": {"model": "rician", "snr": args.snr},
        "denoisers": ["none", "mppca"],
        "subsets": args.subsets,
        "metrics": ["FA", "MD", "AD", "RD", "V1"],
        "threads": args.threads,
    }, workdir)
    with open(run_pipeline(cfg) / "report.csv", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=5, help="number of noise seeds")
    ap.add_argument("--snr", type=float, default=20.0, help="b0 SNR inside the phantom")
    ap.add_argument("--size", type=int, default=16, help="phantom grid size (voxels per side)")
    ap.add_argument("--dirs", type=int, default=90, help="directions on the b=1000 shell")
    ap.add_argument("--subsets", type=int, nargs="+", default=[6, 12], help="subset sizes")
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--out", help="write the averaged table as CSV")
    args = ap.parse_args()
    # subsets are denoised on their own, well below the recommended 10 volumes
    warnings.filterwarnings("ignore", message="MPPCA on")

    values = defaultdict(list)
    with tempfile.TemporaryDirectory() as tmp:
        for seed in range(args.seeds):
            for row in run_seed(seed, args, Path(tmp)):
                key = (row["subset"], row["region"], row["metric"], row["method"])
                values[key].append(float(row["value"]))

    # region 1 is WM, region 2 is GM
    names = {"all": "all", "1": "WM", "2": "GM"}
    table = []
    print(f"{'subset':8s} {'region':6s} {'metric':6s} {'RAW':>10s} {'MPPCA':>10s}")
    for subset, region, metric in sorted({k[:3] for k in values}):
        raw = np.mean(values[subset, region, metric, "RAW"])
        den = np.mean(values[subset, region, metric, "MPPCA"])
        table.append((subset, names.get(region, region), metric, raw, den))
        print(f"{subset:8s} {names.get(region, region):6s} {metric:6s} {raw:10.4f} {den:10.4f}")

    if args.out:
        with open(args.out, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["subset", "region", "metric", "raw", "mppca"])
            w.writerows(table)


if __name__ == "__main__":
    main()
