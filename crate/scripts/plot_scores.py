"""Plot unknown-score histograms written by `owseg plot-data`.

Usage: python scripts/plot_scores.py <experiment>/plots/<stage> [-o out.png]
"""

import argparse
import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def read_histogram(path):
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    left = [float(r["bin_left"]) for r in rows]
    width = [float(r["bin_right"]) - float(r["bin_left"]) for r in rows]
    known = [int(r["count_known"]) for r in rows]
    unknown = [int(r["count_unknown"]) for r in rows]
    return left, width, known, unknown


def normalise(counts):
    total = sum(counts)
    return [c / total if total else 0.0 for c in counts]


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("plot_dir", type=Path)
    parser.add_argument("-o", "--output", type=Path)
    args = parser.parse_args()

    summary = json.loads((args.plot_dir / "summary.json").read_text())
    methods = summary["methods"]
    fig, axes = plt.subplots(1, len(methods), figsize=(4 * len(methods), 3.2), squeeze=False)
    for ax, (name, info) in zip(axes[0], sorted(methods.items())):
        left, width, known, unknown = read_histogram(args.plot_dir / Path(info["histogram"]).name)
        ax.bar(left, normalise(known), width, align="edge", alpha=0.6, label="known")
        ax.bar(left, normalise(unknown), width, align="edge", alpha=0.6, label="unknown")
        ax.set_title(f"{name}  AUROC {info['auroc']:.3f}")
        ax.set_xlabel("unknown score")
    axes[0][0].set_ylabel("fraction of points")
    axes[0][0].legend()
    fig.tight_layout()
    out = args.output or args.plot_dir / "scores.png"
    fig.savefig(out, dpi=150)
    print(out)


if __name__ == "__main__":
    main()
