"""Plot metric CSVs written by ``nhode evaluate``.

    python3 scripts/plot_metrics.py runs/dms/eval runs/dms_node/eval -o curves.png

Each directory becomes one line per panel (median over test trajectories,
log scale). Needs matplotlib (``pip install -e .[plot]``).
"""

import argparse
import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

PANELS = ("observed_mse", "hidden_mse", "energy_error")


def read_curve(path: Path):
    with path.open() as fh:
        rows = list(csv.DictReader(fh))
    return [float(r["time"]) for r in rows], [float(r["median"]) for r in rows]


def label_for(run: Path) -> str:
    summary = run / "summary.csv"
    if summary.exists():
        with summary.open() as fh:
            first = next(csv.DictReader(fh), None)
        if first:
            return first["method"]
    return run.parent.name


def main(argv=None):
    p = argparse.ArgumentParser(description="median error curves from evaluate outputs")
    p.add_argument("runs", nargs="+", type=Path, help="eval directories")
    p.add_argument("-o", "--output", type=Path, default=Path("curves.png"))
    args = p.parse_args(argv)
    fig, axes = plt.subplots(1, len(PANELS), figsize=(4 * len(PANELS), 3.2), sharex=True)
    for run in args.runs:
        label = label_for(run)
        for ax, name in zip(axes, PANELS):
            t, y = read_curve(run / f"{name}.csv")
            ax.plot(t, y, label=label)
    for ax, name in zip(axes, PANELS):
        ax.set_yscale("log")
        ax.set_title(name.replace("_", " "))
        ax.set_xlabel("t")
    axes[0].legend()
    fig.tight_layout()
    fig.savefig(args.output, dpi=150)
    print(f"wrote {args.output}")


if __name__ == "__main__":
    main()
