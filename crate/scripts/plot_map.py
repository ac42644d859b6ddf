"""Plot fitted parameters against label from `nrcomp export-csv` output.

    python scripts/plot_map.py map.csv [out.png]
"""

import csv
import sys
from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

COLUMNS = [
    ("ct_db", "threshold (dB)", False),
    ("ratio", "ratio", False),
    ("attack_ms", "attack (ms)", True),
    ("release_ms", "release (ms)", True),
    ("makeup_db", "make-up (dB)", False),
    ("fit_esr", "ESR", True),
]


def main(path, out):
    by_mode = defaultdict(list)
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            by_mode[row["mode"]].append(row)

    fig, axes = plt.subplots(2, 3, figsize=(11, 6), sharex=True)
    for mode, rows in sorted(by_mode.items()):
        rows.sort(key=lambda r: float(r["label"]))
        labels = [float(r["label"]) for r in rows]
        for ax, (key, title, log) in zip(axes.flat, COLUMNS):
            ax.plot(labels, [float(r[key]) for r in rows], "o-", label=mode)
            ax.set_title(title)
            if log:
                ax.set_yscale("log")
    for ax in axes[1]:
        ax.set_xlabel("label")
    axes.flat[0].legend()
    fig.tight_layout()
    fig.savefig(out, dpi=120)


if __name__ == "__main__":
    if len(sys.argv) not in (2, 3):
        sys.exit(__doc__)
    main(sys.argv[1], sys.argv[2] if len(sys.argv) == 3 else "map.png")
