"""CSV to SVG line plots."""
from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np


def read_numeric_csv(path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]

    def num(v):
        try:
            return float(v)
        except ValueError:
            return math.nan

    return header, np.array([[num(v) for v in r] for r in body], dtype=np.float64).reshape(len(body), len(header))


def plot_csv(path, out, x: str | None = None, columns: list[str] | None = None, smooth: int = 1) -> Path:
    """Plot numeric columns against ``x`` (default: first column) and save as SVG."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    header, data = read_numeric_csv(path)
    xi = header.index(x) if x else 0
    cols = columns or [h for i, h in enumerate(header) if i != xi and np.isfinite(data[:, i]).any()]
    fig, ax = plt.subplots(figsize=(7, 4))
    for c in cols:
        y = data[:, header.index(c)]
        if smooth > 1 and len(y) >= smooth:
            y = np.convolve(y, np.ones(smooth) / smooth, mode="same")
        ax.plot(data[:, xi], y, label=c, linewidth=1)
    ax.set_xlabel(header[xi])
    ax.legend(fontsize=7)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    out = Path(out)
    fig.savefig(out, format="svg", metadata={"Date": None})
    plt.close(fig)
    return out
