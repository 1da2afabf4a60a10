"""Bench aggregation and figures."""

from __future__ import annotations

from pathlib import Path

import numpy as np

SUMMARY_HEADER = "depth,mode,queries,median_fms,improvement_pct,mps"


def median(values) -> float:
    return float(np.median(np.asarray(values, dtype=float))) if len(values) else float("nan")


def improvement(base: float, other: float) -> float:
    """Percent reduction of ``other`` against ``base``."""
    if base == 0:
        return 0.0
    return 100.0 * (base - other) / base


def summary_rows(fms: dict, baseline_key="baseline", mps: dict | None = None) -> list[dict]:
    """One row per (depth, mode) from ``fms[(depth, mode)] -> list``."""
    rows = []
    for (depth, mode) in sorted(fms, key=lambda k: (k[0], k[1] != baseline_key, k[1])):
        values = fms[(depth, mode)]
        base = median(fms[(depth, baseline_key)]) if (depth, baseline_key) in fms else float("nan")
        m = median(values)
        rows.append({
            "depth": depth,
            "mode": mode,
            "queries": len(values),
            "median_fms": m,
            "improvement_pct": improvement(base, m) if np.isfinite(base) else float("nan"),
            "mps": (mps or {}).get((depth, mode), float("nan")),
        })
    return rows


def format_summary(rows) -> str:
    lines = [SUMMARY_HEADER]
    for r in rows:
        lines.append(
            f"{r['depth']},{r['mode']},{r['queries']},{r['median_fms']:g},{r['improvement_pct']:.2f},{r['mps']:.3f}"
        )
    return "\n".join(lines) + "\n"


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_depth_sweep(rows, path, title=None):
    """Median FMS against navigation depth, one line per mode."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for mode in sorted({r["mode"] for r in rows}):
        pts = sorted((r["depth"], r["median_fms"]) for r in rows if r["mode"] == mode)
        xs, ys = zip(*pts)
        ax.plot(xs, ys, marker="o", label=mode)
    ax.set_xlabel("navigation depth")
    ax.set_ylabel("median FMS")
    if title:
        ax.set_title(title)
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return Path(path)


def plot_fms_cdf(samples: dict, path, title=None):
    """Empirical CDF of per-query FMS for each labelled series."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, values in samples.items():
        x = np.sort(np.asarray(values, dtype=float))
        if not len(x):
            continue
        y = np.arange(1, len(x) + 1) / len(x)
        ax.step(x, y, where="post", label=label)
    ax.set_xscale("log")
    ax.set_xlabel("FMS")
    ax.set_ylabel("fraction of queries")
    if title:
        ax.set_title(title)
    ax.legend(frameon=False, loc="lower right")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return Path(path)
