"""Figure rendering. Every plot writes an SVG plus a CSV backer with the
plotted values, and output bytes are reproducible: the Agg backend with a
fixed hash salt and no embedded date yields identical files across runs.
"""
from __future__ import annotations

from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt      # noqa: E402
import numpy as np                    # noqa: E402
import pandas as pd                   # noqa: E402

_RC = {
    "svg.hashsalt": "vaxsignal",
    "svg.fonttype": "path",
    "figure.dpi": 100,
}


def _save_svg(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def caterpillar_plot(mean, lo, hi, ae_index, truth=None,
                     svg_path="caterpillar.svg",
                     csv_path="caterpillar.csv") -> list[Path]:
    """Interval plot of per-AE effects sorted by posterior mean.

    The y-range spans the means (and truth when given) with one unit of
    padding; interval ends outside it are clipped and marked with an
    asterisk. The truth polyline is dashed green, the zero line dashed red.
    """
    mean = np.asarray(mean, dtype=float)
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    order = np.argsort(mean, kind="stable")
    j = mean.shape[0]
    x = np.arange(1, j + 1)
    t_sorted = None if truth is None else np.asarray(truth, float)[order]

    base = mean if t_sorted is None else np.concatenate([mean, t_sorted])
    y_lo, y_hi = float(base.min() - 1.0), float(base.max() + 1.0)
    lo_s, hi_s, mean_s = lo[order], hi[order], mean[order]
    lo_c = np.clip(lo_s, y_lo, y_hi)
    hi_c = np.clip(hi_s, y_lo, y_hi)

    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(10, 5))
        for i, idx in enumerate(order):
            line, = ax.plot([x[i], x[i]], [lo_c[i], hi_c[i]],
                            color="#7f7f7f", lw=0.8, zorder=1)
            line.set_gid(f"interval-{ae_index[idx]}")
        ax.plot(x, mean_s, ".", color="#1f77b4", ms=3, zorder=3)
        clip_lo = lo_s < y_lo
        clip_hi = hi_s > y_hi
        if clip_lo.any() or clip_hi.any():
            marks, = ax.plot(
                np.concatenate([x[clip_lo], x[clip_hi]]),
                np.concatenate([np.full(clip_lo.sum(), y_lo),
                                np.full(clip_hi.sum(), y_hi)]),
                "*", color="#555555", ms=5, zorder=4)
            marks.set_gid("clip-markers")
        zero = ax.axhline(0.0, color="red", ls="--", lw=0.8, zorder=2)
        zero.set_gid("zero-line")
        if t_sorted is not None:
            tl, = ax.plot(x, t_sorted, ls="--", color="green", lw=1.2,
                          zorder=2)
            tl.set_gid("truth-line")
        ax.set_xlabel("adverse events (sorted by posterior mean)")
        ax.set_ylabel("log reporting odds ratio")
        ax.set_ylim(y_lo - 0.2, y_hi + 0.2)
        svg = _save_svg(fig, svg_path)

    frame = pd.DataFrame({
        "rank": x,
        "ae_id": [ae_index[i] for i in order],
        "mean": mean_s, "ci_lo": lo_s, "ci_hi": hi_s,
    })
    if t_sorted is not None:
        frame["truth"] = t_sorted
    csv_path = Path(csv_path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(csv_path, index=False)
    return [svg, csv_path]


def cocluster_heatmap(matrix, ae_index, order_values=None,
                      svg_path="cocluster_heatmap.svg",
                      csv_path="cocluster_heatmap.csv") -> list[Path]:
    """Posterior co-clustering probabilities, axes sorted by
    ``order_values`` (typically true or estimated effects)."""
    matrix = np.asarray(matrix, dtype=float)
    j = matrix.shape[0]
    order = (np.argsort(np.asarray(order_values, float), kind="stable")
             if order_values is not None else np.arange(j))
    sorted_m = matrix[np.ix_(order, order)]
    labels = [ae_index[i] for i in order]

    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(6.5, 5.5))
        im = ax.imshow(sorted_m, cmap="viridis", vmin=0.0, vmax=1.0,
                       origin="lower", interpolation="nearest")
        im.set_gid("cocluster-image")
        fig.colorbar(im, ax=ax, label="co-clustering probability")
        ax.set_xlabel("adverse events (sorted)")
        ax.set_ylabel("adverse events (sorted)")
        svg = _save_svg(fig, svg_path)

    frame = pd.DataFrame(sorted_m, columns=labels)
    frame.insert(0, "ae_id", labels)
    csv_path = Path(csv_path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(csv_path, index=False)
    return [svg, csv_path]


def enrichment_plot(report_frame: pd.DataFrame,
                    mean_threshold: float = 2.0,
                    svg_path="enrichment.svg",
                    csv_path="enrichment.csv") -> list[Path]:
    """Interval plot of per-group EORs sorted by mean, reference lines at
    1 and at the decision threshold."""
    frame = report_frame.sort_values("eor_mean", ascending=True,
                                     kind="stable").reset_index(drop=True)
    y = np.arange(len(frame))
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(7, max(3.0, 0.35 * len(frame) + 1)))
        for i, row in frame.iterrows():
            line, = ax.plot([row["ci_lo"], row["ci_hi"]], [y[i], y[i]],
                            color="#7f7f7f", lw=1.2)
            line.set_gid(f"eor-interval-{row['soc']}")
        ax.plot(frame["eor_mean"], y, "o", color="#1f77b4", ms=4)
        ax.axvline(1.0, color="red", ls="--", lw=0.8)
        ax.axvline(mean_threshold, color="#555555", ls=":", lw=0.8)
        ax.set_yticks(y)
        ax.set_yticklabels(frame["soc"])
        ax.set_xlabel("exceedance odds ratio")
        fig.tight_layout()
        svg = _save_svg(fig, svg_path)
    csv_path = Path(csv_path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(csv_path, index=False)
    return [svg, csv_path]
