"""Figure rendering and slope recomputation.

One figure per distance column: a linear panel of the distance against the
truncation level epsilon (with standard-error bars) and a log-log panel
against claim_dist + G^2(epsilon) carrying a least-squares slope line.

The slope is refitted here from the raw CSV with the producer's convention:
ordinary least squares on the logs, excluding the largest epsilon as
pre-asymptotic when five or more rows are available, and undefined whenever
a selected distance or claim value is not positive (then the panel gets no
slope line, which is what an all-zero report degenerates to).
"""

from __future__ import annotations

import warnings
from pathlib import Path

import matplotlib
import numpy as np

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .frame import DISTANCE_COLUMNS, ReportFrame, load_frame  # noqa: E402

SLOPE_TOLERANCE = 1e-6

_RC = {
    "figure.figsize": (9.0, 4.0),
    "svg.hashsalt": "bsdehedge-plots",
    "svg.fonttype": "none",
    "axes.grid": True,
    "grid.alpha": 0.3,
}


class FidelityError(RuntimeError):
    """Recomputed slopes disagree with the producer's fit summary."""


def _fit_slope(x, y):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return float(np.polyfit(np.log(x), np.log(y), 1)[0])


def recompute_slopes(frame: ReportFrame) -> dict:
    """Per-column slope estimates from the CSV alone.

    Returns {column: {"slope_vs_claim", "slope_vs_claim_g2",
    "fit_excluded_largest"}} with None slopes when the positivity gate
    fails on the selected rows.
    """
    claim = frame.column("claim_dist")
    g2 = frame.column("g2")
    sl = slice(1, None) if frame.n_rows >= 5 else slice(None)
    out = {}
    for column in DISTANCE_COLUMNS:
        dist = frame.column(column)
        ok = np.all((dist[sl] > 0.0) & (claim[sl] > 0.0))
        out[column] = {
            "slope_vs_claim": _fit_slope(claim[sl], dist[sl]) if ok else None,
            "slope_vs_claim_g2": _fit_slope(claim[sl] + g2[sl], dist[sl]) if ok else None,
            "fit_excluded_largest": frame.n_rows >= 5,
        }
    return out


def verify_slopes(recomputed: dict, fits: dict, tol=SLOPE_TOLERANCE) -> dict:
    """Compare recomputed slopes against the JSON-lines fit records.

    Returns {column: worst absolute difference}; raises FidelityError when
    any shared column disagrees beyond tol (None counts as agreeing only
    with None).
    """
    diffs = {}
    for column, mine in recomputed.items():
        theirs = fits.get(column)
        if theirs is None:
            continue
        worst = 0.0
        for key in ("slope_vs_claim", "slope_vs_claim_g2"):
            a, b = mine[key], theirs.get(key)
            if a is None and b is None:
                continue
            if a is None or b is None:
                raise FidelityError(
                    f"{column}: {key} defined on one side only "
                    f"(csv: {a!r}, jsonl: {b!r})"
                )
            worst = max(worst, abs(a - b))
        diffs[column] = worst
        if worst > tol:
            raise FidelityError(
                f"{column}: recomputed slope differs from the fit summary "
                f"by {worst:.3e} (tol {tol:g})"
            )
    return diffs


def _draw_column(frame: ReportFrame, column: str, slopes: dict, out_path: Path):
    eps = frame.column("epsilon")
    dist = frame.column(column)
    se = frame.column(column + "_se")
    combined = frame.column("claim_dist") + frame.column("g2")
    info = slopes[column]
    slope = info["slope_vs_claim_g2"]

    fig, (ax_lin, ax_log) = plt.subplots(1, 2)
    ax_lin.errorbar(eps, dist, yerr=2.0 * se, marker="o", capsize=3)
    ax_lin.set_xlabel("epsilon")
    ax_lin.set_ylabel(column)
    ax_lin.set_title(f"{column} vs truncation level")

    annotated = False
    if slope is not None and np.all(dist > 0.0) and np.all(combined > 0.0):
        ax_log.loglog(combined, dist, "o")
        sl = slice(1, None) if info["fit_excluded_largest"] else slice(None)
        x_fit = combined[sl]
        # anchor the slope line through the centroid of the fitted logs
        logx, logy = np.log(x_fit), np.log(dist[sl])
        intercept = float(np.mean(logy) - slope * np.mean(logx))
        xs = np.array([x_fit.min(), x_fit.max()])
        ax_log.loglog(xs, np.exp(intercept) * xs**slope, "-",
                      label=f"slope {slope:.3f}")
        ax_log.legend()
        annotated = True
    else:
        ax_log.plot(combined, dist, "o")
        ax_log.set_yscale("linear")
    ax_log.set_xlabel("claim_dist + G2")
    ax_log.set_ylabel(column)
    ax_log.set_title("distance vs claim distance + G2")

    fig.tight_layout()
    fig.savefig(out_path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return annotated


def render(report_path, out_dir) -> dict:
    """Write one SVG per distance column; returns per-column render info.

    The result maps column -> {"path", "slope_vs_claim", "slope_vs_claim_g2",
    "fit_excluded_largest", "annotated"}.
    """
    frame = load_frame(report_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    slopes = recompute_slopes(frame)
    result = {}
    with matplotlib.rc_context(_RC):
        for column in DISTANCE_COLUMNS:
            out_path = out_dir / f"{column}.svg"
            annotated = _draw_column(frame, column, slopes, out_path)
            result[column] = {"path": out_path, "annotated": annotated, **slopes[column]}
    return result
