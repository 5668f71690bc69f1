"""Deterministic text artifacts: CSV exports with metadata header rows.

All floats are written with repr (shortest round-trip form) so identical
inputs produce byte-identical files; no timestamps or machine identifiers
go into the output.
"""

from __future__ import annotations

import numpy as np

from . import __version__


def fmt(value) -> str:
    """Shortest round-trip decimal form of a float; empty cell for None."""
    if value is None:
        return ""
    return repr(float(value))


def metadata_lines(tool: str, **fields) -> list[str]:
    """'#'-prefixed header rows: tool/version first, then key=value pairs
    in the order given."""
    pairs = " ".join(f"{k}={v}" for k, v in fields.items())
    lines = [f"# {tool} v{__version__}"]
    if pairs:
        lines.append(f"# {pairs}")
    return lines


def csv_text(columns, rows, meta: list[str] | None = None) -> str:
    """Rows are sequences of pre-formatted cells (use fmt for floats)."""
    out = list(meta or [])
    out.append(",".join(columns))
    for row in rows:
        out.append(",".join(row))
    return "\n".join(out) + "\n"


def solution_csv_text(solution, meta_fields: dict | None = None) -> str:
    """Per-node summary of a backward solution.

    Node-k rows carry the integrand means and the regression residual rms;
    the terminal row has only t and the value mean (no regression happens
    there), with the remaining cells left empty.
    """
    w = solution.weights
    grid = solution.grid
    resid = solution.diagnostics["value_residual_rms"]
    columns = ("t", "x_mean", "y_mean", "zeta_mean", "zf_mean", "regression_residual_rms")
    rows = []
    for k in range(grid.n_steps):
        rows.append((
            fmt(grid.nodes[k]), fmt(w @ solution.x[:, k]), fmt(w @ solution.y[:, k]),
            fmt(w @ solution.zeta[:, k]), fmt(w @ solution.zf[:, k]), fmt(resid[k]),
        ))
    rows.append((fmt(grid.horizon), fmt(w @ solution.x[:, -1]), "", "", "", ""))
    meta = metadata_lines("bsdehedge-solution", **(meta_fields or {}))
    return csv_text(columns, rows, meta)


def hedge_csv_text(result, meta_fields: dict | None = None) -> str:
    """Per-node summary of a hedge: value, strategy, orthogonal component.

    Strategy cells are empty on the terminal row (no position is taken
    there).
    """
    w = result.weights
    grid = result.grid
    columns = ("t", "v_mean", "pi_mean", "chi_mean", "phi_mean", "cost_mean",
               "upsilon_mean", "orth_residual")
    rows = []
    for k in range(grid.n_steps):
        ups = fmt(w @ result.upsilon[:, k]) if result.upsilon is not None else ""
        rows.append((
            fmt(grid.nodes[k]), fmt(w @ result.V[:, k]), fmt(w @ result.pi[:, k]),
            fmt(w @ result.chi[:, k]), fmt(w @ result.phi[:, k]),
            fmt(w @ result.cost[:, k]), ups, fmt(result.orth_residual[k]),
        ))
    rows.append((
        fmt(grid.horizon), fmt(w @ result.V[:, -1]), "", "",
        fmt(w @ result.phi[:, -1]), fmt(w @ result.cost[:, -1]), "", "",
    ))
    meta = metadata_lines("bsdehedge-hedge", **(meta_fields or {}))
    return csv_text(columns, rows, meta)
