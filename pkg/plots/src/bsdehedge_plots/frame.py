"""Parsing and validation of robustness report files.

The plotting side never imports the solver package; its whole knowledge of
the data is the file contract: a CSV with '#' metadata rows, a fixed column
set, one row per truncation level with epsilon strictly decreasing, and a
JSON-lines companion carrying the fitted slopes and certificate flags.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

REQUIRED_COLUMNS = (
    "epsilon", "claim_dist", "claim_dist_se", "g2",
    "v_dist", "v_dist_se", "pi_dist", "pi_dist_se",
    "phi_dist", "phi_dist_se", "cost_dist", "cost_dist_se",
    "upsilon_dist", "upsilon_dist_se", "zeta_norm", "zeta_norm_se",
)

DISTANCE_COLUMNS = ("v_dist", "pi_dist", "phi_dist", "cost_dist", "upsilon_dist")


class SchemaError(ValueError):
    """The report file does not match the documented contract."""


@dataclass
class ReportFrame:
    path: Path
    meta: dict
    data: dict

    @property
    def n_rows(self) -> int:
        return self.data["epsilon"].size

    def column(self, name):
        return self.data[name]


def _parse_meta(lines) -> dict:
    meta = {}
    for line in lines:
        body = line[1:].strip()
        for token in body.split():
            if "=" in token:
                key, value = token.split("=", 1)
                meta[key] = value
            else:
                meta.setdefault("tool", token)
    return meta


def load_frame(path) -> ReportFrame:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise SchemaError(f"cannot read report: {exc}") from exc
    lines = [ln for ln in text.splitlines() if ln.strip()]
    meta_lines = [ln for ln in lines if ln.startswith("#")]
    body = [ln for ln in lines if not ln.startswith("#")]
    if not body:
        raise SchemaError(f"{path}: no header row found")
    header = tuple(body[0].split(","))
    missing = [c for c in REQUIRED_COLUMNS if c not in header]
    unexpected = [c for c in header if c not in REQUIRED_COLUMNS]
    if missing or unexpected:
        parts = []
        if missing:
            parts.append("missing columns: " + ", ".join(missing))
        if unexpected:
            parts.append("unexpected columns: " + ", ".join(unexpected))
        raise SchemaError(f"{path}: schema mismatch ({'; '.join(parts)})")

    rows = []
    for lineno, line in enumerate(body[1:], start=2):
        cells = line.split(",")
        if len(cells) != len(header):
            raise SchemaError(
                f"{path}: row {lineno} has {len(cells)} cells, expected {len(header)}"
            )
        try:
            rows.append([float(c) for c in cells])
        except ValueError as exc:
            raise SchemaError(f"{path}: row {lineno}: {exc}") from exc
    if not rows:
        raise SchemaError(f"{path}: no data rows")

    table = np.asarray(rows, dtype=float)
    data = {name: table[:, i].copy() for i, name in enumerate(header)}
    eps = data["epsilon"]
    if not np.all(np.diff(eps) < 0.0):
        raise SchemaError(f"{path}: epsilon values must be strictly decreasing")
    return ReportFrame(path=path, meta=_parse_meta(meta_lines), data=data)


def load_fits(jsonl_path) -> dict:
    """Fitted-slope records from the JSON-lines companion, keyed by column."""
    path = Path(jsonl_path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise SchemaError(f"cannot read fit summary: {exc}") from exc
    fits = {}
    for line in text.splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}: bad JSON line: {exc}") from exc
        if rec.get("record") == "fit":
            fits[rec["column"]] = rec
    if not fits:
        raise SchemaError(f"{path}: no fit records found")
    return fits
