"""Command line: render figures from a robustness CSV report.

When a JSON-lines fit summary sits next to the CSV (same stem, .jsonl
suffix), the recomputed slopes are checked against it and a disagreement
fails the run.  Exit codes: 0 success, 2 unreadable or schema-invalid
input, 4 slope-fidelity failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .frame import SchemaError, load_fits, load_frame
from .render import FidelityError, recompute_slopes, render, verify_slopes

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_FIDELITY = 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bsdehedge-plots",
        description="Render convergence figures from a robustness CSV report",
    )
    parser.add_argument("report", help="path to robustness.csv")
    parser.add_argument("--out-dir", default=".", help="directory for the SVG files")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    report = Path(args.report)
    try:
        info = render(report, args.out_dir)
        jsonl = report.with_suffix(".jsonl")
        if jsonl.exists():
            frame = load_frame(report)
            verify_slopes(recompute_slopes(frame), load_fits(jsonl))
            print(f"slopes agree with {jsonl.name}")
    except SchemaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except FidelityError as exc:
        print(f"fidelity error: {exc}", file=sys.stderr)
        return EXIT_FIDELITY
    for column, item in info.items():
        slope = item["slope_vs_claim_g2"]
        tail = f"slope {slope:.3f}" if slope is not None else "no slope line"
        print(f"{item['path']}  {tail}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
