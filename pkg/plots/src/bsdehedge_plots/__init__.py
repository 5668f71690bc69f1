"""Convergence figures for bsdehedge robustness reports."""

__version__ = "0.1.0"

from .frame import (
    DISTANCE_COLUMNS,
    REQUIRED_COLUMNS,
    ReportFrame,
    SchemaError,
    load_fits,
    load_frame,
)
from .render import (
    SLOPE_TOLERANCE,
    FidelityError,
    recompute_slopes,
    render,
    verify_slopes,
)
