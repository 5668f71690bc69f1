"""Quadratic hedging in jump-diffusion markets via backward SDEs with jumps."""

__version__ = "0.1.0"

from .market import (
    ApproximationKind,
    CoefficientSpec,
    DegenerateModelError,
    JumpSpec,
    MarketModel,
    PowerLawDensity,
    TiltedPowerLawDensity,
    StructureDiagnostics,
    check_structure,
    h_process,
    kappa,
    mvt_process,
    small_jump_variance,
)
from .paths import (
    JumpRecords,
    PathBundle,
    RngConfig,
    SimulationError,
    TimeGrid,
    build_bundle_from_increments,
    claim_payoff,
    load_bundle,
    save_bundle,
    simulate,
)
from .solver import (
    BasisSpec,
    BetaNorms,
    Driver,
    PicardDivergenceError,
    RegressionError,
    SolverConfig,
    apriori_bound_check,
    beta_norms,
    picard_solve,
    regression_noise_scale,
    solve,
)
from .hedging import (
    ContingentClaim,
    HedgeResult,
    extract_phi,
    extract_pi,
    fs_driver,
    hedge_shortfalls,
    make_claim,
    mean_variance_wealth,
    orthogonality_noise_floor,
    run_hedge,
    run_hedge_terminal,
)
from .robustness import (
    EpsilonSweep,
    RobustnessReport,
    SweepError,
    bound_certificate,
    report_csv_text,
    report_jsonl_text,
    run_sweep,
    write_report,
    zeta_vanishing_check,
)
from .output import hedge_csv_text, solution_csv_text
from .config import ConfigError, ExperimentConfig, load_config, parse_config
