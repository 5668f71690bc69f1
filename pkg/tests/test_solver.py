"""Solver tests: exact tree oracle, ODE limit, Picard behavior, norms."""

import math

import numpy as np
import pytest

from bsdehedge.market import (
    ApproximationKind,
    CoefficientSpec,
    JumpSpec,
    MarketModel,
)
from bsdehedge.paths import (
    JumpRecords,
    RngConfig,
    TimeGrid,
    build_bundle_from_increments,
    claim_payoff,
    simulate,
)
from bsdehedge.solver import (
    BasisSpec,
    BetaNorms,
    BSDEJSolution,
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

ORIG = ApproximationKind.original()


def zero_driver():
    return Driver(lambda t, x, y, zf, z: np.zeros_like(x), 0.0, label="zero")


def merton_model():
    jump = JumpSpec(atoms=[(-0.2, 1.0), (0.15, 1.0)])
    coeffs = CoefficientSpec(a=0.05, b=0.2, r=0.0, gamma_tilde=1.0)
    return MarketModel(1.0, coeffs, jump, 1.0)


@pytest.fixture(scope="module")
def merton_bundle():
    return simulate(merton_model(), [ORIG], TimeGrid(1.0, 10), 4000, RngConfig(101))


def call_terminal(bundle):
    return claim_payoff(bundle, ORIG, lambda s: np.maximum(s - 1.0, 0.0))


def group_means(state, values, weights):
    uniq, inv = np.unique(np.round(state, 10), return_inverse=True)
    num = np.bincount(inv, weights=weights * values)
    den = np.bincount(inv, weights=weights)
    return (num / den)[inv]


def test_driver_probe_rejects_understated_constant():
    with pytest.raises(ValueError):
        Driver(lambda t, x, y, zf, z: 2.0 * y, 0.5)
    d = Driver(lambda t, x, y, zf, z: 2.0 * y, 2.0)
    assert d.lipschitz_C == 2.0


def test_basis_and_config_validation():
    with pytest.raises(ValueError):
        BasisSpec("splines")
    with pytest.raises(ValueError):
        BasisSpec.poly(0)
    with pytest.raises(ValueError):
        SolverConfig(mode="midpoint")
    with pytest.raises(ValueError):
        SolverConfig(beta=-1.0)
    with pytest.raises(ValueError):
        SolverConfig(beta_rule="7C2")
    cfg = SolverConfig(beta_rule="8C2+1")
    assert cfg.resolve_beta(Driver(lambda t, x, y, zf, z: 0.5 * y, 0.5)) == 3.0
    assert SolverConfig().resolve_beta(zero_driver()) == 1.0


def test_zero_driver_constant_terminal_is_exact():
    model = MarketModel(1.0, CoefficientSpec(0.0, 0.0, 0.0, 0.0), JumpSpec.none(), 1.0)
    bundle = simulate(model, [ORIG], TimeGrid(1.0, 5), 32, RngConfig(1))
    terminal = np.full(32, 3.25)
    cfg = SolverConfig(basis=BasisSpec.indicator(), ridge=0.0)
    sol = solve(bundle, ORIG, terminal, zero_driver(), cfg)
    assert np.array_equal(sol.x[:, -1], terminal)
    assert np.allclose(sol.x, 3.25, rtol=0.0, atol=1e-13)
    # the conditional-mean fit of a constant is exact only to rounding, so
    # the centered integrand regressions carry last-ulp dust
    for arr in (sol.y, sol.zf, sol.zeta):
        assert np.max(np.abs(arr)) < 1e-12


def test_linear_decay_driver_matches_ode():
    model = MarketModel(1.0, CoefficientSpec(0.0, 0.0, 0.0, 0.0), JumpSpec.none(), 1.0)
    bundle = simulate(model, [ORIG], TimeGrid(1.0, 20), 16, RngConfig(2))
    driver = Driver(lambda t, x, y, zf, z: -0.05 * x, 0.05, label="decay")
    sol = solve(bundle, ORIG, np.ones(16), driver)
    x0 = float(np.sum(bundle.weights * sol.x[:, 0]))
    assert abs(x0 - math.exp(-0.05)) < 2e-3


def tree_bundle():
    """Exhaustive 3-step ensemble: one 0.5-atom, at most one jump per step."""
    jump = JumpSpec(atoms=[(0.5, 1.0)])
    model = MarketModel(1.0, CoefficientSpec(0.0, 0.0, 0.0, 1.0), jump, 1.0)
    grid = TimeGrid(1.0, 3)
    dt = grid.dt
    n = 8
    bits = np.array([[(i >> k) & 1 for k in range(3)] for i in range(n)])
    p1 = 1.0 - math.exp(-dt)
    weights = np.prod(np.where(bits == 1, p1, 1.0 - p1), axis=1)
    path, step = np.nonzero(bits)
    records = JumpRecords(
        path=path.astype(np.int64),
        step=step.astype(np.int64),
        time=(step + 0.5) * dt,
        mark=np.full(path.size, 0.5),
    )
    bundle = build_bundle_from_increments(
        model, [ORIG], grid, np.zeros((n, 3)), records=records, weights=weights
    )
    dm = 1.0 * (bits * 0.5 - 0.5 * dt)  # gamma_tilde (g sum - compensator dt)
    return bundle, dm


def test_pure_jump_tree_matches_groupby_oracle():
    bundle, dm = tree_bundle()
    terminal = claim_payoff(bundle, ORIG, lambda s: np.maximum(s - 1.0, 0.0))
    cfg = SolverConfig(basis=BasisSpec.indicator(), ridge=0.0)
    sol = solve(bundle, ORIG, terminal, zero_driver(), cfg)

    assert np.allclose(bundle.jump_martingale_increments(ORIG), dm, atol=1e-14)
    w, dt = bundle.weights, bundle.grid.dt
    x_o = terminal.copy()
    for k in (2, 1, 0):
        state = bundle.prices[ORIG][:, k]
        c = group_means(state, x_o, w)
        zf_o = group_means(state, (x_o - c) * dm[:, k], w) / dt
        assert np.max(np.abs(sol.zf[:, k] - zf_o)) < 1e-10
        x_o = c
        assert np.max(np.abs(sol.x[:, k] - x_o)) < 1e-10
    # projected norm: ||gamma||^2 = g2 of the single kept atom
    assert np.allclose(sol.z_norm_sq, sol.zf**2 / 0.25, atol=1e-14)
    assert np.all(sol.zeta == 0.0)


def test_rank_deficient_basis_names_the_node():
    model = MarketModel(1.0, CoefficientSpec(0.0, 0.2, 0.0, 0.0), JumpSpec.none(), 1.0)
    bundle = simulate(model, [ORIG], TimeGrid(1.0, 4), 64, RngConfig(3))
    cfg = SolverConfig(ridge=0.0)  # polynomial basis is collinear at the start node
    with pytest.raises(RegressionError, match="node 0"):
        solve(bundle, ORIG, np.ones(64), zero_driver(), cfg)


def test_zero_driver_equals_iterated_regression(merton_bundle):
    bundle = merton_bundle
    terminal = call_terminal(bundle)
    cfg = SolverConfig()
    sol = solve(bundle, ORIG, terminal, zero_driver(), cfg)
    w = bundle.weights
    v = terminal.copy()
    for k in range(bundle.grid.n_steps - 1, -1, -1):
        phi = cfg.basis.matrix(bundle.prices[ORIG][:, k : k + 1])
        a = phi.T @ (w[:, None] * phi) + cfg.ridge * np.eye(phi.shape[1])
        v = phi @ np.linalg.solve(a, phi.T @ (w * v))
        assert np.max(np.abs(sol.x[:, k] - v)) < 1e-10


def test_tower_property_of_zero_driver_means(merton_bundle):
    bundle = merton_bundle
    terminal = call_terminal(bundle)
    sol = solve(bundle, ORIG, terminal, zero_driver())
    w = bundle.weights
    mean_term = float(np.sum(w * terminal))
    se = math.sqrt(float(np.sum(w * (terminal - mean_term) ** 2)) / bundle.n_paths)
    means = w @ sol.x
    assert np.all(np.abs(means - mean_term) < 3.0 * se)


def test_x0_stability_under_path_doubling():
    model = merton_model()
    grid = TimeGrid(1.0, 10)
    sols = []
    for n in (2000, 4000):
        bundle = simulate(model, [ORIG], grid, n, RngConfig(101))
        sols.append(solve(bundle, ORIG, call_terminal(bundle), zero_driver()))
        if n == 2000:
            terminal = call_terminal(bundle)
            sigma = math.sqrt(
                float(np.sum(bundle.weights * (terminal - np.sum(bundle.weights * terminal)) ** 2))
            )
    x0 = [float(np.sum(s.weights * s.x[:, 0])) for s in sols]
    assert abs(x0[0] - x0[1]) < 5.0 * sigma / math.sqrt(2000.0)


def test_zeta_estimate_stays_at_noise_floor(merton_bundle):
    # prices carry no second Brownian component, so the fitted zeta is pure
    # regression noise and must sit within a few multiples of its scale
    bundle = merton_bundle
    driver = Driver(
        lambda t, x, y, zf, z: -0.1 * (y + z), 0.1, uses_zeta=True, label="with-zeta"
    )
    sol = solve(bundle, ORIG, call_terminal(bundle), driver)
    floor = regression_noise_scale(sol, "zeta")
    zeta_rms = np.sqrt(sol.weights @ sol.zeta**2)
    assert np.all(zeta_rms <= 5.0 * floor)
    assert np.any(zeta_rms > 0.0)


def test_beta_norm_closed_forms():
    grid = TimeGrid(1.0, 2000)
    n = 4
    k = grid.n_steps

    def const_solution(value):
        return BSDEJSolution(
            kind=ORIG, grid=grid, weights=np.full(n, 1.0 / n),
            x=np.full((n, k + 1), value), y=np.zeros((n, k)), zf=np.zeros((n, k)),
            z_norm_sq=np.zeros((n, k)), zeta=np.zeros((n, k)),
            cond_mean=np.zeros((n, k)), z_scale=np.zeros(k),
            terminal=np.full(n, value), driver=None, config=None, diagnostics={},
        )

    zero = beta_norms(const_solution(0.0), 1.0)
    assert zero.total == 0.0 and zero.sup_norm == 0.0
    one_b0 = beta_norms(const_solution(1.0), 0.0)
    assert one_b0.x_norm == pytest.approx(1.0, abs=1e-12)
    assert one_b0.sup_norm == pytest.approx(1.0, abs=1e-12)
    one_b1 = beta_norms(const_solution(1.0), 1.0)
    assert one_b1.x_norm == pytest.approx(math.e - 1.0, abs=1e-3)
    assert one_b1.sup_norm == pytest.approx(math.e, abs=1e-12)
    # the pathwise sup dominates the starting value in every norm
    assert one_b1.sup_norm >= 1.0
    assert isinstance(one_b1, BetaNorms)


def test_apriori_bound_holds_and_is_deterministic():
    model = merton_model()
    grid = TimeGrid(1.0, 10)
    driver = Driver(
        lambda t, x, y, zf, z: -0.1 * (y + zf + z), 0.1, uses_zeta=True, label="linear"
    )
    ratios = []
    for _ in range(2):
        bundle = simulate(model, [ORIG], grid, 4000, RngConfig(101))
        sol = solve(bundle, ORIG, call_terminal(bundle), driver)
        report = apriori_bound_check(sol, sol.terminal)
        ratios.append(report["ratio"])
        assert report["passed"] and 0.0 < report["ratio"] <= 1.0
        assert report["c_bound"] == pytest.approx(2.0 * math.exp(report["beta"]))
    assert abs(ratios[0] - ratios[1]) <= 1e-12

    zeros_report = apriori_bound_check(
        solve(bundle, ORIG, np.zeros(bundle.n_paths), zero_driver()), np.zeros(bundle.n_paths)
    )
    assert zeros_report["ratio"] == 0.0

    inhomogeneous = Driver(lambda t, x, y, zf, z: np.full_like(x, 0.3), 0.0, label="const")
    sol_c = solve(bundle, ORIG, np.zeros(bundle.n_paths), inhomogeneous)
    with pytest.raises(ValueError):
        apriori_bound_check(sol_c, sol_c.terminal)


def test_picard_zero_driver_hits_fixed_point_immediately(merton_bundle):
    bundle = merton_bundle
    terminal = call_terminal(bundle)
    cfg = SolverConfig(mode="picard")
    sol = picard_solve(bundle, ORIG, terminal, zero_driver(), cfg)
    d = sol.diagnostics
    assert d["picard_converged"]
    assert d["picard_fixed_point_iteration"] == 1
    assert d["picard_distances"][-1] == 0.0
    direct = solve(bundle, ORIG, terminal, zero_driver(), SolverConfig())
    assert np.array_equal(sol.x, direct.x)
    with pytest.raises(ValueError):
        picard_solve(bundle, ORIG, terminal, zero_driver(), SolverConfig())


def test_picard_contraction_and_solve_equivalence(merton_bundle):
    bundle = merton_bundle
    terminal = call_terminal(bundle)
    driver = Driver(lambda t, x, y, zf, z: 0.5 * np.tanh(y), 0.5, label="tanh")
    cfg = SolverConfig(mode="picard", picard_tol=1e-14)
    sol = picard_solve(bundle, ORIG, terminal, driver, cfg)
    d = sol.diagnostics
    assert d["picard_converged"]
    assert d["picard_beta"] == 2.5
    assert max(d["picard_ratios"]) <= 0.75
    direct = solve(bundle, ORIG, terminal, driver, SolverConfig())
    assert np.max(np.abs(sol.x - direct.x)) < 1e-12
    assert np.max(np.abs(sol.y - direct.y)) < 1e-12


def test_picard_linear_x_driver_equals_solve(merton_bundle):
    bundle = merton_bundle
    driver = Driver(lambda t, x, y, zf, z: -0.05 * x, 0.05, label="decay")
    terminal = call_terminal(bundle)
    sol = picard_solve(bundle, ORIG, terminal, driver, SolverConfig(mode="picard"))
    direct = solve(bundle, ORIG, terminal, driver)
    assert np.max(np.abs(sol.x - direct.x)) < 1e-12


def test_picard_divergence_guard():
    # with the exponential weight disabled (beta = 0) a stiff driver stops
    # contracting and the guard must trip instead of looping to max_iters
    model = merton_model()
    bundle = simulate(model, [ORIG], TimeGrid(1.0, 16), 256, RngConfig(7))
    driver = Driver(lambda t, x, y, zf, z: 10.0 * y, 10.0, label="stiff")
    cfg = SolverConfig(mode="picard", beta=0.0)
    with pytest.raises(PicardDivergenceError, match="ratio"):
        picard_solve(bundle, ORIG, call_terminal(bundle), driver, cfg)


def test_terminal_mismatch_and_missing_kind(merton_bundle):
    bundle = merton_bundle
    with pytest.raises(ValueError):
        solve(bundle, ORIG, np.ones(7), zero_driver())
    other = ApproximationKind.truncate_only(0.5)
    with pytest.raises(ValueError):
        solve(bundle, other, np.ones(bundle.n_paths), zero_driver())
