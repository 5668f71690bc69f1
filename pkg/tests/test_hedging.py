import math

import numpy as np
import pytest

from bsdehedge.hedging import (
    extract_phi,
    extract_pi,
    fs_driver,
    hedge_shortfalls,
    make_claim,
    mean_variance_wealth,
    orthogonality_noise_floor,
    run_hedge,
)
from bsdehedge.market import (
    ApproximationKind,
    CoefficientSpec,
    DegenerateModelError,
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
from bsdehedge.solver import BasisSpec, SolverConfig
from tree_oracle import hedge_tree, tree_fs_oracle

ORIG = ApproximationKind.original()


def merton_model(a=0.05, r=0.0):
    jump = JumpSpec(atoms=[(-0.2, 1.0), (0.15, 1.0)])
    return MarketModel(1.0, CoefficientSpec(a, 0.2, r, 1.0), jump, 1.0)


@pytest.fixture(scope="module")
def merton_bundle():
    return simulate(merton_model(), [ORIG], TimeGrid(1.0, 10), 4000, RngConfig(101))


def weighted_rms(bundle, values):
    return math.sqrt(float(bundle.weights @ values**2))


def test_make_claim_registry():
    s = np.array([0.5, 1.0, 2.0])
    assert np.allclose(make_claim("call", strike=1.0).payoff(s), [0.0, 0.0, 1.0])
    assert np.allclose(make_claim("put", strike=1.0).payoff(s), [0.5, 0.0, 0.0])
    assert np.allclose(make_claim("identity").payoff(s), s)
    assert np.allclose(make_claim("constant", value=2.5).payoff(s), 2.5)
    with pytest.raises(ValueError):
        make_claim("digital")
    with pytest.raises(ValueError):
        make_claim("call", strike=1.0, barrier=2.0)


def test_fs_driver_vanishes_without_excess_return():
    model = merton_model(a=0.03, r=0.03)
    rng = np.random.default_rng(5)
    for kind in (ORIG, ApproximationKind.truncate_add_b(0.17),
                 ApproximationKind.truncate_rescale_w(0.17)):
        drv = fs_driver(model, kind)
        assert drv.lipschitz_C == 0.0
        args = rng.normal(size=(4, 16))
        assert np.all(drv.eval(0.3, *args) == 0.0)


def test_fs_driver_matches_hand_computed_slope():
    # kappa = 0.2^2 + 0.1^2 * (2*1 + 0.5*4) = 0.08, h = 0.05 / kappa = 0.625
    jump = JumpSpec(atoms=[(-1.0, 2.0), (2.0, 0.5)])
    model = MarketModel(1.0, CoefficientSpec(0.05, 0.2, 0.0, 0.1), jump, 1.0)
    drv = fs_driver(model, ORIG)
    y = np.array([1.0])
    zero = np.zeros(1)
    f = float(drv.eval(0.5, zero, y, zero, zero)[0])
    assert f == pytest.approx(-0.125, rel=1e-12)
    assert not drv.uses_zeta
    assert drv.z_scale == pytest.approx(0.1 * 2.0, rel=1e-12)
    assert drv.lipschitz_C == pytest.approx(math.sqrt(2 * 0.08) * 0.625, rel=1e-12)


def test_fs_driver_truncation_difference_is_lipschitz_bounded():
    """The original and add-Brownian drivers differ only through the
    truncated jump functional and the zeta slot."""
    model = merton_model()
    d0 = fs_driver(model, ORIG)
    eps = 0.17  # keeps the 0.2-atom only
    d1 = fs_driver(model, ApproximationKind.truncate_add_b(eps))
    assert d1.uses_zeta and not d0.uses_zeta
    c = max(d0.lipschitz_C, d1.lipschitz_C)
    rng = np.random.default_rng(99)
    for _ in range(50):
        t = float(rng.uniform(0.0, 1.0))
        x, y, zf0, zf1, zeta = rng.normal(0.0, 2.0, size=5)
        f0 = float(d0.eval(t, np.r_[x], np.r_[y], np.r_[zf0], np.r_[0.0])[0])
        f1 = float(d1.eval(t, np.r_[x], np.r_[y], np.r_[zf1], np.r_[zeta])[0])
        bound = c * (abs(zf0 - zf1) / min(d0.z_scale, d1.z_scale) + abs(zeta))
        assert abs(f0 - f1) <= bound + 1e-9


def test_fs_driver_degenerate_kappa_raises():
    model = MarketModel(1.0, CoefficientSpec(0.05, 0.0, 0.0, 0.0), JumpSpec.none(), 1.0)
    with pytest.raises(DegenerateModelError):
        fs_driver(model, ORIG)


def test_identity_claim_is_replicated(merton_bundle):
    """ksi = S(T) with r = 0: the hedge holds one share, phi stays small."""
    bundle = merton_bundle
    res = run_hedge(bundle, ORIG, make_claim("identity"))
    w = bundle.weights
    assert float(np.mean(w @ np.abs(res.chi - 1.0))) < 0.05
    terminal = claim_payoff(bundle, ORIG, lambda s: s)
    assert np.array_equal(res.V[:, -1], terminal)
    assert np.all(res.phi[:, 0] == 0.0)
    assert float(w @ res.phi[:, -1] ** 2) / float(w @ terminal**2) < 1e-3
    # mean-variance strategy tracks the price as well
    prices = bundle.prices[ORIG][:, :-1]
    assert float(w @ np.mean(np.abs(res.upsilon / prices - 1.0), axis=1)) < 0.05


def test_hedge_identities_and_orthogonality(merton_bundle):
    bundle = merton_bundle
    res = run_hedge(bundle, ORIG, make_claim("call", strike=1.0))
    w = bundle.weights

    # decomposition and cost identities, recomputed from scratch
    prices = bundle.prices[ORIG]
    rel = np.where(bundle.alive[:, None], prices[:, 1:] / prices[:, :-1] - 1.0, 0.0)
    gains = np.cumsum(res.pi * rel, axis=1)
    recon = res.V[:, 1:] - res.V[:, :1] - gains - res.phi[:, 1:]
    assert np.max(np.abs(recon[bundle.alive])) < 1e-12
    assert np.max(np.abs(res.cost - res.cost[:, :1] - res.phi)) < 1e-12
    assert np.array_equal(res.V[:, -1], claim_payoff(bundle, ORIG, make_claim("call").payoff))

    # pointwise orthogonality combination cancels to rounding
    assert np.max(res.identity_residual) < 1e-12

    # statistical orthogonality: covariance of dphi with the price martingale
    # sits below the noise floor measured on a structureless claim of the
    # same magnitude
    rms = weighted_rms(bundle, res.V[:, -1])
    floor = orthogonality_noise_floor(bundle, ORIG, rms)
    assert floor > 0.0
    assert np.max(res.orth_residual) < 5.0 * floor


def test_chi_vanishes_on_excluded_paths():
    # one hand-built dead path (price factor <= 0 at step 0)
    model = MarketModel(1.0, CoefficientSpec(0.0, 0.5, 0.0, 0.0), JumpSpec.none(), 1.0)
    grid = TimeGrid(1.0, 2)
    dw = np.array([[0.1, 0.0], [-5.0, 0.0], [0.2, -0.1], [-0.1, 0.2]])
    bundle = build_bundle_from_increments(model, [ORIG], grid, dw)
    assert not bundle.alive[1]
    res = run_hedge(bundle, ORIG, make_claim("call", strike=1.0),
                    SolverConfig(basis=BasisSpec.poly(1)))
    assert np.all(res.chi[1] == 0.0)
    assert np.all(np.isfinite(res.phi))


def test_mean_variance_wealth_reduces_to_pi_without_excess():
    model = merton_model(a=0.03, r=0.03)
    bundle = simulate(model, [ORIG], TimeGrid(1.0, 6), 500, RngConfig(7))
    res = run_hedge(bundle, ORIG, make_claim("call", strike=1.0))
    assert np.array_equal(res.upsilon, res.pi)


def test_shortfall_ordering_on_common_paths():
    # the true mean-variance gain over the locally risk-minimizing strategy
    # is of the order of the trade-off integral (fractions of a percent), so
    # the sampled ordering needs enough paths to be stable; this instance
    # holds it strictly
    bundle = simulate(merton_model(), [ORIG], TimeGrid(1.0, 10), 16000, RngConfig(101))
    res = run_hedge(bundle, ORIG, make_claim("call", strike=1.0))
    terminal = claim_payoff(bundle, ORIG, make_claim("call").payoff)
    s = hedge_shortfalls(res, bundle, terminal)
    assert s["upsilon"] <= s["pi"]
    assert s["pi"] < 0.5 * s["zero"]


def test_picard_mode_agrees_with_one_step(merton_bundle):
    bundle = merton_bundle
    one = run_hedge(bundle, ORIG, make_claim("call", strike=1.0))
    pic = run_hedge(bundle, ORIG, make_claim("call", strike=1.0),
                    SolverConfig(mode="picard", picard_tol=1e-14))
    assert pic.solution.diagnostics["picard_converged"]
    assert np.max(np.abs(one.V - pic.V)) < 1e-10
    assert np.max(np.abs(one.pi - pic.pi)) < 1e-10


def test_tree_hedge_matches_exact_conditional_expectations():
    bundle, counts = hedge_tree()
    terminal = claim_payoff(bundle, ORIG, make_claim("call", strike=1.0).payoff)
    cfg = SolverConfig(basis=BasisSpec.indicator(), ridge=0.0)
    res = run_hedge(bundle, ORIG, make_claim("call", strike=1.0), cfg)
    x_o, pi_o, phi_o = tree_fs_oracle(bundle, counts, terminal)
    assert np.max(np.abs(res.V - x_o)) < 1e-8
    assert np.max(np.abs(res.pi - pi_o)) < 1e-8
    assert np.max(np.abs(res.phi - phi_o)) < 1e-8
