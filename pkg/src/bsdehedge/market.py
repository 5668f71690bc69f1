"""Jump-diffusion market primitives.

A market is a deterministic coefficient set (a, b, r, gamma_tilde) plus a
Levy jump measure with a jump-size loading g(z).  Small-jump truncation
variants of the price dynamics are labelled by ApproximationKind tags and
share all structural quantities (kappa, h, mean-variance tradeoff) through
this module.

Conventions used throughout: the truncation at level eps removes the jump
mass on the closed ball {|z| <= eps} and keeps {|z| > eps}.  An atom sitting
exactly at |z| = eps therefore counts toward the small-jump variance, which
keeps eps -> G^2(eps) right-continuous.
"""

from __future__ import annotations

import math
import warnings as _warnings
from dataclasses import dataclass

import numpy as np
from scipy import integrate

QUAD_ABS_TOL = 1e-10
_QUAD_LIMIT = 200

KIND_TAGS = (
    "Original",
    "TruncateAddB",
    "TruncateRescaleW",
    "TruncateOnly",
    "VarianceMatchedW",
)


class DegenerateModelError(ValueError):
    """A market model violates a structural requirement (e.g. kappa = 0)."""


# ---------------------------------------------------------------------------
# Jump measures
# ---------------------------------------------------------------------------


class PowerLawDensity:
    """Two-sided power law density |z|^(-1-alpha) on [z_min, z_max] \\ {0}.

    alpha plays the role of a stability index: the measure has a finite
    second moment only for alpha < 2, and infinite activity at the origin
    for alpha > 0 (whenever the support touches 0).
    """

    name = "power_law"

    def __init__(self, alpha: float, z_min: float = -1.0, z_max: float = 1.0):
        if not alpha < 2.0:
            raise DegenerateModelError(
                f"power-law index alpha={alpha} has an infinite second moment; need alpha < 2"
            )
        _check_support(z_min, z_max)
        self.alpha = float(alpha)
        self.support = (float(z_min), float(z_max))

    def __call__(self, z):
        return np.abs(z) ** (-1.0 - self.alpha)

    @property
    def finite_activity(self) -> bool:
        lo, hi = self.support
        touches_zero = lo < 0.0 < hi or lo == 0.0 or hi == 0.0
        return self.alpha < 0.0 or not touches_zero


class TiltedPowerLawDensity:
    """Exponentially tilted power law |z|^(-1-alpha) * exp(-eta |z|)."""

    name = "tilted_power_law"

    def __init__(self, alpha: float, eta: float, z_min: float = -1.0, z_max: float = 1.0):
        if not alpha < 2.0:
            raise DegenerateModelError(
                f"tilted power-law index alpha={alpha} has an infinite second moment; need alpha < 2"
            )
        if eta < 0.0:
            raise DegenerateModelError(f"tilt eta={eta} must be nonnegative")
        _check_support(z_min, z_max)
        self.alpha = float(alpha)
        self.eta = float(eta)
        self.support = (float(z_min), float(z_max))

    def __call__(self, z):
        az = np.abs(z)
        return az ** (-1.0 - self.alpha) * np.exp(-self.eta * az)

    @property
    def finite_activity(self) -> bool:
        lo, hi = self.support
        touches_zero = lo < 0.0 < hi or lo == 0.0 or hi == 0.0
        return self.alpha < 0.0 or not touches_zero


def _check_support(z_min, z_max):
    if not z_min < z_max:
        raise DegenerateModelError(f"empty jump support [{z_min}, {z_max}]")


def g_linear(z):
    """Identity jump loading g(z) = z."""
    return np.asarray(z, dtype=float)


def g_expm1(z):
    """Exponential jump loading g(z) = e^z - 1."""
    return np.expm1(np.asarray(z, dtype=float))


G_FUNCTIONS = {"linear": g_linear, "expm1": g_expm1}


class JumpSpec:
    """A Levy measure together with the jump-size loading g.

    Either density-driven (callable density on an interval support, with the
    origin excluded) or a finite list of atoms (z_j, intensity_j).  All mass
    integrals below follow the kept = {|z| > eps} / removed = {|z| <= eps}
    truncation convention.
    """

    @staticmethod
    def none() -> "JumpSpec":
        """A measure with no jumps at all."""
        return JumpSpec(atoms=[])

    def __init__(self, *, density=None, atoms=None, g=g_linear):
        if (density is None) == (atoms is None):
            raise DegenerateModelError("specify exactly one of density= or atoms=")
        self.g = g
        self.density = density
        self.atoms = None
        self._mass_cache: dict = {}
        if atoms is not None:
            atoms = [(float(z), float(lam)) for z, lam in atoms]
            for z, lam in atoms:
                if z == 0.0:
                    raise DegenerateModelError("jump atom at z = 0 is not allowed")
                if lam <= 0.0:
                    raise DegenerateModelError(f"atom intensity {lam} at z={z} must be positive")
            self.atoms = sorted(atoms)
            self.support = (self.atoms[0][0], self.atoms[-1][0]) if atoms else (0.0, 0.0)
        else:
            self.support = tuple(float(v) for v in density.support)
        # construction-time finiteness checks
        second = self.moment2()
        if not math.isfinite(second):
            raise DegenerateModelError("jump measure has an infinite second moment")
        if not math.isfinite(self.g2_total()):
            raise DegenerateModelError("integral of g^2 against the jump measure diverges")

    # -- activity ------------------------------------------------------

    @property
    def finite_activity(self) -> bool:
        if self.atoms is not None:
            return True
        fa = getattr(self.density, "finite_activity", None)
        if fa is not None:
            return bool(fa)
        # generic density: probe the growth of the kept mass near the origin
        m6, m8 = self.mass_above(1e-6), self.mass_above(1e-8)
        return m8 <= m6 * (1.0 + 1e-3) + 1e-9

    # -- interval helpers (density case) --------------------------------

    def _kept_intervals(self, eps):
        lo, hi = self.support
        out = []
        if lo < -eps:
            out.append((lo, min(hi, -eps)))
        if hi > eps:
            out.append((max(lo, eps), hi))
        return out

    def _removed_intervals(self, eps):
        lo, hi = self.support
        out = []
        a, b = max(lo, -eps), min(hi, 0.0)
        if a < b:
            out.append((a, b))
        a, b = max(lo, 0.0), min(hi, eps)
        if a < b:
            out.append((a, b))
        return out

    def _quad(self, fn, intervals):
        total = 0.0
        for a, b in intervals:
            with _warnings.catch_warnings():
                _warnings.simplefilter("error", integrate.IntegrationWarning)
                try:
                    val, _ = integrate.quad(
                        fn, a, b, epsabs=QUAD_ABS_TOL, epsrel=QUAD_ABS_TOL, limit=_QUAD_LIMIT
                    )
                except integrate.IntegrationWarning as exc:
                    raise DegenerateModelError(
                        f"jump-measure quadrature failed on [{a}, {b}]: {exc}"
                    ) from exc
            total += val
        return total

    # -- masses ----------------------------------------------------------

    def _cached(self, key, compute):
        if key not in self._mass_cache:
            self._mass_cache[key] = compute()
        return self._mass_cache[key]

    def mass_above(self, eps: float) -> float:
        """Total intensity of the kept jumps, l({|z| > eps})."""
        if self.atoms is not None:
            return sum(lam for z, lam in self.atoms if abs(z) > eps)
        return self._cached(("mass", eps), lambda: self._quad(self.density, self._kept_intervals(eps)))

    def g_mass_above(self, eps: float) -> float:
        """Compensator weight of the kept jumps, integral of g over {|z| > eps}."""
        if self.atoms is not None:
            return sum(lam * float(self.g(z)) for z, lam in self.atoms if abs(z) > eps)
        fn = lambda z: float(self.g(z)) * self.density(z)
        return self._cached(("g1", eps), lambda: self._quad(fn, self._kept_intervals(eps)))

    def g2_mass_above(self, eps: float) -> float:
        """Quadratic mass of the kept jumps, integral of g^2 over {|z| > eps}."""
        if self.atoms is not None:
            return sum(lam * float(self.g(z)) ** 2 for z, lam in self.atoms if abs(z) > eps)
        fn = lambda z: float(self.g(z)) ** 2 * self.density(z)
        return self._cached(("g2a", eps), lambda: self._quad(fn, self._kept_intervals(eps)))

    def g2_mass_below(self, eps: float) -> float:
        """Small-jump quadratic mass, integral of g^2 over {|z| <= eps}."""
        if eps <= 0.0:
            return 0.0
        if self.atoms is not None:
            return sum(lam * float(self.g(z)) ** 2 for z, lam in self.atoms if abs(z) <= eps)
        fn = lambda z: float(self.g(z)) ** 2 * self.density(z)
        return self._cached(("g2b", eps), lambda: self._quad(fn, self._removed_intervals(eps)))

    def g2_total(self) -> float:
        """Integral of g^2 against the whole measure."""
        if self.atoms is not None:
            return sum(lam * float(self.g(z)) ** 2 for z, lam in self.atoms)
        fn = lambda z: float(self.g(z)) ** 2 * self.density(z)
        return self._cached(("g2t",), lambda: self._quad(fn, self._kept_intervals(0.0)))

    def moment2(self) -> float:
        """Second moment of the measure itself, integral of z^2."""
        if self.atoms is not None:
            return sum(lam * z * z for z, lam in self.atoms)
        fn = lambda z: z * z * self.density(z)
        return self._cached(("m2",), lambda: self._quad(fn, self._kept_intervals(0.0)))


def small_jump_variance(jump: JumpSpec, epsilon: float) -> float:
    """G^2(eps): variance weight of the removed small jumps.

    Parameters
    ----------
    jump : JumpSpec
        Jump measure with loading g.
    epsilon : float
        Truncation level; mass on {|z| <= epsilon} is removed.

    Returns
    -------
    float
        Integral of g(z)^2 over {|z| <= epsilon} against the measure.
    """
    if epsilon < 0.0:
        raise ValueError(f"epsilon={epsilon} must be nonnegative")
    return jump.g2_mass_below(epsilon)


# ---------------------------------------------------------------------------
# Coefficients and model
# ---------------------------------------------------------------------------


def _as_time_function(v):
    if callable(v):
        return v
    c = float(v)
    return lambda t, _c=c: np.asarray(t, dtype=float) * 0.0 + _c


class CoefficientSpec:
    """Deterministic coefficient curves a(t), b(t), r(t), gamma_tilde(t).

    Each entry is a constant or a vectorized callable of time.
    """

    def __init__(self, a=0.0, b=0.0, r=0.0, gamma_tilde=0.0):
        self.a = _as_time_function(a)
        self.b = _as_time_function(b)
        self.r = _as_time_function(r)
        self.gamma_tilde = _as_time_function(gamma_tilde)

    def excess(self, t):
        """a(t) - r(t)."""
        return self.a(t) - self.r(t)


class MarketModel:
    """Initial price, coefficients, jump measure and horizon."""

    def __init__(self, s0: float, coeffs: CoefficientSpec, jump: JumpSpec, horizon: float):
        if s0 <= 0.0:
            raise DegenerateModelError(f"initial price s0={s0} must be positive")
        if horizon <= 0.0:
            raise DegenerateModelError(f"horizon T={horizon} must be positive")
        self.s0 = float(s0)
        self.coeffs = coeffs
        self.jump = jump
        self.horizon = float(horizon)


@dataclass(frozen=True)
class ApproximationKind:
    """Label of a small-jump treatment of the price dynamics.

    epsilon is the truncation level; it must be 0 exactly for the Original
    tag and positive for every variant.
    """

    tag: str
    epsilon: float = 0.0

    def __post_init__(self):
        if self.tag not in KIND_TAGS:
            raise ValueError(f"unknown approximation tag {self.tag!r}; choose from {KIND_TAGS}")
        if self.tag == "Original":
            if self.epsilon != 0.0:
                raise ValueError("Original carries no truncation level; epsilon must be 0")
        elif not self.epsilon > 0.0:
            raise ValueError(f"{self.tag} requires a positive truncation level, got {self.epsilon}")

    @staticmethod
    def original() -> "ApproximationKind":
        return ApproximationKind("Original", 0.0)

    @staticmethod
    def truncate_add_b(epsilon: float) -> "ApproximationKind":
        return ApproximationKind("TruncateAddB", float(epsilon))

    @staticmethod
    def truncate_rescale_w(epsilon: float) -> "ApproximationKind":
        return ApproximationKind("TruncateRescaleW", float(epsilon))

    @staticmethod
    def truncate_only(epsilon: float) -> "ApproximationKind":
        return ApproximationKind("TruncateOnly", float(epsilon))

    @staticmethod
    def variance_matched_w(epsilon: float) -> "ApproximationKind":
        return ApproximationKind("VarianceMatchedW", float(epsilon))

    def label(self) -> str:
        return self.tag if self.tag == "Original" else f"{self.tag}(eps={self.epsilon:g})"


def matched_brownian_scale(model: MarketModel, epsilon: float, t):
    """G_tilde(eps, t): Brownian rescaling that matches the total variance.

    Solves (b + G_tilde * gamma_tilde)^2 = b^2 + G^2(eps) * gamma_tilde^2
    for the root with b + G_tilde * gamma_tilde >= b, i.e.
    G_tilde = (sqrt(b^2 + G^2 gamma_tilde^2) - b) / gamma_tilde, extended by
    G_tilde = 0 where gamma_tilde vanishes.
    """
    g2 = small_jump_variance(model.jump, epsilon)
    t = np.asarray(t, dtype=float)
    b = model.coeffs.b(t)
    gt = model.coeffs.gamma_tilde(t)
    root = np.sqrt(b * b + g2 * gt * gt)
    out = np.divide(root - b, gt, out=np.zeros_like(root), where=gt != 0.0)
    return out


# ---------------------------------------------------------------------------
# Per-kind structural quantities
# ---------------------------------------------------------------------------


class KindStructure:
    """Effective coefficient loadings of one simulated variant.

    Collects, for a given ApproximationKind, the diffusion loading on W, the
    extra loading on the independent Brownian B, and the kept-jump masses, so
    that kappa(t) = b_eff^2 + sigma_b^2 + gamma_tilde^2 * g2_kept is exactly
    the quadratic variation rate the variant's price actually carries.

    sim_epsilon is the truncation the simulation applies to the jump stream:
    the kind's own epsilon for variants, and the base truncation level for
    Original (0 when all jumps can be simulated).
    """

    def __init__(self, model: MarketModel, kind: ApproximationKind, sim_epsilon=None):
        self.model = model
        self.kind = kind
        if sim_epsilon is None:
            sim_epsilon = kind.epsilon
        if kind.tag != "Original" and sim_epsilon != kind.epsilon:
            raise ValueError("only Original admits a simulation truncation override")
        self.sim_epsilon = float(sim_epsilon)
        jump = model.jump
        if self.sim_epsilon == 0.0 and not jump.finite_activity:
            raise DegenerateModelError(
                "infinite-activity jump measure cannot be simulated without a "
                "positive base truncation (set epsilon_base)"
            )
        self.g1_kept = jump.g_mass_above(self.sim_epsilon)
        self.g2_kept = jump.g2_mass_above(self.sim_epsilon)
        self.kept_intensity = jump.mass_above(self.sim_epsilon)
        if kind.tag in ("TruncateAddB", "TruncateRescaleW"):
            self._g_eps = math.sqrt(small_jump_variance(jump, kind.epsilon))
        else:
            self._g_eps = 0.0

    def b_eff(self, t):
        """Diffusion loading on the driving Brownian W."""
        c = self.model.coeffs
        t = np.asarray(t, dtype=float)
        if self.kind.tag == "TruncateRescaleW":
            return c.b(t) + self._g_eps * c.gamma_tilde(t)
        if self.kind.tag == "VarianceMatchedW":
            return c.b(t) + matched_brownian_scale(self.model, self.kind.epsilon, t) * c.gamma_tilde(t)
        return c.b(t)

    def sigma_b(self, t):
        """Loading on the independent Brownian B (zero except TruncateAddB)."""
        t = np.asarray(t, dtype=float)
        if self.kind.tag == "TruncateAddB":
            return self._g_eps * self.model.coeffs.gamma_tilde(t)
        return np.zeros_like(t)

    def gamma2_mass(self, t):
        """Kept-jump quadratic mass gamma_tilde(t)^2 * integral of g^2."""
        gt = self.model.coeffs.gamma_tilde(np.asarray(t, dtype=float))
        return gt * gt * self.g2_kept

    def kappa(self, t):
        b = self.b_eff(t)
        s = self.sigma_b(t)
        return b * b + s * s + self.gamma2_mass(t)

    def h(self, t):
        """Risk-premium ratio (a - r) / kappa of the variant."""
        k = self.kappa(t)
        bad = ~(np.asarray(k) > 0.0)
        if np.any(bad):
            raise DegenerateModelError("kappa vanishes; hedging ratios are undefined")
        return self.model.coeffs.excess(np.asarray(t, dtype=float)) / k

    def compensator(self, t):
        """Drift compensator of the kept jumps, gamma_tilde(t) * integral of g."""
        return self.model.coeffs.gamma_tilde(np.asarray(t, dtype=float)) * self.g1_kept


def kappa(model: MarketModel, t):
    """Structural variance rate kappa(t) = b^2 + gamma_tilde^2 * integral g^2.

    Parameters
    ----------
    model : MarketModel
    t : float or array

    Returns
    -------
    array
        kappa evaluated at t; raises DegenerateModelError when not positive.
    """
    t = np.asarray(t, dtype=float)
    b = model.coeffs.b(t)
    gt = model.coeffs.gamma_tilde(t)
    out = b * b + gt * gt * model.jump.g2_total()
    if not np.all(out > 0.0):
        raise DegenerateModelError("kappa(t) vanishes somewhere; model is degenerate")
    return out


def h_process(model: MarketModel, t):
    """h(t) = (a(t) - r(t)) / kappa(t)."""
    return model.coeffs.excess(np.asarray(t, dtype=float)) / kappa(model, t)


def _mvt_denominator(model: MarketModel, kind: ApproximationKind, t):
    """Denominator of the mean-variance tradeoff integrand for one kind.

    Original and TruncateAddB deliberately share the identical expression
    (and therefore identical floating-point values): adding an independent
    Brownian scaled by G(eps) restores exactly the removed variance.
    """
    c = model.coeffs
    t = np.asarray(t, dtype=float)
    if kind.tag in ("Original", "TruncateAddB"):
        b = c.b(t)
        gt = c.gamma_tilde(t)
        return b * b + gt * gt * model.jump.g2_total()
    kept = model.jump.g2_mass_above(kind.epsilon)
    gt = c.gamma_tilde(t)
    if kind.tag == "TruncateOnly":
        b = c.b(t)
        return b * b + gt * gt * kept
    if kind.tag == "TruncateRescaleW":
        g_eps = math.sqrt(small_jump_variance(model.jump, kind.epsilon))
        b = c.b(t) + g_eps * gt
        return b * b + gt * gt * kept
    if kind.tag == "VarianceMatchedW":
        b = c.b(t) + matched_brownian_scale(model, kind.epsilon, t) * gt
        return b * b + gt * gt * kept
    raise ValueError(f"unhandled tag {kind.tag}")


def mvt_process(model: MarketModel, kind: ApproximationKind, grid):
    """Mean-variance tradeoff K(t) = integral of (a-r)^2 / kappa_kind.

    Parameters
    ----------
    model : MarketModel
    kind : ApproximationKind
    grid : array of time nodes or an object with a .nodes attribute

    Returns
    -------
    array
        K sampled at the grid nodes (left-endpoint rule, K(t_0) = 0).
    """
    nodes = np.asarray(getattr(grid, "nodes", grid), dtype=float)
    if nodes.ndim != 1 or nodes.size < 2 or np.any(np.diff(nodes) <= 0.0):
        raise ValueError("grid must be an increasing 1-d array of times")
    denom = _mvt_denominator(model, kind, nodes)
    if not np.all(denom > 0.0):
        raise DegenerateModelError("kappa vanishes on the grid; K(t) is undefined")
    excess = model.coeffs.excess(nodes)
    rate = excess * excess / denom
    out = np.zeros_like(nodes)
    out[1:] = np.cumsum(rate[:-1] * np.diff(nodes))
    return out


@dataclass
class StructureDiagnostics:
    """Structural summary of a model/kind pair on a diagnostic grid."""

    grid: np.ndarray
    kappa: np.ndarray
    h: np.ndarray
    alpha_scale: np.ndarray
    K: np.ndarray
    K_sup: float
    mmm_margin: float
    lipschitz_C: float
    warnings: list


def _g_range_kept(jump: JumpSpec, eps: float, n_scan: int = 2048):
    """Range of g over the kept jump sizes, by atom enumeration or grid scan."""
    if jump.atoms is not None:
        vals = [float(jump.g(z)) for z, lam in jump.atoms if abs(z) > eps]
        if not vals:
            return 0.0, 0.0
        return min(vals), max(vals)
    lo_all, hi_all = np.inf, -np.inf
    for a, b in jump._kept_intervals(eps):
        zs = np.linspace(a, b, n_scan)
        gs = np.asarray(jump.g(zs), dtype=float)
        lo_all = min(lo_all, float(gs.min()))
        hi_all = max(hi_all, float(gs.max()))
    if lo_all is np.inf:
        return 0.0, 0.0
    return lo_all, hi_all


def check_structure(
    model: MarketModel,
    kind: ApproximationKind,
    *,
    grid_size: int = 201,
    sim_epsilon=None,
) -> StructureDiagnostics:
    """Validate a model/kind pair and collect structural diagnostics.

    Raises DegenerateModelError when kappa vanishes on the diagnostic grid.
    A violated minimal-martingale-measure positivity margin is reported as a
    warning string, not an error.

    Parameters
    ----------
    model : MarketModel
    kind : ApproximationKind
    grid_size : int
        Number of diagnostic grid nodes on [0, T].
    sim_epsilon : float, optional
        Base truncation of the simulated jump stream (Original only).

    Returns
    -------
    StructureDiagnostics
    """
    nodes = np.linspace(0.0, model.horizon, grid_size)
    struct = KindStructure(model, kind, sim_epsilon=sim_epsilon)
    kap = np.asarray(struct.kappa(nodes), dtype=float)
    if not np.all(np.isfinite(kap)):
        raise DegenerateModelError("kappa is not finite on the diagnostic grid")
    if not np.all(kap > 0.0):
        raise DegenerateModelError("kappa(t) = 0 on the diagnostic grid; model is degenerate")
    excess = model.coeffs.excess(nodes)
    h = excess / kap
    K = mvt_process(model, kind, nodes)
    lip = float(np.max(np.abs(excess) / np.sqrt(kap)))

    # minimal-martingale margin: inf over t and kept z of 1 + h * gamma_tilde * g(z)
    g_lo, g_hi = _g_range_kept(model.jump, struct.sim_epsilon)
    hg = h * model.coeffs.gamma_tilde(nodes)
    margin = float(np.min(1.0 + np.minimum(hg * g_lo, hg * g_hi)))

    warn = []
    if margin <= 0.0:
        warn.append(
            f"minimal martingale density can change sign (margin {margin:.6g}); "
            "hedging ratios remain defined but the measure interpretation fails"
        )
    return StructureDiagnostics(
        grid=nodes,
        kappa=kap,
        h=h,
        alpha_scale=h.copy(),
        K=K,
        K_sup=float(K[-1]),
        mmm_margin=margin,
        lipschitz_C=lip,
        warnings=warn,
    )
