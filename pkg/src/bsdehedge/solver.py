"""Backward solver for BSDEs with jumps on simulated path bundles.

The scheme is regression-based: at each node the continuation value and the
integrands against dW, the compensated jump martingale and dB are estimated
by weighted least squares on a basis of the current discounted prices of all
variants in the bundle.  Integrand regressions use the centered residual
X_{k+1} - C_k as regressand, which leaves the estimated conditional
expectation unchanged but removes the dominant noise term.

Z(t, .) is never represented as a function of the jump size.  The solver
carries the functional zf = int Z(z) gamma(t, z) l(dz), which is all any
driver in scope consumes, plus the projected squared norm zf^2 / ||gamma||^2
used by the norm estimates.  This is exact when Z is proportional to gamma
(single-atom measures) and an underestimate otherwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import product as _iterproduct

import numpy as np
from scipy import linalg as sla

_BETA_RULES = ("6C2+1", "8C2+1")


class SolverError(RuntimeError):
    """Backward solve failed."""


class RegressionError(SolverError):
    """Regression system unusable (rank deficiency without ridge)."""


class PicardDivergenceError(SolverError):
    """Successive Picard distances stopped contracting."""


class Driver:
    """Generator f(t, x, y, zf, zeta) with a declared Lipschitz constant.

    The constant is checked at construction by randomized probing against
    |f(p) - f(q)| <= C (|dx| + |dy| + |dzf|/z_scale + |dzeta|), where z_scale
    converts the jump functional into the L2(l) norm of the minimal
    representative (z_scale = ||gamma|| for market drivers, 1 otherwise).
    """

    def __init__(self, fn, lipschitz_C: float, *, uses_zeta: bool = False,
                 z_scale: float = 1.0, t_range=(0.0, 1.0), label: str = "",
                 check: bool = True):
        if lipschitz_C < 0.0:
            raise ValueError("lipschitz_C must be nonnegative")
        if z_scale <= 0.0:
            raise ValueError("z_scale must be positive")
        self.fn = fn
        self.lipschitz_C = float(lipschitz_C)
        self.uses_zeta = bool(uses_zeta)
        self.z_scale = float(z_scale)
        self.t_range = (float(t_range[0]), float(t_range[1]))
        self.label = label
        if check:
            self._probe_lipschitz()

    def eval(self, t, x, y, zf, zeta):
        return self.fn(t, x, y, zf, zeta)

    def _probe_lipschitz(self, n_probes: int = 100, slack: float = 1e-9):
        rng = np.random.default_rng(987654321)
        t0, t1 = self.t_range
        for _ in range(n_probes):
            t = float(rng.uniform(t0, t1))
            p, q = rng.normal(0.0, 3.0, size=(2, 4))
            f_p = float(np.asarray(self.eval(t, *(np.array([v]) for v in p)))[0])
            f_q = float(np.asarray(self.eval(t, *(np.array([v]) for v in q)))[0])
            d = np.abs(p - q)
            denom = d[0] + d[1] + d[2] / self.z_scale + d[3]
            if abs(f_p - f_q) > self.lipschitz_C * denom + slack * (1.0 + denom):
                raise ValueError(
                    f"driver {self.label or self.fn!r} violates its declared "
                    f"Lipschitz constant {self.lipschitz_C}: |df| = "
                    f"{abs(f_p - f_q):.6g} over argument distance {denom:.6g} at t={t:.4f}"
                )


@dataclass(frozen=True)
class BasisSpec:
    """Regression basis over the state vector of variant prices."""

    form: str
    degree: int = 3
    decimals: int = 8

    def __post_init__(self):
        if self.form not in ("poly", "indicator"):
            raise ValueError(f"unknown basis form {self.form!r}")
        if self.form == "poly" and self.degree < 1:
            raise ValueError("polynomial degree must be >= 1")

    @staticmethod
    def poly(degree: int = 3) -> "BasisSpec":
        return BasisSpec("poly", degree=degree)

    @staticmethod
    def indicator(decimals: int = 8) -> "BasisSpec":
        """One column per distinct (rounded) state; exact on small ensembles."""
        return BasisSpec("indicator", decimals=decimals)

    def matrix(self, states: np.ndarray) -> np.ndarray:
        states = np.atleast_2d(np.asarray(states, dtype=float))
        if states.ndim != 2:
            raise ValueError("states must be (n_paths, n_variables)")
        n, v = states.shape
        if self.form == "indicator":
            keys = np.round(states, self.decimals)
            uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
            out = np.zeros((n, uniq.shape[0]))
            out[np.arange(n), np.ravel(inverse)] = 1.0
            return out
        exps = sorted(
            (e for e in _iterproduct(range(self.degree + 1), repeat=v)
             if sum(e) <= self.degree),
            key=lambda e: (sum(e), e),
        )
        out = np.empty((n, len(exps)))
        for j, e in enumerate(exps):
            col = np.ones(n)
            for i, p in enumerate(e):
                if p:
                    col = col * states[:, i] ** p
            out[:, j] = col
        return out


@dataclass
class SolverConfig:
    basis: BasisSpec = field(default_factory=BasisSpec.poly)
    ridge: float = 1e-8
    mode: str = "one_step"
    beta: float | None = None
    beta_rule: str = "6C2+1"
    implicit_sweeps: int = 0
    picard_max_iters: int = 60
    picard_tol: float = 1e-12
    divergence_patience: int = 3

    def __post_init__(self):
        if self.mode not in ("one_step", "picard"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.beta is not None and self.beta < 0.0:
            raise ValueError("beta must be nonnegative")
        if self.beta_rule not in _BETA_RULES:
            raise ValueError(f"beta_rule must be one of {_BETA_RULES}")
        if self.ridge < 0.0:
            raise ValueError("ridge must be nonnegative")

    def resolve_beta(self, driver: Driver) -> float:
        if self.beta is not None:
            return self.beta
        c2 = driver.lipschitz_C**2
        return 6.0 * c2 + 1.0 if self.beta_rule == "6C2+1" else 8.0 * c2 + 1.0


@dataclass
class BSDEJSolution:
    """Backward solution on a bundle: value, integrands, diagnostics.

    x has shape (n_paths, n_steps + 1); the integrand arrays and cond_mean
    have shape (n_paths, n_steps).  zf is int Z gamma l; z_norm_sq its
    projected squared L2(l) norm; zeta stays zero unless the driver uses it.
    """

    kind: object
    grid: object
    weights: np.ndarray
    x: np.ndarray
    y: np.ndarray
    zf: np.ndarray
    z_norm_sq: np.ndarray
    zeta: np.ndarray
    cond_mean: np.ndarray
    z_scale: np.ndarray
    terminal: np.ndarray
    driver: Driver
    config: SolverConfig
    diagnostics: dict


@dataclass(frozen=True)
class BetaNorms:
    x_norm: float
    y_norm: float
    z_norm: float
    zeta_norm: float
    sup_norm: float

    @property
    def total(self) -> float:
        return self.x_norm + self.y_norm + self.z_norm + self.zeta_norm


class _NodeRegression:
    """Weighted (ridge) least squares reused across regressands at one node."""

    def __init__(self, phi: np.ndarray, weights: np.ndarray, ridge: float, node: int):
        self.phi = phi
        self.node = node
        self.weights = weights
        self.p = phi.shape[1]
        self._wphi = phi * weights[:, None]
        if ridge > 0.0:
            a = self._wphi.T @ phi
            a[np.diag_indices_from(a)] += ridge
            self._chol = sla.cho_factor(a)
            self._sw = None
        else:
            self._chol = None
            self._sw = np.sqrt(weights)
            rank = np.linalg.matrix_rank(self._sw[:, None] * phi)
            if rank < self.p:
                raise RegressionError(
                    f"node {node}: basis rank {rank} < {self.p} with ridge 0; "
                    "add ridge or shrink the basis"
                )

    def fit(self, v: np.ndarray):
        """Returns (fitted values, weighted residual rms)."""
        if self._chol is not None:
            coef = sla.cho_solve(self._chol, self._wphi.T @ v)
        else:
            coef = np.linalg.lstsq(self._sw[:, None] * self.phi, self._sw * v, rcond=None)[0]
        fitted = self.phi @ coef
        resid = v - fitted
        rms = math.sqrt(float(np.sum(self.weights * resid * resid)))
        return fitted, rms


class _SolveContext:
    """Grid-indexed pieces shared by one_step and Picard sweeps."""

    def __init__(self, bundle, kind, terminal, driver, config):
        if kind not in bundle.prices:
            raise ValueError(f"bundle does not contain kind {kind!r}")
        terminal = np.asarray(terminal, dtype=float)
        if terminal.shape != (bundle.n_paths,):
            raise ValueError(
                f"terminal has shape {terminal.shape}, expected ({bundle.n_paths},)"
            )
        self.bundle = bundle
        self.kind = kind
        self.terminal = terminal
        self.driver = driver
        self.config = config
        self.grid = bundle.grid
        self.n = bundle.n_paths
        self.K = self.grid.n_steps
        self.dt = self.grid.dt
        self.w = bundle.weights
        struct = bundle.structs[kind]
        t_left = self.grid.nodes[:-1]
        gt = np.broadcast_to(
            np.asarray(bundle.model.coeffs.gamma_tilde(t_left), dtype=float), t_left.shape
        )
        self.z_scale = gt * math.sqrt(struct.g2_kept)
        self.has_jumps = struct.g2_kept > 0.0
        self.dm = bundle.jump_martingale_increments(kind) if self.has_jumps else None
        self.regs = [
            _NodeRegression(
                config.basis.matrix(
                    np.column_stack([bundle.prices[kk][:, k] for kk in bundle.kinds])
                ),
                self.w,
                config.ridge,
                k,
            )
            for k in range(self.K)
        ]

    def check_finite(self, arr, node):
        bad = ~np.isfinite(arr) & self.bundle.alive
        if np.any(bad):
            raise SolverError(
                f"non-finite solver values at node {node}, path {int(np.argmax(bad))}"
            )

    def sweep(self, frozen=None):
        """One backward pass.  With frozen=(y, zf, zeta) the driver arguments
        come from those arrays (Picard outer iteration); otherwise from the
        estimates of the current pass."""
        n, K, dt = self.n, self.K, self.dt
        x = np.empty((n, K + 1))
        x[:, K] = self.terminal
        y = np.zeros((n, K))
        zf = np.zeros((n, K))
        zeta = np.zeros((n, K))
        cmean = np.empty((n, K))
        rms = {
            "value_residual_rms": np.zeros(K),
            "y_residual_rms": np.zeros(K),
            "zf_residual_rms": np.zeros(K),
            "zeta_residual_rms": np.zeros(K),
        }
        dW, dB = self.bundle.dW, self.bundle.dB
        for k in range(K - 1, -1, -1):
            reg = self.regs[k]
            v = x[:, k + 1]
            c, rms["value_residual_rms"][k] = reg.fit(v)
            resid = v - c
            y[:, k], rms["y_residual_rms"][k] = reg.fit(resid * dW[:, k])
            y[:, k] /= dt
            if self.has_jumps:
                zf[:, k], rms["zf_residual_rms"][k] = reg.fit(resid * self.dm[:, k])
                zf[:, k] /= dt
            if self.driver.uses_zeta:
                zeta[:, k], rms["zeta_residual_rms"][k] = reg.fit(resid * dB[:, k])
                zeta[:, k] /= dt
            if frozen is None:
                fy, fzf, fzeta = y[:, k], zf[:, k], zeta[:, k]
            else:
                fy, fzf, fzeta = (a[:, k] for a in frozen)
            t_k = self.grid.nodes[k]
            xk = c + np.asarray(self.driver.eval(t_k, c, fy, fzf, fzeta)) * dt
            for _ in range(self.config.implicit_sweeps):
                xk = c + np.asarray(self.driver.eval(t_k, xk, fy, fzf, fzeta)) * dt
            self.check_finite(xk, k)
            x[:, k] = xk
            cmean[:, k] = c
        return x, y, zf, zeta, cmean, rms

    def package(self, x, y, zf, zeta, cmean, rms, extra_diag=None):
        with np.errstate(divide="ignore", invalid="ignore"):
            z_norm_sq = np.where(
                self.z_scale[None, :] > 0.0, (zf / self.z_scale[None, :]) ** 2, 0.0
            )
        diagnostics = {
            "basis_size": self.regs[0].p if self.regs else 0,
            "n_effective": float(1.0 / np.sum(self.w**2)),
            **rms,
        }
        if extra_diag:
            diagnostics.update(extra_diag)
        return BSDEJSolution(
            kind=self.kind, grid=self.grid, weights=self.w, x=x, y=y, zf=zf,
            z_norm_sq=z_norm_sq, zeta=zeta, cond_mean=cmean, z_scale=self.z_scale,
            terminal=self.terminal, driver=self.driver, config=self.config,
            diagnostics=diagnostics,
        )


def solve(bundle, kind, terminal, driver: Driver, config: SolverConfig | None = None) -> BSDEJSolution:
    """One-step backward solve of -dX = f dt - Y dW - Z dN~ - zeta dB, X_T given.

    At node k the continuation value C_k and the integrands are regression
    estimates; the driver is applied explicitly at C_k (plus optional
    implicit sweeps).  X at the terminal node equals the supplied samples
    bitwise.
    """
    ctx = _SolveContext(bundle, kind, terminal, driver, config or SolverConfig())
    return ctx.package(*ctx.sweep())


def picard_solve(bundle, kind, terminal, driver: Driver, config: SolverConfig) -> BSDEJSolution:
    """Outer Picard iteration: driver integrand arguments frozen at the
    previous iterate, starting from the zero process.

    Stops when the beta-norm distance between successive iterates drops
    below picard_tol (a distance of exactly zero means the previous iterate
    was already the fixed point).  Three consecutive non-contracting steps
    raise PicardDivergenceError.
    """
    if config.mode != "picard":
        raise ValueError("picard_solve requires config.mode == 'picard'")
    ctx = _SolveContext(bundle, kind, terminal, driver, config)
    beta = config.resolve_beta(driver)
    n, K = ctx.n, ctx.K
    prev = (
        np.zeros((n, K + 1)), np.zeros((n, K)), np.zeros((n, K)), np.zeros((n, K)),
    )
    trace = []
    bad_streak = 0
    converged = False
    fixed_point_iter = None
    result = None
    for m in range(1, config.picard_max_iters + 1):
        x, y, zf, zeta, cmean, rms = ctx.sweep(frozen=prev[1:])
        dist = math.sqrt(
            _integral_norms(
                ctx.grid, ctx.w, beta,
                x=x - prev[0], y=y - prev[1],
                zf=zf - prev[2], zeta=zeta - prev[3],
                z_scale=ctx.z_scale,
            )
        )
        trace.append(dist)
        result = (x, y, zf, zeta, cmean, rms)
        if dist <= config.picard_tol:
            converged = True
            fixed_point_iter = m - 1 if dist == 0.0 else m
            break
        if len(trace) >= 2:
            ratio = trace[-1] / trace[-2]
            bad_streak = bad_streak + 1 if ratio >= 1.0 else 0
            if bad_streak >= config.divergence_patience:
                raise PicardDivergenceError(
                    f"no contraction for {bad_streak} iterations, last distance "
                    f"ratio {ratio:.4f} at iteration {m}"
                )
        prev = (x, y, zf, zeta)
    ratios = [trace[i] / trace[i - 1] for i in range(1, len(trace)) if trace[i - 1] > 0.0]
    extra = {
        "picard_distances": trace,
        "picard_ratios": ratios,
        "picard_converged": converged,
        "picard_iterations": len(trace),
        "picard_fixed_point_iteration": fixed_point_iter,
        "picard_beta": beta,
    }
    return ctx.package(*result, extra_diag=extra)


def _integral_norms(grid, weights, beta, x=None, y=None, zf=None, zeta=None, z_scale=None):
    """Sum of the beta-weighted integral norms (left-endpoint rule)."""
    t_left = grid.nodes[:-1]
    ew = np.exp(beta * t_left) * grid.dt
    total = 0.0
    if x is not None:
        total += float(np.sum(weights @ (x[:, :-1] ** 2 * ew[None, :])))
    if y is not None:
        total += float(np.sum(weights @ (y**2 * ew[None, :])))
    if zf is not None:
        with np.errstate(divide="ignore", invalid="ignore"):
            zn = np.where(z_scale[None, :] > 0.0, (zf / z_scale[None, :]) ** 2, 0.0)
        total += float(np.sum(weights @ (zn * ew[None, :])))
    if zeta is not None:
        total += float(np.sum(weights @ (zeta**2 * ew[None, :])))
    return total


def beta_norms(solution: BSDEJSolution, beta: float) -> BetaNorms:
    """Exponentially weighted solution norms.

    Integral norms use the left-endpoint rule E[sum e^{beta t_k} (.)^2 dt];
    the sup norm is E[e^{beta T} max_k X_k^2].
    """
    grid, w = solution.grid, solution.weights
    t_left = grid.nodes[:-1]
    ew = np.exp(beta * t_left) * grid.dt
    x_norm = float(np.sum(w @ (solution.x[:, :-1] ** 2 * ew[None, :])))
    y_norm = float(np.sum(w @ (solution.y**2 * ew[None, :])))
    z_norm = float(np.sum(w @ (solution.z_norm_sq * ew[None, :])))
    zeta_norm = float(np.sum(w @ (solution.zeta**2 * ew[None, :])))
    sup_norm = float(
        math.exp(beta * grid.horizon) * np.sum(w * np.max(solution.x**2, axis=1))
    )
    return BetaNorms(x_norm, y_norm, z_norm, zeta_norm, sup_norm)


def apriori_bound_check(solution: BSDEJSolution, terminal) -> dict:
    """Checks the energy bound of the solution against the terminal moment.

    For a driver f with f(t,0,0,0,0) = 0 and Lipschitz constant C, Ito
    calculus on e^{beta t} X^2 with beta = 6C^2 + 2C + 1 gives

        x_norm + y_norm + z_norm + zeta_norm <= 2 e^{beta T} E[xi^2].

    Report-only: returns the measured ratio and the derived constant.
    """
    driver = solution.driver
    terminal = np.asarray(terminal, dtype=float)
    for t in solution.grid.nodes[:-1]:
        z = np.zeros(1)
        f0 = float(np.asarray(driver.eval(float(t), z, z, z, z))[0])
        if abs(f0) > 1e-12:
            raise ValueError(
                "a-priori bound check requires a driver vanishing at the zero "
                f"state; got f({t:.4f}, 0) = {f0:.3g}"
            )
    c = driver.lipschitz_C
    beta = 6.0 * c * c + 2.0 * c + 1.0
    norms = beta_norms(solution, beta)
    c_bound = 2.0 * math.exp(beta * solution.grid.horizon)
    rhs_mean_sq = float(np.sum(solution.weights * terminal**2))
    lhs = norms.total
    rhs = c_bound * rhs_mean_sq
    ratio = 0.0 if lhs == 0.0 else lhs / rhs
    return {
        "lipschitz_C": c,
        "beta": beta,
        "c_bound": c_bound,
        "lhs": lhs,
        "rhs": rhs,
        "terminal_mean_sq": rhs_mean_sq,
        "ratio": ratio,
        "passed": lhs <= rhs,
    }


def regression_noise_scale(solution: BSDEJSolution, component: str = "zeta") -> np.ndarray:
    """Per-node noise scale of a fitted integrand that is truly zero.

    A regression of a mean-zero regressand with residual rms sigma onto p
    basis functions over n_eff effective paths produces fitted values of rms
    about sigma sqrt(p / n_eff); dividing by dt gives the integrand scale.
    """
    key = f"{component}_residual_rms"
    if key not in solution.diagnostics:
        raise KeyError(f"unknown integrand component {component!r}")
    p = solution.diagnostics["basis_size"]
    n_eff = solution.diagnostics["n_effective"]
    return solution.diagnostics[key] * math.sqrt(p / n_eff) / solution.grid.dt
