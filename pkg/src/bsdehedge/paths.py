"""Path simulation for coupled truncation variants of a jump-diffusion price.

All variants in one bundle share the same Brownian increments and the same
jump stream (drawn once at the base truncation epsilon_base and filtered per
variant), so cross-variant differences are free of independent Monte Carlo
noise.  Paths are generated in fixed-size blocks with RNG substreams derived
deterministically from (seed, stream, block), which makes outputs independent
of scheduling and byte-identical across reruns.
"""

from __future__ import annotations

import struct as _struct
from dataclasses import dataclass

import numpy as np
from scipy import integrate

from .market import ApproximationKind, JumpSpec, KindStructure, MarketModel

_STREAMS = {"W": 0, "B": 1, "jump_counts": 2, "jump_marks": 3}
_TABLE_SIZE = 4096
_AUTO_RETAIN_LIMIT = 2_000_000


class SimulationError(RuntimeError):
    """Path generation failed (blow-up, exclusion budget, bad payoff)."""


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid on [0, horizon] with n_steps steps."""

    horizon: float
    n_steps: int

    def __post_init__(self):
        if self.horizon <= 0.0 or self.n_steps < 1:
            raise ValueError(f"bad grid: horizon={self.horizon}, n_steps={self.n_steps}")

    @property
    def dt(self) -> float:
        return self.horizon / self.n_steps

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.n_steps + 1)


@dataclass(frozen=True)
class RngConfig:
    """Seed and blocking layout of the deterministic RNG substreams."""

    seed: int
    block_size: int = 2048

    def generator(self, stream: str, block: int) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(_STREAMS[stream], block))
        return np.random.Generator(np.random.PCG64(ss))


@dataclass
class JumpRecords:
    """Flat arrays of individual jumps: (path, step, time, mark) per record."""

    path: np.ndarray
    step: np.ndarray
    time: np.ndarray
    mark: np.ndarray

    def __len__(self):
        return self.mark.size


class JumpSampler:
    """Samples marks of the kept jumps {|z| > eps} of a measure.

    Density measures use per-interval inverse-CDF tables (piecewise-linear,
    monotone interpolation through _TABLE_SIZE nodes, geometrically refined
    toward the small-|z| end where power-law densities concentrate).
    """

    def __init__(self, jump: JumpSpec, eps: float, table_size: int = _TABLE_SIZE):
        self.jump = jump
        self.eps = float(eps)
        self.intensity = jump.mass_above(eps)
        if self.intensity <= 0.0:
            return
        if jump.atoms is not None:
            kept = [(z, lam) for z, lam in jump.atoms if abs(z) > eps]
            self._values = np.array([z for z, _ in kept])
            self._probs = np.array([lam for _, lam in kept]) / self.intensity
            return
        self._tables = []
        masses = []
        for a, b in jump._kept_intervals(eps):
            grid = self._node_grid(a, b, table_size)
            cdf = np.zeros(grid.size)
            # cell-wise adaptive quadrature keeps the table accurate even for
            # steep power-law cells near the truncation boundary
            for i in range(grid.size - 1):
                cdf[i + 1] = cdf[i] + integrate.quad(jump.density, grid[i], grid[i + 1])[0]
            masses.append(cdf[-1])
            self._tables.append((grid, cdf / cdf[-1]))
        self._probs = np.asarray(masses) / sum(masses)

    @staticmethod
    def _node_grid(a, b, size):
        if a > 0.0:
            return np.geomspace(a, b, size)
        if b < 0.0:
            return -np.geomspace(-b, -a, size)[::-1]
        # an endpoint sits exactly at 0 (finite-activity density, eps = 0):
        # cluster the nodes quadratically toward the origin
        u = np.linspace(0.0, 1.0, size) ** 2
        return a + (b - a) * u if a == 0.0 else a + (b - a) * (1.0 - u[::-1])

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if n == 0:
            return np.empty(0)
        return self.sample_from_uniforms(rng.random((n, 2)))

    def sample_from_uniforms(self, u: np.ndarray) -> np.ndarray:
        """Map (n, 2) uniforms to marks: column 0 picks the component,
        column 1 inverts its CDF.  One row per jump keeps draw consumption
        aligned when the total jump count varies between runs."""
        n = u.shape[0]
        if n == 0:
            return np.empty(0)
        if self.intensity <= 0.0:
            raise SimulationError("no kept jump mass to sample from")
        cum = np.cumsum(self._probs)
        if self.jump.atoms is not None:
            idx = np.minimum(np.searchsorted(cum, u[:, 0], side="right"), cum.size - 1)
            return self._values[idx]
        which = np.minimum(np.searchsorted(cum, u[:, 0], side="right"), cum.size - 1)
        out = np.empty(n)
        for i, (grid, cdf) in enumerate(self._tables):
            sel = which == i
            out[sel] = np.interp(u[sel, 1], cdf, grid)
        return out


def sample_jump_marks(jump: JumpSpec, epsilon: float, n: int, rng) -> np.ndarray:
    """Draw n kept-jump marks conditioned on {|z| > epsilon}.

    Parameters
    ----------
    jump : JumpSpec
    epsilon : float
        Truncation level of the kept stream.
    n : int
    rng : numpy Generator or RngConfig (block 0 of the mark stream is used)

    Returns
    -------
    array of marks
    """
    if isinstance(rng, RngConfig):
        rng = rng.generator("jump_marks", 0)
    return JumpSampler(jump, epsilon).sample(rng, n)


class PathBundle:
    """Coupled simulation of several variants on one noise realization.

    prices[kind] holds discounted prices, shape (n_paths, n_steps + 1).
    dW and dB are the Brownian increments, shape (n_paths, n_steps).
    weights are probability weights over paths (excluded paths carry 0).
    Individual jumps are retained in .records when the stream is small
    enough (or on request); per-step jump sums survive either way.
    """

    def __init__(self, model, kinds, grid, dW, dB, weights, alive, prices, structs,
                 gsum_by_eps, records, epsilon_base, n_excluded):
        self.model = model
        self.kinds = tuple(kinds)
        self.grid = grid
        self.dW = dW
        self.dB = dB
        self.weights = weights
        self.alive = alive
        self.prices = prices
        self.structs = structs
        self._gsum = gsum_by_eps
        self.records = records
        self.epsilon_base = epsilon_base
        self.n_excluded = n_excluded
        self._mart_cache = {}

    @property
    def n_paths(self) -> int:
        return self.dW.shape[0]

    def kept_epsilon(self, kind: ApproximationKind) -> float:
        return self.structs[kind].sim_epsilon

    def jump_gsum(self, kind: ApproximationKind) -> np.ndarray:
        """Per-step sums of g(z) over the kind's kept jumps, (n_paths, n_steps)."""
        return self._gsum[self.kept_epsilon(kind)]

    def jump_martingale_increments(self, kind: ApproximationKind) -> np.ndarray:
        """Compensated jump increments with weight gamma(t, z), (n_paths, n_steps)."""
        if kind not in self._mart_cache:
            struct = self.structs[kind]
            t = self.grid.nodes[:-1]
            gt = np.asarray(self.model.coeffs.gamma_tilde(t), dtype=float)
            comp = struct.g1_kept * self.grid.dt
            self._mart_cache[kind] = gt[None, :] * (self.jump_gsum(kind) - comp)
        return self._mart_cache[kind]

    def jump_lists(self):
        """Per-path lists of (time, mark); requires retained records."""
        if self.records is None:
            raise SimulationError(
                "individual jumps were not retained for this bundle "
                "(stream too large); rerun with retain_jumps=True"
            )
        out = [[] for _ in range(self.n_paths)]
        order = np.argsort(self.records.path, kind="stable")
        for i in order:
            out[self.records.path[i]].append((self.records.time[i], self.records.mark[i]))
        return out

    def discount_factors(self) -> np.ndarray:
        """Bank account values exp(int_0^t r) at the grid nodes."""
        nodes = self.grid.nodes
        r = np.asarray(self.model.coeffs.r(nodes), dtype=float)
        steps = 0.5 * (r[:-1] + r[1:]) * np.diff(nodes)
        return np.exp(np.concatenate(([0.0], np.cumsum(steps))))


def _resolve_epsilon_base(model, kinds, epsilon_base):
    variant_eps = [k.epsilon for k in kinds if k.epsilon > 0.0]
    if epsilon_base is None:
        if model.jump.finite_activity:
            epsilon_base = 0.0
        elif variant_eps:
            epsilon_base = min(variant_eps) / 4.0
        else:
            raise SimulationError(
                "infinite-activity measure needs an explicit epsilon_base to "
                "simulate the untruncated dynamics"
            )
    epsilon_base = float(epsilon_base)
    if variant_eps and epsilon_base > min(variant_eps):
        raise SimulationError(
            f"epsilon_base={epsilon_base} exceeds the finest variant truncation "
            f"{min(variant_eps)}; variants cannot filter the shared jump stream"
        )
    return epsilon_base


def _advance_prices(model, structs, grid, dW, dB, gsum_by_eps):
    """Multiplicative Euler stepping shared by simulation and injected noise."""
    nodes = grid.nodes
    dt = grid.dt
    n_paths = dW.shape[0]
    c = model.coeffs
    prices = {}
    alive = np.ones(n_paths, dtype=bool)
    for kind, struct in structs.items():
        s = np.empty((n_paths, grid.n_steps + 1))
        s[:, 0] = model.s0
        gsum = gsum_by_eps[struct.sim_epsilon]
        for k in range(grid.n_steps):
            t = nodes[k]
            gt = float(np.asarray(c.gamma_tilde(t)))
            factor = (
                1.0
                + float(np.asarray(c.excess(t))) * dt
                + float(np.asarray(struct.b_eff(t))) * dW[:, k]
                + float(np.asarray(struct.sigma_b(t))) * dB[:, k]
                + gt * gsum[:, k]
                - float(struct.g1_kept) * gt * dt
            )
            alive &= factor > 0.0
            s[:, k + 1] = s[:, k] * factor
        prices[kind] = s
    return prices, alive


def _build_structs(model, kinds, epsilon_base):
    structs = {}
    for kind in kinds:
        sim_eps = epsilon_base if kind.tag == "Original" else None
        structs[kind] = KindStructure(model, kind, sim_epsilon=sim_eps)
    return structs


def build_bundle_from_increments(
    model: MarketModel,
    kinds,
    grid: TimeGrid,
    dW: np.ndarray,
    dB=None,
    records: JumpRecords | None = None,
    weights=None,
    epsilon_base: float = 0.0,
    max_exclusion_fraction: float = 1.0,
) -> PathBundle:
    """Assemble a bundle from externally supplied noise (exact small ensembles)."""
    kinds = tuple(kinds)
    if len(set(kinds)) != len(kinds) or not kinds:
        raise ValueError("kinds must be a non-empty collection of distinct labels")
    n_paths = dW.shape[0]
    if dB is None:
        dB = np.zeros_like(dW)
    structs = _build_structs(model, kinds, epsilon_base)
    eps_levels = sorted({s.sim_epsilon for s in structs.values()})
    gsum_by_eps = {e: np.zeros((n_paths, grid.n_steps)) for e in eps_levels}
    if records is not None and len(records):
        gvals = np.asarray(model.jump.g(records.mark), dtype=float)
        flat = records.path.astype(np.int64) * grid.n_steps + records.step.astype(np.int64)
        for e in eps_levels:
            kept = np.abs(records.mark) > e
            gsum_by_eps[e][:] = np.bincount(
                flat[kept], weights=gvals[kept], minlength=n_paths * grid.n_steps
            ).reshape(n_paths, grid.n_steps)
    prices, alive = _advance_prices(model, structs, grid, dW, dB, gsum_by_eps)
    if weights is None:
        weights = np.full(n_paths, 1.0 / n_paths)
    weights = np.where(alive, np.asarray(weights, dtype=float), 0.0)
    n_excluded = int(n_paths - alive.sum())
    if n_excluded > max_exclusion_fraction * n_paths:
        raise SimulationError(
            f"{n_excluded} of {n_paths} paths hit a nonpositive price factor "
            f"(budget {max_exclusion_fraction:.2%})"
        )
    if n_excluded:
        weights = weights / weights.sum()
    return PathBundle(
        model, kinds, grid, dW, dB, weights, alive, prices, structs,
        gsum_by_eps, records, epsilon_base, n_excluded,
    )


def simulate(
    model: MarketModel,
    kinds,
    grid: TimeGrid,
    n_paths: int,
    rng: RngConfig,
    *,
    epsilon_base=None,
    retain_jumps=None,
    max_exclusion_fraction: float = 1e-3,
) -> PathBundle:
    """Simulate coupled discounted-price paths for a set of variants.

    Parameters
    ----------
    model : MarketModel
    kinds : iterable of ApproximationKind
        Variants to realize on the shared noise.  Original is simulated with
        the jump stream truncated at epsilon_base.
    grid : TimeGrid
    n_paths : int
    rng : RngConfig
        Deterministic substream layout; identical (model, kinds, grid,
        n_paths, rng) inputs reproduce the bundle bit for bit.
    epsilon_base : float, optional
        Truncation of the generated jump stream.  Defaults to 0 for
        finite-activity measures and to a quarter of the finest variant
        truncation otherwise.
    retain_jumps : bool, optional
        Keep individual jump records.  Default: automatic, retained while the
        expected stream stays below a few million records.
    max_exclusion_fraction : float
        Run fails when more than this fraction of paths hits a nonpositive
        price factor.

    Returns
    -------
    PathBundle
    """
    kinds = tuple(kinds)
    if len(set(kinds)) != len(kinds) or not kinds:
        raise ValueError("kinds must be a non-empty collection of distinct labels")
    epsilon_base = _resolve_epsilon_base(model, kinds, epsilon_base)
    structs = _build_structs(model, kinds, epsilon_base)
    eps_levels = sorted({s.sim_epsilon for s in structs.values()})

    cache = model.jump.__dict__.setdefault("_sampler_cache", {})
    if epsilon_base not in cache:
        cache[epsilon_base] = JumpSampler(model.jump, epsilon_base)
    sampler = cache[epsilon_base]
    lam = sampler.intensity * grid.horizon
    if retain_jumps is None:
        retain_jumps = n_paths * lam <= _AUTO_RETAIN_LIMIT

    dW = np.empty((n_paths, grid.n_steps))
    dB = np.empty((n_paths, grid.n_steps))
    gsum_by_eps = {e: np.zeros((n_paths, grid.n_steps)) for e in eps_levels}
    rec_chunks = []
    sqrt_dt = np.sqrt(grid.dt)

    n_blocks = (n_paths + rng.block_size - 1) // rng.block_size
    for blk in range(n_blocks):
        lo = blk * rng.block_size
        hi = min(lo + rng.block_size, n_paths)
        m = hi - lo
        dW[lo:hi] = rng.generator("W", blk).standard_normal((m, grid.n_steps)) * sqrt_dt
        dB[lo:hi] = rng.generator("B", blk).standard_normal((m, grid.n_steps)) * sqrt_dt
        if lam <= 0.0:
            continue
        counts = rng.generator("jump_counts", blk).poisson(lam, size=m)
        total = int(counts.sum())
        if total == 0:
            continue
        # one uniform row per jump (time, component, quantile): keeps the
        # consumed stream aligned when a longer run yields more jumps, so
        # the first n paths of a larger run reproduce a smaller run exactly
        u = rng.generator("jump_marks", blk).random((total, 3))
        times = u[:, 0] * grid.horizon
        marks = sampler.sample_from_uniforms(u[:, 1:])
        path_idx = np.repeat(np.arange(lo, hi, dtype=np.int64), counts)
        step_idx = np.minimum((times / grid.dt).astype(np.int64), grid.n_steps - 1)
        gvals = np.asarray(model.jump.g(marks), dtype=float)
        flat = path_idx * grid.n_steps + step_idx
        for e in eps_levels:
            kept = np.abs(marks) > e if e > epsilon_base else slice(None)
            gsum_by_eps[e] += np.bincount(
                flat[kept], weights=gvals[kept], minlength=n_paths * grid.n_steps
            ).reshape(n_paths, grid.n_steps)
        if retain_jumps:
            rec_chunks.append((path_idx, step_idx, times, marks))

    records = None
    if retain_jumps:
        if rec_chunks:
            records = JumpRecords(
                path=np.concatenate([c[0] for c in rec_chunks]),
                step=np.concatenate([c[1] for c in rec_chunks]),
                time=np.concatenate([c[2] for c in rec_chunks]),
                mark=np.concatenate([c[3] for c in rec_chunks]),
            )
        else:
            records = JumpRecords(*(np.empty(0, dtype=d) for d in (np.int64, np.int64, float, float)))

    prices, alive = _advance_prices(model, structs, grid, dW, dB, gsum_by_eps)
    weights = np.where(alive, 1.0 / n_paths, 0.0)
    n_excluded = int(n_paths - alive.sum())
    if n_excluded > max_exclusion_fraction * n_paths:
        raise SimulationError(
            f"{n_excluded} of {n_paths} paths hit a nonpositive price factor "
            f"(budget {max_exclusion_fraction:.2%}); the model is too violent "
            "for the multiplicative Euler scheme at this step size"
        )
    if n_excluded:
        weights = weights / weights.sum()
    return PathBundle(
        model, kinds, grid, dW, dB, weights, alive, prices, structs,
        gsum_by_eps, records, epsilon_base, n_excluded,
    )


def claim_payoff(bundle: PathBundle, kind: ApproximationKind, payoff, *, pathwise=False):
    """Discounted claim samples for one variant.

    The payoff callable receives undiscounted terminal prices (or, with
    pathwise=True, the full undiscounted price matrix) and its result is
    discounted by the bank account at the horizon.

    Returns
    -------
    array (n_paths,)
        Discounted payoff; excluded paths carry 0.
    """
    disc = bundle.discount_factors()
    s_disc = bundle.prices[kind]
    if pathwise:
        raw = np.asarray(payoff(s_disc * disc[None, :]), dtype=float)
    else:
        raw = np.asarray(payoff(s_disc[:, -1] * disc[-1]), dtype=float)
    if raw.shape != (bundle.n_paths,):
        raise ValueError(f"payoff returned shape {raw.shape}, expected ({bundle.n_paths},)")
    out = raw / disc[-1]
    bad = ~np.isfinite(out) & bundle.alive
    if np.any(bad):
        raise SimulationError(f"payoff not finite on path {int(np.argmax(bad))}")
    return np.where(bundle.alive, out, 0.0)


# ---------------------------------------------------------------------------
# binary persistence
# ---------------------------------------------------------------------------

_MAGIC = b"BHB1"
_VERSION = 1


def save_bundle(bundle: PathBundle, path) -> None:
    """Serialize a bundle: versioned header then little-endian float64 arrays.

    Array layout is row-major [path][step]; prices include the initial node.
    """
    with open(path, "wb") as f:
        f.write(_MAGIC)
        flags = 1 if bundle.records is not None else 0
        f.write(_struct.pack(
            "<IQIddI", _VERSION, bundle.n_paths, bundle.grid.n_steps,
            bundle.grid.horizon, bundle.epsilon_base, flags,
        ))
        f.write(_struct.pack("<I", len(bundle.kinds)))
        for kind in bundle.kinds:
            tag = kind.tag.encode()
            f.write(_struct.pack("<I", len(tag)))
            f.write(tag)
            f.write(_struct.pack("<d", kind.epsilon))
        for arr in (bundle.dW, bundle.dB, bundle.weights):
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(bundle.alive, dtype="<u1").tobytes())
        for kind in bundle.kinds:
            f.write(np.ascontiguousarray(bundle.prices[kind], dtype="<f8").tobytes())
        if bundle.records is not None:
            f.write(_struct.pack("<Q", len(bundle.records)))
            f.write(np.ascontiguousarray(bundle.records.path, dtype="<i8").tobytes())
            f.write(np.ascontiguousarray(bundle.records.step, dtype="<i8").tobytes())
            f.write(np.ascontiguousarray(bundle.records.time, dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(bundle.records.mark, dtype="<f8").tobytes())


@dataclass
class LoadedBundle:
    """Plain-array view of a serialized bundle (no model attached)."""

    n_paths: int
    n_steps: int
    horizon: float
    epsilon_base: float
    kinds: list
    dW: np.ndarray
    dB: np.ndarray
    weights: np.ndarray
    alive: np.ndarray
    prices: dict
    records: JumpRecords | None


def load_bundle(path) -> LoadedBundle:
    """Read a bundle file written by save_bundle."""
    with open(path, "rb") as f:
        if f.read(4) != _MAGIC:
            raise SimulationError(f"{path}: not a bundle file")
        version, n_paths, n_steps, horizon, eps_base, flags = _struct.unpack(
            "<IQIddI", f.read(_struct.calcsize("<IQIddI"))
        )
        if version != _VERSION:
            raise SimulationError(f"{path}: unsupported bundle version {version}")
        (n_kinds,) = _struct.unpack("<I", f.read(4))
        kinds = []
        for _ in range(n_kinds):
            (tlen,) = _struct.unpack("<I", f.read(4))
            tag = f.read(tlen).decode()
            (eps,) = _struct.unpack("<d", f.read(8))
            kinds.append(ApproximationKind(tag, eps))

        def read_f8(shape):
            n = int(np.prod(shape))
            return np.frombuffer(f.read(8 * n), dtype="<f8").reshape(shape).copy()

        dW = read_f8((n_paths, n_steps))
        dB = read_f8((n_paths, n_steps))
        weights = read_f8((n_paths,))
        alive = np.frombuffer(f.read(n_paths), dtype="<u1").astype(bool)
        prices = {k: read_f8((n_paths, n_steps + 1)) for k in kinds}
        records = None
        if flags & 1:
            (n_rec,) = _struct.unpack("<Q", f.read(8))
            records = JumpRecords(
                path=np.frombuffer(f.read(8 * n_rec), dtype="<i8").copy(),
                step=np.frombuffer(f.read(8 * n_rec), dtype="<i8").copy(),
                time=np.frombuffer(f.read(8 * n_rec), dtype="<f8").copy(),
                mark=np.frombuffer(f.read(8 * n_rec), dtype="<f8").copy(),
            )
    return LoadedBundle(
        n_paths, n_steps, horizon, eps_base, kinds, dW, dB, weights, alive, prices, records
    )
