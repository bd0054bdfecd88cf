"""Stochastic Lanczos estimation of spectral densities.

The workhorse is a three-term recurrence that keeps only three working
vectors (`fast_lanczos`); a fully reorthogonalized variant (`slow_lanczos`)
exists for validation at small scale. On top of these sit the range
estimator, the smoothed density estimator on a normalized grid, and a
log-magnitude variant that resolves many orders of magnitude at once.

Densities are accumulated as exact Gaussian masses per grid cell
(difference of CDFs) rather than pointwise kernel evaluations: for large M
the bump width drops below the grid spacing and pointwise sums no longer
integrate to 1, while cell masses conserve mass for any width. For wide
bumps the two are indistinguishable. `density_from_eigenvalues` smooths a
known spectrum through the same accumulator so estimator-vs-oracle
comparisons are apples to apples.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from .errors import UsageError
from .linalg import EigenPairs, TridiagonalMatrix, eig_tridiagonal
from .operators import NormalizationMap, SymmetricOperator, affine_operator

_BREAKDOWN_TOL = 1e-12

# bump mass beyond 6 sigma is ~2e-9; ignoring it keeps accumulation O(1) per bump
_TRUNCATE_SIGMAS = 6.0

DEFAULT_RANGE_STEPS = 32
DEFAULT_RANGE_TAU = 0.05
DEFAULT_STEPS = 128
DEFAULT_GRID = 1024
DEFAULT_KAPPA = 3.0
DEFAULT_LOG_STEPS = 2048
DEFAULT_LOG_EPSILON = 1e-5


@dataclass(frozen=True)
class RitzSummary:
    """Ritz values and weights from one Lanczos run.

    ``weights`` are the squared first components of the tridiagonal
    eigenvectors; they always sum to 1. ``steps`` is how many iterations
    actually ran — fewer than requested only on lucky breakdown, which is
    flagged rather than hidden.
    """

    theta: np.ndarray
    weights: np.ndarray
    seed: object
    steps: int
    breakdown: bool = False

    def to_dict(self) -> dict:
        return {
            "theta": self.theta.tolist(),
            "weights": self.weights.tolist(),
            "seed": self.seed,
            "steps": self.steps,
            "breakdown": self.breakdown,
        }


@dataclass
class SpectralDensity:
    """A smoothed spectral density on a uniform grid.

    ``scale == "linear"``: ``grid`` holds eigenvalue coordinates and
    ``values`` the density per unit eigenvalue.

    ``scale == "log"``: ``grid`` holds u = log(lambda + epsilon) and
    ``values`` the density *per unit eigenvalue* evaluated along u, i.e.
    the change-of-measure factor 1/(lambda + epsilon) is already applied.
    Mass therefore integrates with weight exp(u). Eigenvalues at or below
    -epsilon cannot be placed on this axis; their mirrored magnitudes go
    into the ``negative`` branch and their total weight is recorded in
    ``negative_mass``.

    ``normalization`` maps grid coordinates to the internal [-1, 1] axis;
    ``sigma`` is the bump width on that internal axis.
    """

    grid: np.ndarray
    values: np.ndarray
    sigma: float
    scale: str
    normalization: NormalizationMap
    ritz: list[RitzSummary] = field(default_factory=list)
    epsilon: float | None = None
    operator_normalization: NormalizationMap | None = None
    negative: "SpectralDensity | None" = None
    negative_mass: float = 0.0

    def mass(self) -> float:
        """Total probability mass, both branches, in eigenvalue measure."""
        if self.scale == "linear":
            total = float(np.trapezoid(self.values, self.grid))
        else:
            total = float(np.trapezoid(self.values * np.exp(self.grid), self.grid))
        if self.negative is not None:
            total += self.negative.mass()
        return total

    def to_dict(self) -> dict:
        out = {
            "grid": self.grid.tolist(),
            "values": self.values.tolist(),
            "sigma": self.sigma,
            "scale": self.scale,
            "normalization": self.normalization.to_dict(),
            "epsilon": self.epsilon,
            "negative_mass": self.negative_mass,
            "ritz": [r.to_dict() for r in self.ritz],
        }
        if self.operator_normalization is not None:
            out["operator_normalization"] = self.operator_normalization.to_dict()
        if self.negative is not None:
            neg = self.negative.to_dict()
            neg.pop("ritz", None)
            out["negative"] = neg
        return out


def _as_rng(seed) -> np.random.Generator:
    return np.random.default_rng(seed)


def _start_vector(dim: int, rng: np.random.Generator) -> np.ndarray:
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def _three_term(op: SymmetricOperator, v1: np.ndarray, steps: int,
                collect=None) -> tuple[list, list, bool]:
    """The bare recurrence: three working vectors, no reorthogonalization.

    ``collect(i, v)`` is called with each basis vector before it is
    consumed, which lets callers rebuild Ritz vectors in a second pass
    without ever storing the basis.
    """
    alpha: list[float] = []
    beta: list[float] = []
    v_prev = None
    v = v1
    breakdown = False
    for m in range(1, steps + 1):
        if collect is not None:
            collect(m - 1, v)
        w = op.apply(v)
        if m > 1:
            w = w - beta[-1] * v_prev
        a = float(w @ v)
        alpha.append(a)
        if m == steps:
            break
        w = w - a * v
        b = float(np.linalg.norm(w))
        if b <= _BREAKDOWN_TOL:
            breakdown = True
            break
        beta.append(b)
        v_prev = v
        v = w / b
    return alpha, beta, breakdown


def _summarize(alpha, beta, seed, breakdown) -> tuple[TridiagonalMatrix, RitzSummary]:
    T = TridiagonalMatrix(alpha=np.array(alpha), beta=np.array(beta))
    pairs = eig_tridiagonal(T, vectors="first")
    weights = pairs.first_components ** 2
    summary = RitzSummary(theta=pairs.values, weights=weights, seed=seed,
                          steps=T.order, breakdown=breakdown)
    return T, summary


def fast_lanczos(op: SymmetricOperator, steps: int,
                 seed) -> tuple[TridiagonalMatrix, RitzSummary]:
    """Lanczos with no reorthogonalization: O(p) memory, 3 working vectors.

    Intended for density estimation, where the loss of orthogonality is
    harmless (duplicated Ritz values share out the weight). ``steps`` may
    exceed the operator dimension: without reorthogonalization the
    recurrence keeps producing vectors, and the extra quadrature nodes
    keep sampling the parts of the spectrum the early iterations skipped —
    the log-scale estimator depends on this. A breakdown (beta below
    1e-12) terminates early with the shorter tridiagonal matrix; the
    summary flags it.
    """
    if steps < 1:
        raise UsageError(f"steps must be >= 1, got {steps}")
    v1 = _start_vector(op.dim, _as_rng(seed))
    alpha, beta, breakdown = _three_term(op, v1, steps)
    return _summarize(alpha, beta, seed, breakdown)


def slow_lanczos(op: SymmetricOperator, steps: int,
                 seed) -> tuple[TridiagonalMatrix, RitzSummary]:
    """Lanczos with full reorthogonalization. Validation-scale only.

    Stores the whole basis and reorthogonalizes each iterate against it
    (two passes), so with steps = p it reproduces the dense spectrum to
    near machine precision. Guarded to p <= 10^4 since the basis is dense.
    """
    p = op.dim
    if p > 10_000:
        raise UsageError(
            f"slow_lanczos stores the full basis; p = {p} exceeds the 10^4 guard"
        )
    if not 1 <= steps <= p:
        raise UsageError(f"steps must be in [1, {p}], got {steps}")
    v = _start_vector(p, _as_rng(seed))
    V = np.empty((p, steps))
    alpha: list[float] = []
    beta: list[float] = []
    v_prev = None
    breakdown = False
    for m in range(1, steps + 1):
        V[:, m - 1] = v
        w = op.apply(v)
        if m > 1:
            w = w - beta[-1] * v_prev
        a = float(w @ v)
        alpha.append(a)
        if m == steps:
            break
        w = w - a * v
        basis = V[:, :m]
        for _ in range(2):
            w = w - basis @ (basis.T @ w)
        b = float(np.linalg.norm(w))
        if b <= _BREAKDOWN_TOL:
            breakdown = True
            break
        beta.append(b)
        v_prev = v
        v = w / b
    return _summarize(alpha, beta, seed, breakdown)


def estimate_range(op: SymmetricOperator, steps: int = DEFAULT_RANGE_STEPS,
                   tau: float = DEFAULT_RANGE_TAU, seed=0) -> NormalizationMap:
    """Bracket the spectrum with a short Lanczos run and widen by a margin.

    The extremal Ritz values are pushed outward by their residual norms
    (computed from Ritz vectors rebuilt in a second recurrence pass with
    the same seed, so memory stays O(p)), then the interval is widened by
    the relative margin ``tau``. Degenerate spectra (single point) cannot
    be bracketed and raise; callers may construct a NormalizationMap by
    hand for those.
    """
    if tau < 0:
        raise UsageError("tau must be nonnegative")
    m0 = min(steps, op.dim)
    if m0 < 1:
        raise UsageError("need at least one step")
    rng = _as_rng(seed)
    v1 = _start_vector(op.dim, rng)
    alpha, beta, _ = _three_term(op, v1, m0)
    T = TridiagonalMatrix(alpha=np.array(alpha), beta=np.array(beta))
    pairs: EigenPairs = eig_tridiagonal(T, vectors="full")
    y_lo = pairs.vectors[:, 0]
    y_hi = pairs.vectors[:, -1]

    z_lo = np.zeros(op.dim)
    z_hi = np.zeros(op.dim)

    def collect(i, v):
        nonlocal z_lo, z_hi
        z_lo += y_lo[i] * v
        z_hi += y_hi[i] * v

    # identical second pass (same seed, same step count) rebuilds the basis
    v1b = _start_vector(op.dim, _as_rng(seed))
    _three_term(op, v1b, T.order, collect=collect)

    theta_lo = float(pairs.values[0])
    theta_hi = float(pairs.values[-1])
    z_lo /= np.linalg.norm(z_lo)
    z_hi /= np.linalg.norm(z_hi)
    r_lo = float(np.linalg.norm(op.apply(z_lo) - theta_lo * z_lo))
    r_hi = float(np.linalg.norm(op.apply(z_hi) - theta_hi * z_hi))
    return NormalizationMap.from_bounds(theta_lo - r_lo, theta_hi + r_hi, tau)


def sigma_for(steps: int, kappa: float) -> float:
    """Bump width on the normalized axis: the kernel falls to 1/kappa of its
    peak across one resolution element 2/(steps-1)."""
    if steps < 2:
        raise UsageError("need at least two steps for a finite bump width")
    if kappa <= 1.0:
        raise UsageError("kappa must exceed 1")
    return 2.0 / ((steps - 1) * math.sqrt(8.0 * math.log(kappa)))


def accumulate_bumps(centers: np.ndarray, weights: np.ndarray,
                     grid: np.ndarray, sigma: float) -> np.ndarray:
    """Sum of Gaussian bumps, as mean density per grid cell.

    Cells are centered on the grid points. Each bump deposits its exact
    mass (CDF differences) into the cells within 6 sigma, so the result
    integrates to sum(weights) regardless of how sigma compares to the
    cell width. Mass falling outside the grid is dropped — the caller's
    margin is supposed to prevent that.
    """
    grid = np.asarray(grid, dtype=np.float64)
    K = grid.size
    if K < 2:
        raise UsageError("grid needs at least two points")
    h = (grid[-1] - grid[0]) / (K - 1)
    if h <= 0:
        raise UsageError("grid must be increasing")
    edges = np.empty(K + 1)
    edges[1:-1] = 0.5 * (grid[1:] + grid[:-1])
    edges[0] = grid[0] - 0.5 * h
    edges[-1] = grid[-1] + 0.5 * h
    values = np.zeros(K)
    reach = _TRUNCATE_SIGMAS * sigma
    for c, w in zip(np.asarray(centers, dtype=np.float64),
                    np.asarray(weights, dtype=np.float64)):
        if w == 0.0:
            continue
        j0 = max(int(np.searchsorted(edges, c - reach, side="left")) - 1, 0)
        j1 = min(int(np.searchsorted(edges, c + reach, side="right")), K)
        if j0 >= j1:
            continue
        cdf = ndtr((edges[j0:j1 + 1] - c) / sigma)
        values[j0:j1] += w * np.diff(cdf)
    return values / h


def _run_repetitions(aop: SymmetricOperator, m_eff: int, seed: int,
                     n_vec: int, workers: int) -> list:
    """The n_vec Lanczos passes; independent, so they may run on threads.

    Results come back indexed by repetition and are reduced in that fixed
    order afterwards, so the output is bit-identical for any worker count.
    """

    def run(l):
        return fast_lanczos(aop, m_eff, [seed, 1 + l])

    if workers > 1 and n_vec > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(run, range(n_vec)))
    return [run(l) for l in range(n_vec)]


def approx_spectrum(op: SymmetricOperator, steps: int = DEFAULT_STEPS,
                    grid_points: int = DEFAULT_GRID, n_vec: int = 1,
                    kappa: float = DEFAULT_KAPPA, seed: int = 0,
                    normalization: NormalizationMap | None = None,
                    range_steps: int = DEFAULT_RANGE_STEPS,
                    range_tau: float = DEFAULT_RANGE_TAU,
                    workers: int = 1) -> SpectralDensity:
    """Smoothed spectral density of a symmetric operator, matrix-free.

    Normalizes the spectrum to [-1, 1] (estimating the range unless a map
    is supplied), runs ``n_vec`` independent Lanczos passes of ``steps``
    iterations, places a Gaussian bump of width ``sigma_for(steps, kappa)``
    at each Ritz value with its weight, averages the passes, and maps the
    grid back to eigenvalue coordinates. Identical seeds give bit-identical
    densities. ``steps`` above the operator dimension is clamped with a
    warning.
    """
    if n_vec < 1:
        raise UsageError("n_vec must be >= 1")
    m_eff = steps
    if m_eff > op.dim:
        warnings.warn(
            f"steps = {steps} exceeds operator dim {op.dim}; clamping",
            stacklevel=2,
        )
        m_eff = op.dim
    if m_eff < 2:
        raise UsageError("need at least two Lanczos steps for a density")
    if normalization is None:
        normalization = estimate_range(op, steps=range_steps, tau=range_tau,
                                       seed=[seed, 0])
    aop = affine_operator(op, normalization)
    sigma = sigma_for(m_eff, kappa)
    t_grid = np.linspace(-1.0, 1.0, grid_points)
    acc = np.zeros(grid_points)
    summaries = []
    for _, summary in _run_repetitions(aop, m_eff, seed, n_vec, workers):
        acc += accumulate_bumps(summary.theta, summary.weights, t_grid, sigma)
        summaries.append(summary)
    values = acc / (n_vec * normalization.half_width)
    return SpectralDensity(
        grid=normalization.denormalize(t_grid),
        values=values,
        sigma=sigma,
        scale="linear",
        normalization=normalization,
        ritz=summaries,
    )


def _log_bounds(raw_min: float, raw_max: float, epsilon: float) -> tuple[float, float]:
    """Pre-margin bounds on the u = log(|lambda| + epsilon) axis.

    Sign-definite ranges transform monotonically; a range straddling zero
    contains magnitudes all the way down to ~0, so the lower bound is
    log(epsilon).
    """
    if raw_min >= 0.0:
        return math.log(raw_min + epsilon), math.log(raw_max + epsilon)
    if raw_max <= 0.0:
        return math.log(-raw_max + epsilon), math.log(-raw_min + epsilon)
    return math.log(epsilon), math.log(max(raw_max, -raw_min) + epsilon)


def approx_log_spectrum(op: SymmetricOperator, steps: int = DEFAULT_LOG_STEPS,
                        grid_points: int = DEFAULT_GRID, n_vec: int = 1,
                        kappa: float = DEFAULT_KAPPA,
                        epsilon: float = DEFAULT_LOG_EPSILON, seed: int = 0,
                        normalization: NormalizationMap | None = None,
                        range_steps: int = DEFAULT_RANGE_STEPS,
                        range_tau: float = DEFAULT_RANGE_TAU,
                        workers: int = 1) -> SpectralDensity:
    """Spectral density over u = log(lambda + epsilon).

    Same machinery as :func:`approx_spectrum`, but Ritz values are placed
    at their log-magnitudes and each bump is scaled by the change-of-
    measure factor 1/(lambda + epsilon), so ``values`` remain a density in
    eigenvalue measure. This resolves structure spread over many orders of
    magnitude with one run, at the price of ``steps`` in the thousands.
    Ritz values at or below -epsilon land in the mirrored ``negative``
    branch and are tallied in ``negative_mass``.
    """
    if n_vec < 1:
        raise UsageError("n_vec must be >= 1")
    if epsilon <= 0:
        raise UsageError("epsilon must be positive")
    # unlike the linear estimator, steps are NOT clamped at the dimension:
    # on the log axis the bulk occupies a sliver of the linear range, and
    # only the nodes contributed by iterations past dim resolve it
    m_eff = steps
    if m_eff < 2:
        raise UsageError("need at least two Lanczos steps for a density")
    lin_map = normalization
    if lin_map is None:
        lin_map = estimate_range(op, steps=range_steps, tau=range_tau,
                                 seed=[seed, 0])
    lo_u, hi_u = _log_bounds(lin_map.raw_lambda_min, lin_map.raw_lambda_max,
                             epsilon)
    log_map = NormalizationMap.from_bounds(lo_u, hi_u, range_tau)
    aop = affine_operator(op, lin_map)
    sigma = sigma_for(m_eff, kappa)
    t_grid = np.linspace(-1.0, 1.0, grid_points)
    pos_acc = np.zeros(grid_points)
    neg_acc = np.zeros(grid_points)
    neg_mass = 0.0
    summaries = []
    for _, summary in _run_repetitions(aop, m_eff, seed, n_vec, workers):
        lam = lin_map.denormalize(summary.theta)
        w = summary.weights
        pos = lam > -epsilon
        if np.any(pos):
            shifted = lam[pos] + epsilon
            t_pos = log_map.normalize(np.log(shifted))
            pos_acc += accumulate_bumps(t_pos, w[pos] / shifted, t_grid, sigma)
        if np.any(~pos):
            mirrored = -lam[~pos] + epsilon
            t_neg = log_map.normalize(np.log(mirrored))
            neg_acc += accumulate_bumps(t_neg, w[~pos] / mirrored, t_grid, sigma)
            neg_mass += float(np.sum(w[~pos]))
        summaries.append(summary)

    grid_u = log_map.denormalize(t_grid)
    neg_density = None
    neg_mass /= n_vec
    if neg_mass > 0.0:
        neg_density = SpectralDensity(
            grid=grid_u,
            values=neg_acc / (n_vec * log_map.half_width),
            sigma=sigma,
            scale="log",
            normalization=log_map,
            epsilon=epsilon,
        )
    return SpectralDensity(
        grid=grid_u,
        values=pos_acc / (n_vec * log_map.half_width),
        sigma=sigma,
        scale="log",
        normalization=log_map,
        ritz=summaries,
        epsilon=epsilon,
        operator_normalization=lin_map,
        negative=neg_density,
        negative_mass=neg_mass,
    )


def density_from_eigenvalues(eigenvalues: np.ndarray,
                             like: SpectralDensity) -> SpectralDensity:
    """Smooth a known eigenvalue list onto the same grid/kernel as ``like``.

    This is the reference curve for estimator validation: identical grid,
    identical sigma, identical accumulation, so any difference from the
    estimate is estimator error, not smoothing art.
    """
    eig = np.asarray(eigenvalues, dtype=np.float64)
    n = eig.size
    if n == 0:
        raise UsageError("need at least one eigenvalue")
    w = np.full(n, 1.0 / n)
    t_grid = like.normalization.normalize(like.grid)
    if like.scale == "linear":
        t = like.normalization.normalize(eig)
        values = accumulate_bumps(t, w, t_grid, like.sigma)
        return SpectralDensity(
            grid=like.grid.copy(),
            values=values / like.normalization.half_width,
            sigma=like.sigma,
            scale="linear",
            normalization=like.normalization,
        )
    eps = like.epsilon
    pos = eig > -eps
    pos_acc = np.zeros(t_grid.size)
    neg_acc = np.zeros(t_grid.size)
    neg_mass = 0.0
    if np.any(pos):
        shifted = eig[pos] + eps
        pos_acc = accumulate_bumps(like.normalization.normalize(np.log(shifted)),
                                   w[pos] / shifted, t_grid, like.sigma)
    if np.any(~pos):
        mirrored = -eig[~pos] + eps
        neg_acc = accumulate_bumps(like.normalization.normalize(np.log(mirrored)),
                                   w[~pos] / mirrored, t_grid, like.sigma)
        neg_mass = float(np.sum(w[~pos]))
    negative = None
    if neg_mass > 0.0:
        negative = SpectralDensity(
            grid=like.grid.copy(),
            values=neg_acc / like.normalization.half_width,
            sigma=like.sigma,
            scale="log",
            normalization=like.normalization,
            epsilon=eps,
        )
    return SpectralDensity(
        grid=like.grid.copy(),
        values=pos_acc / like.normalization.half_width,
        sigma=like.sigma,
        scale="log",
        normalization=like.normalization,
        epsilon=eps,
        negative=negative,
        negative_mass=neg_mass,
    )


def tv_distance(a: SpectralDensity, b: SpectralDensity) -> float:
    """Total variation distance between two densities on the same grid."""
    if a.scale != b.scale:
        raise UsageError("cannot compare densities on different scales")
    if a.grid.shape != b.grid.shape or not np.allclose(a.grid, b.grid,
                                                       rtol=1e-12, atol=1e-12):
        raise UsageError("densities must share a grid")
    if a.scale == "linear":
        return 0.5 * float(np.trapezoid(np.abs(a.values - b.values), a.grid))
    jac = np.exp(a.grid)
    total = 0.5 * float(np.trapezoid(np.abs(a.values - b.values) * jac, a.grid))
    av = a.negative.values if a.negative is not None else 0.0
    bv = b.negative.values if b.negative is not None else 0.0
    if a.negative is not None or b.negative is not None:
        total += 0.5 * float(np.trapezoid(np.abs(av - bv) * jac, a.grid))
    return total
