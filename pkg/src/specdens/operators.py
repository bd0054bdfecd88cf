"""Matrix-free symmetric linear operators and their combinators.

An operator is a dimension plus a matvec; everything downstream (Lanczos,
subspace iteration, deflation) touches matrices only through `apply`. The
combinators preserve symmetry by construction, and `symmetry_defect` gives
the probabilistic check used by the hygiene tests.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import DegenerateSpectrumError, DimensionMismatchError, UsageError
from .linalg import _require_symmetric


@dataclass(frozen=True)
class NormalizationMap:
    """Affine change of variables t = (lambda - center) / half_width.

    Bounds are stored post-widening: ``lambda_min/lambda_max`` are the
    margin-padded range endpoints, so ``center ± half_width`` reproduces
    them exactly. The pre-widening estimates and the margin that was added
    are kept for reporting.
    """

    center: float
    half_width: float
    lambda_min: float
    lambda_max: float
    delta: float
    tau: float
    raw_lambda_min: float
    raw_lambda_max: float

    def __post_init__(self):
        if not self.half_width > 0.0:
            raise UsageError("half_width must be positive")

    @classmethod
    def from_bounds(cls, raw_min: float, raw_max: float,
                    tau: float) -> "NormalizationMap":
        """Widen [raw_min, raw_max] by a relative margin tau and build the map.

        A collapsed range (raw_max <= raw_min) cannot be normalized and
        raises :class:`DegenerateSpectrumError`; callers wanting to analyze
        a known-degenerate operator must supply explicit bounds instead.
        """
        delta = tau * (raw_max - raw_min)
        lo = raw_min - delta
        hi = raw_max + delta
        half = 0.5 * (hi - lo)
        if not half > 0.0:
            raise DegenerateSpectrumError(
                f"spectral range [{raw_min:.6g}, {raw_max:.6g}] has no width; "
                "cannot map to [-1, 1]"
            )
        return cls(
            center=0.5 * (lo + hi),
            half_width=half,
            lambda_min=lo,
            lambda_max=hi,
            delta=delta,
            tau=tau,
            raw_lambda_min=raw_min,
            raw_lambda_max=raw_max,
        )

    def normalize(self, lam):
        return (np.asarray(lam, dtype=np.float64) - self.center) / self.half_width

    def denormalize(self, t):
        return np.asarray(t, dtype=np.float64) * self.half_width + self.center

    def to_dict(self) -> dict:
        return {
            "center": self.center,
            "half_width": self.half_width,
            "lambda_min": self.lambda_min,
            "lambda_max": self.lambda_max,
            "delta": self.delta,
            "tau": self.tau,
            "raw_lambda_min": self.raw_lambda_min,
            "raw_lambda_max": self.raw_lambda_max,
        }


class SymmetricOperator:
    """A symmetric linear map on R^p exposed only through matvecs.

    `apply` is deterministic: the same vector in gives bit-identical
    vectors out. Symmetry is the caller's promise for hand-built matvecs;
    every combinator below preserves it, and tests probe it stochastically.
    """

    def __init__(self, dim: int, matvec: Callable[[np.ndarray], np.ndarray],
                 label: str = ""):
        if dim < 1:
            raise UsageError("operator dimension must be >= 1")
        self.dim = int(dim)
        self.label = label
        self._matvec = matvec

    def apply(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (self.dim,):
            raise UsageError(
                f"operator {self.label or '<anon>'} expects shape ({self.dim},), "
                f"got {v.shape}"
            )
        out = np.asarray(self._matvec(v), dtype=np.float64)
        if out.shape != (self.dim,):
            raise UsageError("matvec returned wrong shape")
        return out

    def __repr__(self):
        return f"SymmetricOperator(dim={self.dim}, label={self.label!r})"


def dense_operator(A: np.ndarray, label: str = "dense") -> SymmetricOperator:
    """Wrap a dense symmetric matrix (validated to 1e-12 relative)."""
    A = np.asarray(A, dtype=np.float64)
    _require_symmetric(A)
    return SymmetricOperator(A.shape[0], lambda v: A @ v, label=label)


def affine_operator(op: SymmetricOperator,
                    norm_map: NormalizationMap) -> SymmetricOperator:
    """(A - center * I) / half_width — the normalized operator."""
    c, d = norm_map.center, norm_map.half_width
    return SymmetricOperator(
        op.dim,
        lambda v: (op.apply(v) - c * v) / d,
        label=f"normalized({op.label})",
    )


def deflated_operator(op: SymmetricOperator, basis: np.ndarray) -> SymmetricOperator:
    """Two-sided projection P A P with P = I - Q Q^T.

    Symmetric by construction and sends span(Q) to zero exactly, so the
    deflated eigenvalues land at 0 rather than being merely shrunk. The
    basis must be orthonormal to 1e-10.
    """
    Q = np.asarray(basis, dtype=np.float64)
    if Q.ndim != 2 or Q.shape[0] != op.dim:
        raise DimensionMismatchError(
            f"basis shape {Q.shape} does not match operator dim {op.dim}"
        )
    k = Q.shape[1]
    if k:
        gram_defect = float(np.max(np.abs(Q.T @ Q - np.eye(k))))
        if gram_defect > 1e-10:
            raise UsageError(
                f"deflation basis not orthonormal: max|Q^TQ - I| = {gram_defect:.3e}"
            )

    def matvec(v):
        w = v - Q @ (Q.T @ v) if k else v
        u = op.apply(w)
        return u - Q @ (Q.T @ u) if k else u

    return SymmetricOperator(op.dim, matvec, label=f"deflated({op.label},k={k})")


def _check_dims(a: SymmetricOperator, b: SymmetricOperator) -> None:
    if a.dim != b.dim:
        raise DimensionMismatchError(
            f"operator dims differ: {a.dim} ({a.label}) vs {b.dim} ({b.label})"
        )


def sum_operator(a: SymmetricOperator, b: SymmetricOperator) -> SymmetricOperator:
    _check_dims(a, b)
    return SymmetricOperator(a.dim, lambda v: a.apply(v) + b.apply(v),
                             label=f"{a.label}+{b.label}")


def difference_operator(a: SymmetricOperator,
                        b: SymmetricOperator) -> SymmetricOperator:
    _check_dims(a, b)
    return SymmetricOperator(a.dim, lambda v: a.apply(v) - b.apply(v),
                             label=f"{a.label}-{b.label}")


def symmetry_defect(op: SymmetricOperator, pairs: int = 10,
                    seed: int = 0) -> float:
    """Largest normalized defect |<Au,w> - <u,Aw>| over random probe pairs.

    A genuinely symmetric operator scores ~1e-15; anything above 1e-8 means
    the matvec is lying about symmetry.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(pairs):
        u = rng.standard_normal(op.dim)
        w = rng.standard_normal(op.dim)
        au = op.apply(u)
        aw = op.apply(w)
        defect = abs(au @ w - u @ aw)
        scale = float(np.linalg.norm(au) * np.linalg.norm(w))
        worst = max(worst, defect / max(scale, 1e-300))
    return worst
