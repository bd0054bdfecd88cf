"""Top-eigenspace extraction and low-rank deflation.

Subspace iteration finds the eigenvectors of largest magnitude; deflation
projects them out two-sided (P A P), which keeps the operator symmetric
and parks the removed eigenvalues exactly at zero so the remaining bulk
can be examined without the outliers dominating the range.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceError, RankDeficiencyError, UsageError
from .linalg import qr_orthonormalize
from .operators import SymmetricOperator, deflated_operator


@dataclass(frozen=True)
class TopSpectrum:
    """Leading eigenpairs by magnitude.

    ``values`` are Rayleigh quotients q^T A q of the returned basis —
    signed, descending by absolute value. ``residuals`` are the per-pair
    norms ||A q - theta q||. ``power_norms`` are the column norms of the
    last pre-orthonormalization block, the magnitude-only estimate the
    plain power recursion would give; kept as a convergence diagnostic.
    """

    values: np.ndarray
    basis: np.ndarray
    residuals: np.ndarray
    power_norms: np.ndarray

    @property
    def count(self) -> int:
        return self.values.size

    def to_dict(self) -> dict:
        return {
            "values": self.values.tolist(),
            "residuals": self.residuals.tolist(),
            "power_norms": self.power_norms.tolist(),
        }


def _orthonormalize_resampling(V: np.ndarray, rng: np.random.Generator,
                               budget: list[int]) -> np.ndarray:
    """QR with resampling of columns that collapse, up to a total budget."""
    while True:
        try:
            return qr_orthonormalize(V)
        except RankDeficiencyError as err:
            if budget[0] <= 0:
                raise ConvergenceError(
                    "subspace iteration could not maintain a full-rank block "
                    f"(column {err.column} kept collapsing)"
                ) from err
            budget[0] -= 1
            V[:, err.column] = rng.standard_normal(V.shape[0])


def subspace_iteration(op: SymmetricOperator, count: int, iters: int = 128,
                       seed: int = 0) -> TopSpectrum:
    """Orthogonal (block power) iteration for the top ``count`` eigenpairs.

    Random start, ``iters`` rounds of apply-then-orthonormalize, then
    Rayleigh quotients for the eigenvalue estimates — unlike raw power
    norms these carry the sign. Ordering is by descending magnitude with
    stable ties. Columns that go rank deficient are resampled from the
    generator, with a budget of 5 * count before giving up.
    """
    p = op.dim
    if not 1 <= count < p:
        raise UsageError(f"count must be in [1, {p - 1}], got {count}")
    if iters < 1:
        raise UsageError("iters must be >= 1")
    rng = np.random.default_rng(seed)
    budget = [5 * count]
    V = rng.standard_normal((p, count))
    Q = _orthonormalize_resampling(V, rng, budget)
    for _ in range(iters):
        V = np.column_stack([op.apply(Q[:, j]) for j in range(count)])
        power_norms = np.linalg.norm(V, axis=0)
        Q = _orthonormalize_resampling(V, rng, budget)

    W = np.column_stack([op.apply(Q[:, j]) for j in range(count)])
    theta = np.einsum("ij,ij->j", Q, W)
    residuals = np.linalg.norm(W - Q * theta, axis=0)
    order = np.argsort(-np.abs(theta), kind="stable")
    return TopSpectrum(
        values=theta[order],
        basis=Q[:, order],
        residuals=residuals[order],
        power_norms=power_norms[order],
    )


def low_rank_deflation(op: SymmetricOperator, count: int, iters: int = 128,
                       seed: int = 0) -> tuple[TopSpectrum, SymmetricOperator]:
    """Find the top ``count`` eigenpairs and project them out.

    Returns the extracted spectrum and the deflated operator P A P with
    P = I - Q Q^T. ``count = 0`` is a no-op: empty spectrum, operator
    returned as is.
    """
    if count < 0:
        raise UsageError("count must be nonnegative")
    if count == 0:
        empty = TopSpectrum(
            values=np.empty(0),
            basis=np.empty((op.dim, 0)),
            residuals=np.empty(0),
            power_norms=np.empty(0),
        )
        return empty, op
    top = subspace_iteration(op, count, iters=iters, seed=seed)
    return top, deflated_operator(op, top.basis)
