"""Hierarchical decomposition of the outer-product curvature term.

The Gauss-Newton operator G is an average of per-example, per-class outer
products. Grouping examples by true class and splitting each vector into
its cluster mean plus fluctuation decomposes G exactly into four PSD
pieces:

- A1: between-cluster means of the cross-class vectors (rank <= C),
- A2: means of the true-class vectors (rank <= C),
- B1: spread of the cross-class cluster means around their per-class
  mixture mean (rank <= C^2 - 2C generically),
- B2: within-cluster fluctuations (the only part that grows with n).

G = A1 + A2 + B1 + B2 holds to round-off, and the identity is checked
with random probes whenever a report is produced. All pieces are built
from stored per-example vectors at desk scale — (n, C, p) memory — and
exposed as factor-form operators, so eigenvalues of the low-rank pieces
come from small Gram matrices, never from p x p assemblies.

When n*C*p would not fit, a streaming two-pass mode computes the same
statistics without ever holding more than one chunk of per-example
vectors: pass one accumulates masses and weighted means, pass two the
within-cluster trace summaries. B2 then recomputes its chunks at
matvec time instead of exposing a stored factor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import LabeledDataset, one_hot
from .errors import InputFormatError, UsageError
from .lanczos import approx_log_spectrum
from .linalg import dense_eig
from .net import MlpSpec, hessian_operator, per_example_logit_vjp, predict_probs
from .operators import SymmetricOperator, difference_operator, sum_operator

_MEMORY_GUARD_FLOATS = 250_000_000  # ~2 GiB of per-example vectors

REPORT_SCHEMA = "attribution-report/v1"


@dataclass(frozen=True)
class PerExampleVectors:
    """For every example i and class c': the parameter-space vector
    J_i^T (e_c' - p_i), with the example's softmax probs and true label."""

    vectors: np.ndarray  # (n, C, p)
    probs: np.ndarray    # (n, C)
    labels: np.ndarray   # (n,)
    class_count: int

    @property
    def n(self) -> int:
        return self.vectors.shape[0]

    @property
    def param_count(self) -> int:
        return self.vectors.shape[2]


def per_example_vectors(spec: MlpSpec, theta: np.ndarray,
                        data: LabeledDataset) -> PerExampleVectors:
    """Materialize all n*C per-example class vectors.

    Each class column comes from one batched VJP with cotangent rows
    e_c' - p_i. Desk-scale only: refuses to allocate more than ~2 GiB.
    """
    C = spec.class_count
    p = spec.param_count
    if data.n * C * p > _MEMORY_GUARD_FLOATS:
        raise UsageError(
            f"per-example vectors would need {data.n} x {C} x {p} floats; "
            "this analysis is desk-scale by design — shrink the model or data"
        )
    P = predict_probs(spec, theta, data.x)
    vecs = np.empty((data.n, C, p))
    eye = np.eye(C)
    for c in range(C):
        vecs[:, c, :] = per_example_logit_vjp(spec, theta, data.x, eye[c] - P)
    return PerExampleVectors(vectors=vecs, probs=P, labels=data.y.copy(),
                             class_count=C)


@dataclass(frozen=True)
class StreamingSource:
    """Recipe for recomputing per-example vectors one chunk at a time.

    Holds no vectors itself; ``chunks()`` re-derives them on demand, so a
    B2 matvec over n examples costs one full pass but only one chunk of
    memory at a time.
    """

    spec: MlpSpec
    theta: np.ndarray
    data: LabeledDataset
    batch_size: int

    @property
    def n(self) -> int:
        return self.data.n

    @property
    def class_count(self) -> int:
        return self.spec.class_count

    @property
    def param_count(self) -> int:
        return self.spec.param_count

    def chunks(self):
        """Yield (vectors, probs, labels) per chunk, same values as the
        in-memory route restricted to the chunk's rows."""
        C = self.spec.class_count
        p = self.spec.param_count
        eye = np.eye(C)
        for lo in range(0, self.data.n, self.batch_size):
            hi = min(lo + self.batch_size, self.data.n)
            x = self.data.x[lo:hi]
            P = predict_probs(self.spec, self.theta, x)
            V = np.empty((hi - lo, C, p))
            for c in range(C):
                V[:, c, :] = per_example_logit_vjp(self.spec, self.theta, x,
                                                   eye[c] - P)
            yield V, P, self.data.y[lo:hi]


@dataclass(frozen=True)
class ClusterStats:
    """Probability-weighted cluster means, grouped by true class.

    Row c aggregates the examples whose true label is c: ``class_prob[c, c']``
    is the total softmax weight those examples put on class c', and
    ``class_mean[c, c']`` the weighted mean of their class-c' vectors.
    ``off_prob`` / ``off_mean`` aggregate the off-diagonal (c' != c) part.
    """

    class_prob: np.ndarray   # (C, C)
    class_mean: np.ndarray   # (C, C, p)
    off_prob: np.ndarray     # (C,)
    off_mean: np.ndarray     # (C, p)
    counts: np.ndarray       # (C,) examples per true class
    n_total: int
    source: PerExampleVectors | StreamingSource


def _finish_stats(class_prob: np.ndarray, vec_sums: np.ndarray,
                  counts: np.ndarray, n_total: int,
                  source) -> ClusterStats:
    """Turn accumulated weighted sums into means and the off-diagonal
    aggregates — shared by the in-memory and streaming routes."""
    C = class_prob.shape[0]
    p = vec_sums.shape[2]
    class_mean = np.zeros((C, C, p))
    nz = class_prob > 0.0
    class_mean[nz] = vec_sums[nz] / class_prob[nz, None]
    off = ~np.eye(C, dtype=bool)
    off_prob = np.where(off, class_prob, 0.0).sum(axis=1)
    off_mean = np.zeros((C, p))
    for c in range(C):
        if off_prob[c] > 0.0:
            weights = np.where(off[c], class_prob[c], 0.0)
            off_mean[c] = (weights[:, None] * class_mean[c]).sum(axis=0) / off_prob[c]
    return ClusterStats(
        class_prob=class_prob,
        class_mean=class_mean,
        off_prob=off_prob,
        off_mean=off_mean,
        counts=counts,
        n_total=n_total,
        source=source,
    )


def cluster_statistics(pev: PerExampleVectors) -> ClusterStats:
    C = pev.class_count
    p = pev.param_count
    class_prob = np.zeros((C, C))
    vec_sums = np.zeros((C, C, p))
    counts = np.zeros(C, dtype=np.int64)
    for c in range(C):
        rows = pev.labels == c
        counts[c] = int(rows.sum())
        if counts[c] == 0:
            continue
        W = pev.probs[rows]          # (n_c, C)
        V = pev.vectors[rows]        # (n_c, C, p)
        class_prob[c] = W.sum(axis=0)
        vec_sums[c] = np.einsum("ic,icp->cp", W, V)
    return _finish_stats(class_prob, vec_sums, counts, pev.n, pev)


def streaming_cluster_statistics(spec: MlpSpec, theta: np.ndarray,
                                 data: LabeledDataset,
                                 batch_size: int = 256) -> ClusterStats:
    """Means pass of the two-pass mode: same ClusterStats as the in-memory
    route (up to summation order), holding one chunk of vectors at a time."""
    if batch_size < 1:
        raise UsageError(f"batch_size must be >= 1, got {batch_size}")
    src = StreamingSource(spec=spec, theta=theta, data=data,
                          batch_size=batch_size)
    C = spec.class_count
    p = spec.param_count
    class_prob = np.zeros((C, C))
    vec_sums = np.zeros((C, C, p))
    counts = np.zeros(C, dtype=np.int64)
    for V, P, y in src.chunks():
        for c in range(C):
            rows = y == c
            if not rows.any():
                continue
            counts[c] += int(rows.sum())
            class_prob[c] += P[rows].sum(axis=0)
            vec_sums[c] += np.einsum("ic,icp->cp", P[rows], V[rows])
    return _finish_stats(class_prob, vec_sums, counts, data.n, src)


def _factor_operator(F: np.ndarray, label: str) -> SymmetricOperator:
    """F^T F as an operator — symmetric PSD by construction."""
    return SymmetricOperator(F.shape[1], lambda v: F.T @ (F @ v), label=label)


def factor_eigenvalues(F: np.ndarray) -> np.ndarray:
    """Nonzero-part spectrum of F^T F via the small Gram matrix F F^T,
    descending. (The remaining p - r eigenvalues are exact zeros.)"""
    r = F.shape[0]
    if r == 0:
        return np.empty(0)
    gram = F @ F.T
    pairs = dense_eig(0.5 * (gram + gram.T))
    return pairs.values[::-1].copy()


@dataclass(frozen=True)
class GaussNewtonParts:
    """The four decomposition pieces as operators, plus their factors.

    Every operator is F^T F for a factor F, so PSD-ness and the rank
    bounds are structural. ``b2_per_class[c]`` restricts B2 to the
    examples with true label c. In streaming mode B2's factor is never
    materialized: ``b2_factor``/``b2_row_labels`` are None, its matvecs
    recompute chunks, and the per-class traces were accumulated during
    the covariance pass instead.
    """

    a1: SymmetricOperator
    a2: SymmetricOperator
    b1: SymmetricOperator
    b2: SymmetricOperator
    b2_per_class: list[SymmetricOperator]
    a1_factor: np.ndarray
    a2_factor: np.ndarray
    b1_factor: np.ndarray
    b2_factor: np.ndarray | None
    b2_row_labels: np.ndarray | None
    stats: ClusterStats
    b2c_trace_values: np.ndarray | None = None

    def parts(self) -> dict[str, SymmetricOperator]:
        return {"a1": self.a1, "a2": self.a2, "b1": self.b1, "b2": self.b2}

    def total(self) -> SymmetricOperator:
        s = sum_operator(sum_operator(self.a1, self.a2),
                         sum_operator(self.b1, self.b2))
        return SymmetricOperator(self.a1.dim, s.apply, label="a1+a2+b1+b2")

    def b2c_traces(self) -> np.ndarray:
        """Per-class trace of B2, normalized by the class example count.

        Computed from the stored factor rows (weighted squared norms), or
        returned from the streaming covariance pass; nothing p x p is
        ever formed either way.
        """
        if self.b2_factor is None:
            return self.b2c_trace_values.copy()
        C = self.stats.class_prob.shape[0]
        row_sq = np.einsum("rp,rp->r", self.b2_factor, self.b2_factor)
        out = np.zeros(C)
        for c in range(C):
            nc = self.stats.counts[c]
            if nc > 0:
                out[c] = row_sq[self.b2_row_labels == c].sum() / nc
        return out


def _streaming_b2_matvec(src: StreamingSource, stats: ClusterStats,
                         v: np.ndarray, only_class: int | None) -> np.ndarray:
    N = stats.n_total
    out = np.zeros(src.param_count)
    for V, P, y in src.chunks():
        if only_class is not None:
            rows = y == only_class
            if not rows.any():
                continue
            V, P, y = V[rows], P[rows], y[rows]
        centered = V - stats.class_mean[y]                # (m, C, p)
        coef = np.einsum("icp,p->ic", centered, v) * (P / N)
        out += np.einsum("ic,icp->p", coef, centered)
    return out


def _streaming_b2c_traces(src: StreamingSource, stats: ClusterStats) -> np.ndarray:
    """Covariance pass: per-class weighted squared fluctuation norms."""
    C = src.class_count
    N = stats.n_total
    sums = np.zeros(C)
    for V, P, y in src.chunks():
        centered = V - stats.class_mean[y]
        sq = np.einsum("icp,icp->i", (P / N)[:, :, None] * centered, centered)
        for c in range(C):
            rows = y == c
            if rows.any():
                sums[c] += sq[rows].sum()
    counts = stats.counts
    return np.divide(sums, counts, out=np.zeros(C), where=counts > 0)


def gauss_newton_parts(stats: ClusterStats) -> GaussNewtonParts:
    src = stats.source
    C = src.class_count
    p = src.param_count
    N = stats.n_total
    if N < 1:
        raise UsageError("need at least one example")

    a1_factor = np.sqrt(stats.off_prob / N)[:, None] * stats.off_mean
    diag_prob = np.diagonal(stats.class_prob)
    diag_mean = stats.class_mean[np.arange(C), np.arange(C)]
    a2_factor = np.sqrt(diag_prob / N)[:, None] * diag_mean

    b1_rows = []
    for c in range(C):
        for c2 in range(C):
            if c2 == c:
                continue
            w = stats.class_prob[c, c2]
            b1_rows.append(
                np.sqrt(w / N) * (stats.class_mean[c, c2] - stats.off_mean[c])
            )
    b1_factor = np.array(b1_rows) if b1_rows else np.empty((0, p))

    if isinstance(src, PerExampleVectors):
        centered = src.vectors - stats.class_mean[src.labels]      # (n, C, p)
        scaled = np.sqrt(src.probs / N)[:, :, None] * centered
        b2_factor = scaled.reshape(src.n * C, p)
        b2_row_labels = np.repeat(src.labels, C)
        b2 = _factor_operator(b2_factor, "b2")
        b2_per_class = []
        for c in range(C):
            Fc = b2_factor[b2_row_labels == c]
            b2_per_class.append(_factor_operator(Fc, label=f"b2[class={c}]"))
        trace_values = None
    else:
        b2_factor = None
        b2_row_labels = None
        b2 = SymmetricOperator(
            p, lambda v: _streaming_b2_matvec(src, stats, v, None),
            label="b2[streaming]")
        b2_per_class = [
            SymmetricOperator(
                p, lambda v, c=c: _streaming_b2_matvec(src, stats, v, c),
                label=f"b2[class={c},streaming]")
            for c in range(C)
        ]
        trace_values = _streaming_b2c_traces(src, stats)

    return GaussNewtonParts(
        a1=_factor_operator(a1_factor, "a1"),
        a2=_factor_operator(a2_factor, "a2"),
        b1=_factor_operator(b1_factor, "b1"),
        b2=b2,
        b2_per_class=b2_per_class,
        a1_factor=a1_factor,
        a2_factor=a2_factor,
        b1_factor=b1_factor,
        b2_factor=b2_factor,
        b2_row_labels=b2_row_labels,
        stats=stats,
        b2c_trace_values=trace_values,
    )


def build_decomposition(spec: MlpSpec, theta: np.ndarray,
                        data: LabeledDataset, streaming: bool | None = None,
                        batch_size: int = 256) -> GaussNewtonParts:
    """Stats -> parts, picking the route by memory footprint.

    ``streaming=None`` stores per-example vectors when they fit under the
    memory guard and falls back to the two-pass mode when they would not;
    pass True/False to force a route.
    """
    if streaming is None:
        streaming = data.n * spec.class_count * spec.param_count > _MEMORY_GUARD_FLOATS
    if streaming:
        stats = streaming_cluster_statistics(spec, theta, data,
                                             batch_size=batch_size)
    else:
        stats = cluster_statistics(per_example_vectors(spec, theta, data))
    return gauss_newton_parts(stats)


def identity_residual(g_op: SymmetricOperator, parts: GaussNewtonParts,
                      probes: int = 20, seed: int = 0) -> float:
    """max over probes of ||G v - (A1+A2+B1+B2) v|| / ||G v||."""
    rng = np.random.default_rng(seed)
    total = parts.total()
    worst = 0.0
    for _ in range(probes):
        v = rng.standard_normal(g_op.dim)
        gv = g_op.apply(v)
        resid = float(np.linalg.norm(gv - total.apply(v)))
        worst = max(worst, resid / max(float(np.linalg.norm(gv)), 1e-300))
    return worst


_ESTIMATOR_KEYS = {"steps", "grid_points", "n_vec", "kappa", "epsilon", "seed"}


def component_attribution(spec: MlpSpec, theta: np.ndarray,
                          data: LabeledDataset,
                          estimator: dict | None = None) -> dict:
    """The full attribution report: where G's outliers come from.

    Estimates the log-magnitude spectrum of G and of G minus each piece
    (all PSD differences, since removing one part leaves a sum of PSD
    parts), lists the exact eigenvalues of A1 and of A1+A2+B1 from their
    Gram matrices, the per-class B2 traces, and the identity-check
    residual. JSON-serializable; validated by :func:`validate_report`.
    """
    cfg = dict(estimator or {})
    unknown = set(cfg) - _ESTIMATOR_KEYS
    if unknown:
        raise UsageError(f"unknown estimator config keys: {sorted(unknown)}")
    p = spec.param_count
    steps = int(cfg.get("steps", min(2048, p)))
    grid_points = int(cfg.get("grid_points", 1024))
    n_vec = int(cfg.get("n_vec", 1))
    kappa = float(cfg.get("kappa", 3.0))
    epsilon = float(cfg.get("epsilon", 1e-5))
    seed = int(cfg.get("seed", 0))

    parts = build_decomposition(spec, theta, data)
    g_op = hessian_operator(spec, theta, data, which="g")
    residual = identity_residual(g_op, parts, probes=20, seed=seed)

    def log_density(op):
        return approx_log_spectrum(
            op, steps=min(steps, op.dim), grid_points=grid_points,
            n_vec=n_vec, kappa=kappa, epsilon=epsilon, seed=seed,
        ).to_dict()

    densities = {"g": log_density(g_op)}
    for name, part in parts.parts().items():
        densities[f"g_minus_{name}"] = log_density(difference_operator(g_op, part))

    # the stacked factor has C^2 + C rows but rank <= C^2: within each class
    # the b1 rows are weighted deviations from their own mean, so they lose
    # one rank per class; keep only the entries that can be nonzero
    a1a2b1_factor = np.vstack([parts.a1_factor, parts.a2_factor,
                               parts.b1_factor])
    report = {
        "schema": REPORT_SCHEMA,
        "class_count": spec.class_count,
        "n_examples": data.n,
        "param_count": p,
        "estimator": {
            "steps": steps, "grid_points": grid_points, "n_vec": n_vec,
            "kappa": kappa, "epsilon": epsilon, "seed": seed,
        },
        "identity": {"relative_residual": residual, "probes": 20},
        "b2c_traces": parts.b2c_traces().tolist(),
        "a1_eigenvalues": factor_eigenvalues(parts.a1_factor).tolist(),
        "a1a2b1_eigenvalues": factor_eigenvalues(
            a1a2b1_factor)[: spec.class_count ** 2].tolist(),
        "densities": densities,
    }
    validate_report(report)
    return report


def _expect(cond: bool, msg: str) -> None:
    if not cond:
        raise InputFormatError(f"attribution report invalid: {msg}")


def validate_report(report: dict) -> None:
    """Structural validation of an attribution report (shape, not science)."""
    _expect(isinstance(report, dict), "not an object")
    _expect(report.get("schema") == REPORT_SCHEMA,
            f"schema must be {REPORT_SCHEMA}")
    for key in ("class_count", "n_examples", "param_count"):
        _expect(isinstance(report.get(key), int) and report[key] >= 1,
                f"{key} must be a positive integer")
    est = report.get("estimator")
    _expect(isinstance(est, dict), "estimator must be an object")
    for key in ("steps", "grid_points", "n_vec", "seed"):
        _expect(isinstance(est.get(key), int), f"estimator.{key} must be int")
    for key in ("kappa", "epsilon"):
        _expect(isinstance(est.get(key), (int, float)),
                f"estimator.{key} must be numeric")
    ident = report.get("identity")
    _expect(isinstance(ident, dict)
            and isinstance(ident.get("relative_residual"), float)
            and isinstance(ident.get("probes"), int),
            "identity block malformed")
    C = report["class_count"]
    traces = report.get("b2c_traces")
    _expect(isinstance(traces, list) and len(traces) == C
            and all(isinstance(t, (int, float)) for t in traces),
            "b2c_traces must list one number per class")
    a1 = report.get("a1_eigenvalues")
    _expect(isinstance(a1, list) and len(a1) <= C, "a1_eigenvalues malformed")
    upper = report.get("a1a2b1_eigenvalues")
    _expect(isinstance(upper, list) and len(upper) <= C * C,
            "a1a2b1_eigenvalues malformed")
    dens = report.get("densities")
    expected = {"g", "g_minus_a1", "g_minus_a2", "g_minus_b1", "g_minus_b2"}
    _expect(isinstance(dens, dict) and set(dens) == expected,
            f"densities must have exactly keys {sorted(expected)}")
    for name, d in dens.items():
        _expect(isinstance(d, dict) and d.get("scale") == "log",
                f"density {name} must be a log-scale density dict")
        grid = d.get("grid")
        values = d.get("values")
        _expect(isinstance(grid, list) and isinstance(values, list)
                and len(grid) == len(values) and len(grid) >= 2,
                f"density {name} grid/values malformed")
