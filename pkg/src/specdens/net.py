"""A small fully-connected softmax classifier in plain numpy, built for
curvature analysis rather than speed.

Everything downstream needs exact, deterministic derivatives of the mean
cross-entropy loss in a flat parameter vector:

- `gradient`   — reverse mode,
- `hvp`        — full Hessian-vector products by forward-over-reverse,
- `gnvp`       — the outer-product (Gauss-Newton) curvature term, computed
  per example as J^T (diag(p) - p p^T) J v without materializing J,
- `hvp_h`      — the remainder, so hvp(v) = gnvp(v) + hvp_h(v) holds
  bit-exactly by construction.

The flat layout is part of the checkpoint contract: for each layer in
order, the weight matrix (row-major, shape (fan_out, fan_in)) followed by
its bias. Hidden activations are tanh by default — twice differentiable,
which the Hessian products need — with relu available.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field

import numpy as np

from .data import LabeledDataset, one_hot
from .errors import DimensionMismatchError, InputFormatError, UsageError
from .operators import SymmetricOperator

_CHECKPOINT_VERSION = 1

_ACTIVATIONS = ("tanh", "relu")


@dataclass(frozen=True)
class MlpSpec:
    """Architecture: layer widths input..output, and the hidden activation."""

    layer_dims: tuple[int, ...]
    activation: str = "tanh"

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        if len(dims) < 3:
            raise UsageError("need at least one hidden layer")
        if any(d < 1 for d in dims):
            raise UsageError("all layer widths must be >= 1")
        if self.activation not in _ACTIVATIONS:
            raise UsageError(
                f"unknown activation {self.activation!r}; pick from {_ACTIVATIONS}"
            )
        object.__setattr__(self, "layer_dims", dims)

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def class_count(self) -> int:
        return self.layer_dims[-1]

    @property
    def depth(self) -> int:
        """Number of weight layers."""
        return len(self.layer_dims) - 1

    @property
    def param_count(self) -> int:
        return sum(
            dout * din + dout
            for din, dout in zip(self.layer_dims[:-1], self.layer_dims[1:])
        )

    def to_dict(self) -> dict:
        return {"layer_dims": list(self.layer_dims), "activation": self.activation}

    @classmethod
    def from_dict(cls, d: dict) -> "MlpSpec":
        return cls(layer_dims=tuple(d["layer_dims"]), activation=d["activation"])


def unflatten(spec: MlpSpec, theta: np.ndarray) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Split a flat parameter vector into per-layer (weights, biases)."""
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (spec.param_count,):
        raise UsageError(
            f"theta has {theta.shape} entries, spec wants ({spec.param_count},)"
        )
    Ws, bs = [], []
    pos = 0
    for din, dout in zip(spec.layer_dims[:-1], spec.layer_dims[1:]):
        Ws.append(theta[pos:pos + dout * din].reshape(dout, din))
        pos += dout * din
        bs.append(theta[pos:pos + dout])
        pos += dout
    return Ws, bs


def flatten(Ws: list[np.ndarray], bs: list[np.ndarray]) -> np.ndarray:
    parts = []
    for W, b in zip(Ws, bs):
        parts.append(np.asarray(W, dtype=np.float64).ravel())
        parts.append(np.asarray(b, dtype=np.float64).ravel())
    return np.concatenate(parts)


def init_params(spec: MlpSpec, seed: int = 0) -> np.ndarray:
    """Gaussian fan-in init for weights, zero biases. Deterministic."""
    rng = np.random.default_rng([seed, 0])
    Ws, bs = [], []
    for din, dout in zip(spec.layer_dims[:-1], spec.layer_dims[1:]):
        Ws.append(rng.standard_normal((dout, din)) / np.sqrt(din))
        bs.append(np.zeros(dout))
    return flatten(Ws, bs)


# ---------------------------------------------------------------------------
# forward / backward cores (all outputs are sums over the batch; callers
# divide by the global example count once, so chunking cannot change results)
# ---------------------------------------------------------------------------

def _phi_prime(spec: MlpSpec, S: np.ndarray, A: np.ndarray) -> np.ndarray:
    if spec.activation == "tanh":
        return 1.0 - A * A
    return (S > 0.0).astype(np.float64)


def _phi_second(spec: MlpSpec, S: np.ndarray, A: np.ndarray) -> np.ndarray:
    if spec.activation == "tanh":
        return -2.0 * A * (1.0 - A * A)
    return np.zeros_like(S)


def _forward(spec: MlpSpec, Ws, bs, X):
    """Returns layer inputs [A_0..A_{L-1}], hidden (S_l, A_l) pairs, logits."""
    acts = [X]
    hidden = []
    A = X
    L = spec.depth
    for l in range(L):
        S = A @ Ws[l].T + bs[l]
        if l < L - 1:
            A = np.tanh(S) if spec.activation == "tanh" else np.maximum(S, 0.0)
            hidden.append((S, A))
            acts.append(A)
        else:
            logits = S
    return acts, hidden, logits


def _softmax(Z: np.ndarray) -> np.ndarray:
    Z = Z - np.max(Z, axis=1, keepdims=True)
    E = np.exp(Z)
    return E / E.sum(axis=1, keepdims=True)


def _loss_sum(Z: np.ndarray, y: np.ndarray) -> float:
    zmax = np.max(Z, axis=1)
    lse = zmax + np.log(np.sum(np.exp(Z - zmax[:, None]), axis=1))
    return float(np.sum(lse - Z[np.arange(Z.shape[0]), y]))


def _backward_sums(spec: MlpSpec, Ws, acts, hidden, D):
    """Plain VJP from logit cotangents D (n, C); returns summed grads."""
    L = spec.depth
    gWs = [None] * L
    gbs = [None] * L
    for l in range(L - 1, -1, -1):
        gWs[l] = D.T @ acts[l]
        gbs[l] = D.sum(axis=0)
        if l > 0:
            S, A = hidden[l - 1]
            D = (D @ Ws[l]) * _phi_prime(spec, S, A)
    return gWs, gbs


def _r_forward(spec: MlpSpec, Ws, bs, Vs, vbs, acts, hidden):
    """Directional (JVP) pass along (Vs, vbs); returns RA list, RS list, RZ."""
    L = spec.depth
    RA = np.zeros_like(acts[0])
    RAs = [RA]
    RSs = []
    for l in range(L):
        RS = acts[l] @ Vs[l].T + RA @ Ws[l].T + vbs[l]
        if l < L - 1:
            S, A = hidden[l]
            RA = _phi_prime(spec, S, A) * RS
            RAs.append(RA)
            RSs.append(RS)
        else:
            RZ = RS
    return RAs, RSs, RZ


def _fisher_mul(P: np.ndarray, U: np.ndarray) -> np.ndarray:
    """Per-example (diag(p) - p p^T) u for row-aligned P, U."""
    return P * U - P * np.sum(P * U, axis=1, keepdims=True)


def _chunks(n: int, size: int):
    for lo in range(0, n, size):
        yield lo, min(lo + size, n)


def _accumulate(total, part):
    if total is None:
        return part
    gW, gb = total
    pW, pb = part
    return ([a + b for a, b in zip(gW, pW)], [a + b for a, b in zip(gb, pb)])


# ---------------------------------------------------------------------------
# public API
# ---------------------------------------------------------------------------

def predict_logits(spec: MlpSpec, theta: np.ndarray, X: np.ndarray) -> np.ndarray:
    Ws, bs = unflatten(spec, theta)
    _, _, Z = _forward(spec, Ws, bs, np.asarray(X, dtype=np.float64))
    return Z


def predict_probs(spec: MlpSpec, theta: np.ndarray, X: np.ndarray) -> np.ndarray:
    return _softmax(predict_logits(spec, theta, X))


def loss(spec: MlpSpec, theta: np.ndarray, data: LabeledDataset,
         batch_size: int = 1024) -> float:
    """Mean cross-entropy over all examples."""
    _check_data(spec, data)
    Ws, bs = unflatten(spec, theta)
    total = 0.0
    for lo, hi in _chunks(data.n, batch_size):
        _, _, Z = _forward(spec, Ws, bs, data.x[lo:hi])
        total += _loss_sum(Z, data.y[lo:hi])
    return total / data.n


def error_rate(spec: MlpSpec, theta: np.ndarray, data: LabeledDataset,
               batch_size: int = 1024) -> float:
    """Misclassification fraction under argmax decoding."""
    _check_data(spec, data)
    Ws, bs = unflatten(spec, theta)
    wrong = 0
    for lo, hi in _chunks(data.n, batch_size):
        _, _, Z = _forward(spec, Ws, bs, data.x[lo:hi])
        wrong += int(np.sum(np.argmax(Z, axis=1) != data.y[lo:hi]))
    return wrong / data.n


def gradient(spec: MlpSpec, theta: np.ndarray, data: LabeledDataset,
             batch_size: int = 1024) -> np.ndarray:
    """Gradient of the mean cross-entropy loss, flat layout."""
    _check_data(spec, data)
    Ws, bs = unflatten(spec, theta)
    total = None
    for lo, hi in _chunks(data.n, batch_size):
        acts, hidden, Z = _forward(spec, Ws, bs, data.x[lo:hi])
        D = _softmax(Z) - one_hot(data.y[lo:hi], spec.class_count)
        total = _accumulate(total, _backward_sums(spec, Ws, acts, hidden, D))
    gWs, gbs = total
    return flatten(gWs, gbs) / data.n


def hvp(spec: MlpSpec, theta: np.ndarray, data: LabeledDataset, v: np.ndarray,
        batch_size: int = 1024) -> np.ndarray:
    """Hessian-vector product of the mean loss, forward-over-reverse.

    One joint pass per chunk: a directional forward sweep alongside the
    activations, then a backward sweep that propagates the cotangent and
    its directional derivative together. Cost is a small constant times a
    gradient; memory is O(batch * widths).
    """
    _check_data(spec, data)
    Ws, bs = unflatten(spec, theta)
    Vs, vbs = unflatten(spec, v)
    C = spec.class_count
    L = spec.depth
    total = None
    for lo, hi in _chunks(data.n, batch_size):
        acts, hidden, Z = _forward(spec, Ws, bs, data.x[lo:hi])
        RAs, RSs, RZ = _r_forward(spec, Ws, bs, Vs, vbs, acts, hidden)
        P = _softmax(Z)
        D = P - one_hot(data.y[lo:hi], C)
        RD = _fisher_mul(P, RZ)
        gWs = [None] * L
        gbs = [None] * L
        for l in range(L - 1, -1, -1):
            gWs[l] = RD.T @ acts[l] + D.T @ RAs[l]
            gbs[l] = RD.sum(axis=0)
            if l > 0:
                S, A = hidden[l - 1]
                U = D @ Ws[l]
                RU = RD @ Ws[l] + D @ Vs[l]
                prime = _phi_prime(spec, S, A)
                D = U * prime
                RD = RU * prime + U * _phi_second(spec, S, A) * RSs[l - 1]
        total = _accumulate(total, (gWs, gbs))
    gWs, gbs = total
    return flatten(gWs, gbs) / data.n


def gnvp(spec: MlpSpec, theta: np.ndarray, data: LabeledDataset, v: np.ndarray,
         batch_size: int = 1024) -> np.ndarray:
    """Outer-product curvature term: average of J^T (diag(p) - p p^T) J v.

    Per example: push v through the directional forward pass (u = J v),
    multiply by the softmax second-moment factor, and pull back with a
    plain VJP. The Jacobian J is never formed. Positive semidefinite by
    construction.
    """
    _check_data(spec, data)
    Ws, bs = unflatten(spec, theta)
    Vs, vbs = unflatten(spec, v)
    total = None
    for lo, hi in _chunks(data.n, batch_size):
        acts, hidden, Z = _forward(spec, Ws, bs, data.x[lo:hi])
        _, _, RZ = _r_forward(spec, Ws, bs, Vs, vbs, acts, hidden)
        W = _fisher_mul(_softmax(Z), RZ)
        total = _accumulate(total, _backward_sums(spec, Ws, acts, hidden, W))
    gWs, gbs = total
    return flatten(gWs, gbs) / data.n


def hvp_h(spec: MlpSpec, theta: np.ndarray, data: LabeledDataset, v: np.ndarray,
          batch_size: int = 1024) -> np.ndarray:
    """The non-outer-product remainder: hvp(v) - gnvp(v), exactly."""
    return (hvp(spec, theta, data, v, batch_size=batch_size)
            - gnvp(spec, theta, data, v, batch_size=batch_size))


def per_example_logit_vjp(spec: MlpSpec, theta: np.ndarray, X: np.ndarray,
                          cotangents: np.ndarray) -> np.ndarray:
    """Per-example parameter vectors J_i^T c_i, stacked as (n, p).

    ``cotangents`` has one logit-space row per example. This materializes
    n flat parameter vectors, so it is meant for the desk-scale analyses
    in :mod:`specdens.decomp`, not for training-sized runs.
    """
    X = np.asarray(X, dtype=np.float64)
    cot = np.asarray(cotangents, dtype=np.float64)
    Ws, bs = unflatten(spec, theta)
    if X.ndim != 2 or cot.shape != (X.shape[0], spec.class_count):
        raise UsageError("inputs and cotangents must align per example")
    if X.shape[0] == 0:
        raise UsageError("need at least one example")
    acts, hidden, _ = _forward(spec, Ws, bs, X)
    n = X.shape[0]
    L = spec.depth
    D = cot
    blocks_W = [None] * L
    blocks_b = [None] * L
    for l in range(L - 1, -1, -1):
        blocks_W[l] = np.einsum("ni,nj->nij", D, acts[l]).reshape(n, -1)
        blocks_b[l] = D.copy()
        if l > 0:
            S, A = hidden[l - 1]
            D = (D @ Ws[l]) * _phi_prime(spec, S, A)
    parts = []
    for l in range(L):
        parts.append(blocks_W[l])
        parts.append(blocks_b[l])
    return np.concatenate(parts, axis=1)


def _check_data(spec: MlpSpec, data: LabeledDataset) -> None:
    if data.input_dim != spec.input_dim:
        raise DimensionMismatchError(
            f"data dim {data.input_dim} != network input dim {spec.input_dim}"
        )
    if data.class_count != spec.class_count:
        raise DimensionMismatchError(
            f"data classes {data.class_count} != network classes {spec.class_count}"
        )


_WHICH = ("hess", "g", "h")


def hessian_operator(spec: MlpSpec, theta: np.ndarray, data: LabeledDataset,
                     which: str = "hess",
                     batch_size: int = 1024) -> SymmetricOperator:
    """Curvature of the mean loss on ``data`` as a matrix-free operator.

    ``which`` selects the full Hessian ("hess"), the outer-product term
    ("g"), or the remainder ("h"). The label records both the kind and the
    data split, so derived operators read e.g. "hess[train]-g[train]".
    """
    if which not in _WHICH:
        raise UsageError(f"which must be one of {_WHICH}, got {which!r}")
    _check_data(spec, data)
    theta = np.array(theta, dtype=np.float64, copy=True)
    fn = {"hess": hvp, "g": gnvp, "h": hvp_h}[which]

    def matvec(v):
        return fn(spec, theta, data, v, batch_size=batch_size)

    split = data.split or "data"
    return SymmetricOperator(spec.param_count, matvec, label=f"{which}[{split}]")


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Checkpoint:
    """A training snapshot: parameters plus enough state to resume exactly."""

    spec: MlpSpec
    theta: np.ndarray
    epoch: int
    seed: int
    lr: float
    velocity: np.ndarray | None = None
    meta: dict = field(default_factory=dict)


def save_checkpoint(path, ck: Checkpoint) -> None:
    payload = {
        "format_version": np.int64(_CHECKPOINT_VERSION),
        "layer_dims": np.asarray(ck.spec.layer_dims, dtype=np.int64),
        "activation": np.str_(ck.spec.activation),
        "theta": np.asarray(ck.theta, dtype=np.float64),
        "epoch": np.int64(ck.epoch),
        "seed": np.int64(ck.seed),
        "lr": np.float64(ck.lr),
        "meta_json": np.str_(json.dumps(ck.meta, sort_keys=True)),
    }
    if ck.velocity is not None:
        payload["velocity"] = np.asarray(ck.velocity, dtype=np.float64)
    buf = io.BytesIO()
    np.savez(buf, **payload)
    from .storage import atomic_write_bytes

    atomic_write_bytes(path, buf.getvalue())


def load_checkpoint(path) -> Checkpoint:
    try:
        with np.load(path, allow_pickle=False) as z:
            version = int(z["format_version"])
            if version != _CHECKPOINT_VERSION:
                raise InputFormatError(
                    f"checkpoint format version {version} unsupported "
                    f"(expected {_CHECKPOINT_VERSION})"
                )
            spec = MlpSpec(
                layer_dims=tuple(int(d) for d in z["layer_dims"]),
                activation=str(z["activation"]),
            )
            theta = np.asarray(z["theta"], dtype=np.float64)
            velocity = (np.asarray(z["velocity"], dtype=np.float64)
                        if "velocity" in z.files else None)
            ck = Checkpoint(
                spec=spec,
                theta=theta,
                epoch=int(z["epoch"]),
                seed=int(z["seed"]),
                lr=float(z["lr"]),
                velocity=velocity,
                meta=json.loads(str(z["meta_json"])),
            )
    except (OSError, KeyError, ValueError) as err:
        raise InputFormatError(f"unreadable checkpoint {path}: {err}") from err
    if ck.theta.shape != (spec.param_count,):
        raise InputFormatError(
            f"checkpoint theta has {ck.theta.shape}, spec wants "
            f"({spec.param_count},)"
        )
    return ck
