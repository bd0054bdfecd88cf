"""Desk-scale data and training: Gaussian-mixture synthesis, IDX image
loading, and a bit-reproducible SGD loop with momentum and weight decay.

Reproducibility is the load-bearing property here. Initialization derives
from (seed, 0), epoch e's shuffle from (seed, e); the update order is
frozen (decay added to the gradient, then folded into the momentum
buffer); checkpoints carry the momentum buffer, so a resumed run replays
the exact remaining trajectory of an uninterrupted one.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field

import numpy as np

from .data import LabeledDataset
from .errors import InputFormatError, UsageError
from .net import Checkpoint, MlpSpec, error_rate, gradient, init_params
from .net import loss as net_loss

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


# ---------------------------------------------------------------------------
# synthetic Gaussian mixture
# ---------------------------------------------------------------------------

def _strict_from_dict(cls, d: dict, what: str):
    import dataclasses

    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - allowed
    if unknown:
        raise UsageError(f"unknown {what} key(s): {', '.join(sorted(unknown))}")
    try:
        return cls(**d)
    except TypeError as err:
        raise UsageError(f"bad {what}: {err}") from err


@dataclass(frozen=True)
class GmmSpec:
    """Isotropic Gaussian blobs, one per class, means on orthogonal axes."""

    classes: int
    n_per_class: int
    dim: int
    separation: float
    std: float = 1.0
    seed: int = 0
    n_test_per_class: int | None = None

    def __post_init__(self):
        if self.classes < 2:
            raise UsageError("need at least two classes")
        if self.dim < self.classes:
            raise UsageError(
                f"dim {self.dim} < classes {self.classes}: class means are "
                "placed on distinct coordinate axes"
            )
        if self.n_per_class < 1:
            raise UsageError("n_per_class must be >= 1")
        if self.std <= 0 or self.separation < 0:
            raise UsageError("std must be positive and separation nonnegative")

    @classmethod
    def from_dict(cls, d: dict) -> "GmmSpec":
        return _strict_from_dict(cls, d, "gmm spec")


def gaussian_mixture(spec: GmmSpec) -> tuple[LabeledDataset, LabeledDataset]:
    """Deterministic train/test draw. Class c is N(separation * e_c, std^2 I)."""
    rng = np.random.default_rng(spec.seed)
    n_test = spec.n_test_per_class or spec.n_per_class
    means = np.zeros((spec.classes, spec.dim))
    means[np.arange(spec.classes), np.arange(spec.classes)] = spec.separation

    def draw(count: int, split: str) -> LabeledDataset:
        xs, ys = [], []
        for c in range(spec.classes):
            xs.append(means[c] + spec.std * rng.standard_normal((count, spec.dim)))
            ys.append(np.full(count, c, dtype=np.int64))
        return LabeledDataset(
            x=np.vstack(xs), y=np.concatenate(ys),
            class_count=spec.classes, split=split,
        )

    return draw(spec.n_per_class, "train"), draw(n_test, "test")


# ---------------------------------------------------------------------------
# IDX image/label files
# ---------------------------------------------------------------------------

def _read_maybe_gzip(path) -> bytes:
    with open(path, "rb") as fh:
        head = fh.read(2)
        fh.seek(0)
        if head == b"\x1f\x8b":
            with gzip.open(fh) as gz:
                return gz.read()
        return fh.read()


def load_idx(images_path, labels_path,
             limit_per_class: int | None = None) -> LabeledDataset:
    """Load an IDX image/label pair into a dataset.

    Pixels are scaled to [0, 1] and flattened; headers are big-endian per
    the format. With ``limit_per_class``, keeps the first k examples of
    each class in file order — a deterministic subsample independent of
    any RNG. Raises :class:`InputFormatError` for bad magic, truncation,
    or an image/label count mismatch.
    """
    raw = _read_maybe_gzip(images_path)
    if len(raw) < 16:
        raise InputFormatError(f"{images_path}: too short for an IDX image header")
    magic, count, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise InputFormatError(
            f"{images_path}: bad magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}"
        )
    need = 16 + count * rows * cols
    if len(raw) != need:
        raise InputFormatError(
            f"{images_path}: payload is {len(raw) - 16} bytes, "
            f"expected {need - 16} for {count} images of {rows}x{cols}"
        )
    images = np.frombuffer(raw, dtype=np.uint8, offset=16)
    x = images.reshape(count, rows * cols).astype(np.float64) / 255.0

    raw_l = _read_maybe_gzip(labels_path)
    if len(raw_l) < 8:
        raise InputFormatError(f"{labels_path}: too short for an IDX label header")
    magic_l, count_l = struct.unpack(">II", raw_l[:8])
    if magic_l != IDX_LABELS_MAGIC:
        raise InputFormatError(
            f"{labels_path}: bad magic 0x{magic_l:08x}, expected 0x{IDX_LABELS_MAGIC:08x}"
        )
    if len(raw_l) != 8 + count_l:
        raise InputFormatError(f"{labels_path}: truncated label payload")
    if count_l != count:
        raise InputFormatError(
            f"image/label count mismatch: {count} images vs {count_l} labels"
        )
    y = np.frombuffer(raw_l, dtype=np.uint8, offset=8).astype(np.int64)
    class_count = int(y.max()) + 1 if y.size else 1

    if limit_per_class is not None:
        if limit_per_class < 1:
            raise UsageError("limit_per_class must be >= 1")
        seen = np.zeros(class_count, dtype=np.int64)
        keep = np.zeros(y.size, dtype=bool)
        for i, label in enumerate(y):
            if seen[label] < limit_per_class:
                keep[i] = True
                seen[label] += 1
        x, y = x[keep], y[keep]

    return LabeledDataset(x=x, y=y, class_count=class_count, split="train")


# ---------------------------------------------------------------------------
# SGD with momentum and weight decay
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters plus the deterministic schedule knobs.

    ``anneal_at`` defaults to one- and two-thirds of the run; at each
    listed epoch boundary the learning rate is multiplied by
    ``anneal_factor``. ``checkpoint_epochs`` defaults to the geometric set
    {0, 1, 2, 4, 8, ...} plus the final epoch.
    """

    epochs: int
    lr: float
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 128
    seed: int = 0
    anneal_factor: float = 0.1
    anneal_at: tuple[int, ...] | None = None
    checkpoint_epochs: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise UsageError("epochs must be >= 1")
        if self.lr < 0:
            raise UsageError("lr must be nonnegative")
        if not 0 <= self.momentum < 1:
            raise UsageError("momentum must be in [0, 1)")
        if self.batch_size < 1:
            raise UsageError("batch_size must be >= 1")
        if self.anneal_at is not None:
            object.__setattr__(self, "anneal_at",
                               tuple(int(e) for e in self.anneal_at))
        if self.checkpoint_epochs is not None:
            object.__setattr__(self, "checkpoint_epochs",
                               tuple(int(e) for e in self.checkpoint_epochs))

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        for key in ("anneal_at", "checkpoint_epochs"):
            if key in d and d[key] is not None:
                d[key] = tuple(d[key])
        return _strict_from_dict(cls, d, "train config")

    def anneal_points(self) -> tuple[int, ...]:
        if self.anneal_at is not None:
            return self.anneal_at
        return (self.epochs // 3, (2 * self.epochs) // 3)

    def lr_for_epoch(self, epoch: int) -> float:
        """Learning rate in effect during 1-based epoch ``epoch``."""
        stage = sum(1 for a in self.anneal_points() if 0 < a < epoch)
        return self.lr * self.anneal_factor ** stage

    def checkpoint_set(self) -> set[int]:
        if self.checkpoint_epochs is not None:
            return set(self.checkpoint_epochs) | {self.epochs}
        out = {0, self.epochs}
        k = 1
        while k <= self.epochs:
            out.add(k)
            k *= 2
        return out

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs, "lr": self.lr, "momentum": self.momentum,
            "weight_decay": self.weight_decay, "batch_size": self.batch_size,
            "seed": self.seed, "anneal_factor": self.anneal_factor,
            "anneal_at": list(self.anneal_points()),
            "checkpoint_epochs": sorted(self.checkpoint_set()),
        }


@dataclass(frozen=True)
class EpochMetrics:
    epoch: int
    lr: float
    train_loss: float
    train_error: float
    test_loss: float
    test_error: float

    def row(self) -> tuple:
        return (self.epoch, self.lr, self.train_loss, self.train_error,
                self.test_loss, self.test_error)


METRICS_COLUMNS = ("epoch", "lr", "train_loss", "train_error",
                   "test_loss", "test_error")


@dataclass
class TrainResult:
    checkpoints: list[Checkpoint] = field(default_factory=list)
    metrics: list[EpochMetrics] = field(default_factory=list)
    diverged: bool = False

    @property
    def final(self) -> Checkpoint:
        if not self.checkpoints:
            raise UsageError("no checkpoints recorded")
        return self.checkpoints[-1]


def train_sgd(spec: MlpSpec, train: LabeledDataset, test: LabeledDataset,
              config: TrainConfig,
              resume_from: Checkpoint | None = None) -> TrainResult:
    """Momentum SGD on the mean cross-entropy, bit-reproducible.

    Per step: g = grad(batch) + weight_decay * theta; buf = momentum * buf
    + g; theta -= lr * buf. Shuffling for epoch e comes from seed (seed, e)
    regardless of history, so resuming from a checkpoint (which carries
    the momentum buffer) replays the identical remaining run. Divergence
    (non-finite epoch loss) stops the run and flags the result; the last
    recorded checkpoint is the last good state.
    """
    if train.class_count != spec.class_count or train.input_dim != spec.input_dim:
        raise UsageError("training data does not match the network spec")
    seed = config.seed
    if resume_from is None:
        theta = init_params(spec, seed)
        buf = np.zeros_like(theta)
        start_epoch = 0
    else:
        if resume_from.spec != spec:
            raise UsageError("checkpoint spec does not match requested network")
        if resume_from.epoch > config.epochs:
            raise UsageError(
                f"checkpoint is at epoch {resume_from.epoch}, beyond "
                f"epochs={config.epochs}"
            )
        theta = resume_from.theta.copy()
        buf = (resume_from.velocity.copy() if resume_from.velocity is not None
               else np.zeros_like(theta))
        start_epoch = resume_from.epoch
        seed = resume_from.seed

    ck_set = config.checkpoint_set()
    result = TrainResult()

    def evaluate(epoch: int, lr_now: float) -> EpochMetrics:
        return EpochMetrics(
            epoch=epoch,
            lr=lr_now,
            train_loss=net_loss(spec, theta, train),
            train_error=error_rate(spec, theta, train),
            test_loss=net_loss(spec, theta, test),
            test_error=error_rate(spec, theta, test),
        )

    def snapshot(epoch: int, lr_now: float) -> Checkpoint:
        return Checkpoint(
            spec=spec, theta=theta.copy(), epoch=epoch, seed=seed, lr=lr_now,
            velocity=buf.copy(), meta={"config": config.to_dict()},
        )

    if start_epoch == 0:
        result.metrics.append(evaluate(0, config.lr_for_epoch(1)))
        if 0 in ck_set:
            result.checkpoints.append(snapshot(0, config.lr_for_epoch(1)))

    n = train.n
    for epoch in range(start_epoch + 1, config.epochs + 1):
        lr_now = config.lr_for_epoch(epoch)
        perm = np.random.default_rng([seed, epoch]).permutation(n)
        for lo in range(0, n, config.batch_size):
            idx = perm[lo:lo + config.batch_size]
            batch = LabeledDataset(x=train.x[idx], y=train.y[idx],
                                   class_count=train.class_count)
            g = gradient(spec, theta, batch)
            g += config.weight_decay * theta
            buf = config.momentum * buf + g
            theta = theta - lr_now * buf
        row = evaluate(epoch, lr_now)
        if not all(np.isfinite(v) for v in
                   (row.train_loss, row.test_loss)):
            result.diverged = True
            break
        result.metrics.append(row)
        if epoch in ck_set:
            result.checkpoints.append(snapshot(epoch, lr_now))
    return result
