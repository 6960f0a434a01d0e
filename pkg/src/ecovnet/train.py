"""Adam training under a cyclic cosine-annealing schedule with snapshot capture."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ecovnet import ops
from ecovnet.augment import AugmentRanges, apply_affine, sample_affine
from ecovnet.errors import ArgumentError, NumericalError
from ecovnet.model import ModelParams, backward, forward

log = logging.getLogger(__name__)

L1_COEFF = 1e-5
L2_COEFF = 1e-3


@dataclass
class TrainConfig:
    epochs: int = 25
    batch_size: int = 8
    lr: float = 1e-4
    cycles: int = 5
    seed: int = 0
    class_weights: str = "none"  # or "inverse-frequency"
    augment: bool = False
    ranges: AugmentRanges = field(default_factory=AugmentRanges)

    def __post_init__(self):
        if not (self.epochs >= self.cycles >= 1):
            raise ArgumentError("need epochs >= cycles >= 1")
        if self.batch_size < 1:
            raise ArgumentError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ArgumentError("lr must be positive")
        if self.class_weights not in ("none", "inverse-frequency"):
            raise ArgumentError(f"unknown class_weights mode {self.class_weights!r}")
        if len(self.snapshot_epochs()) != self.cycles:
            raise ArgumentError(f"{self.epochs} epochs cannot be cut into {self.cycles} cycles "
                                f"of length ceil(T/M)={self.cycle_length}")

    @property
    def cycle_length(self) -> int:
        return -(-self.epochs // self.cycles)

    def snapshot_epochs(self) -> list[int]:
        L = self.cycle_length
        return sorted({min(k * L, self.epochs) for k in range(1, -(-self.epochs // L) + 1)})


def cosine_lr(t: int, cfg: TrainConfig) -> float:
    """Learning rate for 1-based epoch ``t``."""
    if not 1 <= t <= cfg.epochs:
        raise ArgumentError(f"epoch {t} outside 1..{cfg.epochs}")
    L = cfg.cycle_length
    return cfg.lr / 2.0 * (math.cos(math.pi * ((t - 1) % L) / L) + 1.0)


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update, applied in place to ``params`` and ``state``."""
    if lr <= 0:
        raise ArgumentError("lr must be positive")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter {name}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ArgumentError(f"gradient shape {g.shape} does not match {name} {p.shape}")
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)


def class_weights(counts) -> np.ndarray:
    """Inverse-frequency weights ``N / (C * count_i)``."""
    counts = np.asarray(counts, dtype=np.float64)
    if counts.ndim != 1 or counts.size == 0:
        raise ArgumentError("need a 1-D histogram")
    if np.any(counts < 1):
        raise ArgumentError("every class needs at least one sample")
    return counts.sum() / (counts.size * counts)


@dataclass
class ImageSet:
    """Grayscale images (N, H, W) in [0, 1] with integer labels."""
    images: np.ndarray
    labels: np.ndarray
    paths: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.labels)


def to_batch(gray: np.ndarray, dtype) -> np.ndarray:
    """Replicate (N, H, W) grayscale to (N, 3, H, W)."""
    return np.repeat(gray[:, None, :, :], 3, axis=1).astype(dtype, copy=False)


@dataclass
class Snapshot:
    cycle: int
    epoch: int
    model: ModelParams
    train_loss: float
    val_acc: float


@dataclass
class SnapshotBundle:
    snapshots: list[Snapshot]
    config: TrainConfig
    log: list[dict] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.snapshots)


def predict_proba(model: ModelParams, gray: np.ndarray, batch_size: int = 64) -> np.ndarray:
    out = []
    for i in range(0, len(gray), batch_size):
        out.append(forward(model, to_batch(gray[i:i + batch_size], model.dtype)).probs)
    return np.concatenate(out).astype(np.float64) if out else np.zeros((0, model.arch.num_classes))


def evaluate(model: ModelParams, data: ImageSet) -> tuple[float, float]:
    """Unweighted cross-entropy and accuracy."""
    probs = predict_proba(model, data.images)
    onehot = np.eye(model.arch.num_classes)[data.labels]
    loss = ops.cross_entropy_loss(probs, onehot)
    return loss, float(np.mean(probs.argmax(axis=1) == data.labels))


def _augment_batch(gray: np.ndarray, cfg: TrainConfig, rng: np.random.Generator) -> np.ndarray:
    out = np.empty_like(gray)
    for i, img in enumerate(gray):
        out[i] = apply_affine(img, sample_affine(cfg.ranges, rng))
    return out


def train_step(model: ModelParams, adam: AdamState, gray: np.ndarray, labels: np.ndarray,
               weights: np.ndarray | None, lr: float, rng: np.random.Generator) -> float:
    """One Adam step on the regularized objective. Returns the data term only."""
    C = model.arch.num_classes
    onehot = np.eye(C)[labels]
    res = forward(model, to_batch(gray, model.dtype), training=True, rng=rng)
    reg = [model.params[n] for n in model.regularized_names()]
    data_loss = ops.cross_entropy_loss(res.probs, onehot, weights)
    total = ops.cross_entropy_loss(res.probs, onehot, weights, L1_COEFF, L2_COEFF, reg)
    if not math.isfinite(total):
        raise NumericalError("training loss is not finite")
    dlogits = ops.softmax_cross_entropy_backward(res.probs, onehot.astype(res.probs.dtype), weights)
    grads = backward(model, res, dlogits)
    for n in model.regularized_names():
        grads[n] = grads[n] + ops.regularization_grad(model.params[n], L1_COEFF, L2_COEFF).astype(model.dtype)
    adam_step(model.params, grads, adam, lr)
    return data_loss


def train_with_snapshots(model: ModelParams, train: ImageSet, val: ImageSet, cfg: TrainConfig,
                         on_epoch: Callable[[dict], None] | None = None) -> SnapshotBundle:
    """Train ``model`` in place for ``cfg.epochs`` epochs, copying it at the end of every cycle."""
    if len(train) == 0 or len(val) == 0:
        raise ArgumentError("train and validation splits must be non-empty")
    res = model.arch.resolution
    if train.images.shape[1:] != (res, res):
        raise ArgumentError(f"images are {train.images.shape[1:]}, model expects {res}x{res}")
    C = model.arch.num_classes
    weights = None
    if cfg.class_weights == "inverse-frequency":
        weights = class_weights(np.bincount(train.labels, minlength=C))

    shuffle_rng, aug_rng, drop_rng = (np.random.default_rng(s)
                                      for s in np.random.SeedSequence(cfg.seed).spawn(3))
    adam = AdamState.zeros_like(model.params)
    snap_epochs = cfg.snapshot_epochs()
    bundle = SnapshotBundle([], cfg)

    for epoch in range(1, cfg.epochs + 1):
        lr = cosine_lr(epoch, cfg)
        order = shuffle_rng.permutation(len(train))
        losses, sizes = [], []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            gray = train.images[idx]
            if cfg.augment:
                gray = _augment_batch(gray, cfg, aug_rng)
            losses.append(train_step(model, adam, gray, train.labels[idx], weights, lr, drop_rng))
            sizes.append(len(idx))
        train_loss = float(np.average(losses, weights=sizes))
        val_loss, val_acc = evaluate(model, val)
        row = dict(epoch=epoch, lr=lr, train_loss=train_loss, val_loss=val_loss, val_acc=val_acc)
        bundle.log.append(row)
        log.info("epoch %d lr=%.3g train_loss=%.4f val_loss=%.4f val_acc=%.4f",
                 epoch, lr, train_loss, val_loss, val_acc)
        if on_epoch:
            on_epoch(row)
        if epoch in snap_epochs:
            bundle.snapshots.append(Snapshot(len(bundle.snapshots) + 1, epoch, model.copy(), train_loss, val_acc))
    return bundle


def format_log(rows: list[dict]) -> str:
    lines = ["epoch,lr,train_loss,val_loss,val_acc"]
    lines += [f"{r['epoch']},{r['lr']:.10g},{r['train_loss']:.8g},{r['val_loss']:.8g},{r['val_acc']:.6g}"
              for r in rows]
    return "\n".join(lines) + "\n"
