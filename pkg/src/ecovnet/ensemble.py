"""Hard (plurality vote) and soft (probability averaging) snapshot ensembles."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ecovnet.errors import ArgumentError, DimensionError


@dataclass
class PredictionSet:
    """Per-snapshot softmax outputs, shape (samples, M, C), in snapshot cycle order.

    Only the last ``m`` snapshots take part in a vote.
    """
    probs: np.ndarray
    m: int | None = None

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 3:
            raise DimensionError(f"expected (samples, M, C) probabilities, got {self.probs.shape}")
        if self.m is None:
            self.m = self.probs.shape[1]
        if not 1 <= self.m <= self.probs.shape[1]:
            raise ArgumentError(f"m={self.m} outside 1..{self.probs.shape[1]}")

    @property
    def used(self) -> np.ndarray:
        return self.probs[:, -self.m:, :]

    @classmethod
    def from_snapshots(cls, per_snapshot: list[np.ndarray], m: int | None = None) -> "PredictionSet":
        """Stack a list of (samples, C) arrays, one per snapshot."""
        if not per_snapshot:
            raise ArgumentError("no snapshot predictions")
        return cls(np.stack(per_snapshot, axis=1), m)


def _check(pset: PredictionSet) -> None:
    if pset.probs.shape[0] == 0 or pset.probs.shape[1] == 0:
        raise ArgumentError("empty prediction set")


def soft_ensemble(pset: PredictionSet) -> tuple[np.ndarray, np.ndarray]:
    """Argmax of the mean of the last m probability vectors. Returns (labels, mean probs)."""
    _check(pset)
    mean = pset.used.mean(axis=1)
    return mean.argmax(axis=1), mean


def hard_ensemble(pset: PredictionSet) -> np.ndarray:
    """Plurality vote of the last m snapshots' argmax labels.

    Ties go to the tied class with the larger mean probability, then to
    the lowest class index.
    """
    _check(pset)
    used = pset.used
    C = used.shape[2]
    votes = used.argmax(axis=2)                               # (samples, m)
    counts = np.apply_along_axis(np.bincount, 1, votes, minlength=C)
    mean = used.mean(axis=1)
    tied = counts == counts.max(axis=1, keepdims=True)
    # argmax returns the first maximum, giving the lowest-index fallback
    return np.where(tied, mean, -np.inf).argmax(axis=1)


def single_snapshot(pset: PredictionSet, index: int = -1) -> np.ndarray:
    _check(pset)
    return pset.probs[:, index, :].argmax(axis=1)
