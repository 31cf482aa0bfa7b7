"""Labeled datasets: container, CSV round-trip, and a small PCA helper."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

Array = np.ndarray


@dataclass
class LabeledDataset:
    """Feature vectors with integer class labels and a split tag."""

    samples: Array
    labels: Array
    classes: tuple[int, ...] = ()
    split: str = "train"

    def __post_init__(self) -> None:
        self.samples = np.atleast_2d(np.asarray(self.samples, dtype=float))
        self.labels = np.asarray(self.labels, dtype=int)
        if len(self.samples) != len(self.labels):
            raise ValidationError(
                f"{len(self.samples)} samples but {len(self.labels)} labels"
            )
        if not np.all(np.isfinite(self.samples)):
            raise ValidationError("samples must be finite")
        if not self.classes:
            self.classes = tuple(sorted(np.unique(self.labels).tolist()))
        else:
            self.classes = tuple(int(c) for c in self.classes)
        unknown = set(self.labels.tolist()) - set(self.classes)
        if unknown:
            raise ValidationError(f"labels {sorted(unknown)} not in class list {self.classes}")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def dim(self) -> int:
        return self.samples.shape[1]

    def by_class(self, label: int) -> Array:
        if label not in self.classes:
            raise ValidationError(f"unknown class {label}")
        return self.samples[self.labels == label]

    def class_counts(self) -> dict[int, int]:
        return {c: int(np.sum(self.labels == c)) for c in self.classes}


def save_csv(dataset: LabeledDataset, path) -> None:
    """Write feature columns f0..f{d-1} plus an integer ``label`` column."""
    header = ",".join([f"f{i}" for i in range(dataset.dim)] + ["label"])
    body = np.column_stack([dataset.samples, dataset.labels.astype(float)])
    np.savetxt(path, body, delimiter=",", header=header, comments="", fmt="%.17g")


def load_csv(path, split: str = "train") -> LabeledDataset:
    """Read a dataset written by save_csv (or any CSV with a trailing label column)."""
    try:
        body = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except Exception as exc:
        raise ValidationError(f"cannot parse dataset CSV {path}: {exc}") from exc
    if body.shape[1] < 2:
        raise ValidationError(f"{path}: need at least one feature column and a label column")
    labels = body[:, -1]
    if not np.allclose(labels, np.round(labels)):
        raise ValidationError(f"{path}: label column must hold integers")
    return LabeledDataset(samples=body[:, :-1], labels=np.round(labels).astype(int), split=split)


@dataclass
class PcaProjection:
    """Orthonormal projection fitted on data; used for plots and presets."""

    mean: Array
    components: Array  # (k, d)
    explained: Array = field(default=None)

    def apply(self, X: Array) -> Array:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return (X - self.mean) @ self.components.T


def pca_fit(X: Array, k: int) -> PcaProjection:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if not 1 <= k <= X.shape[1]:
        raise ValidationError(f"PCA dimension {k} outside [1, {X.shape[1]}]")
    mean = X.mean(axis=0)
    _, svals, vt = np.linalg.svd(X - mean, full_matrices=False)
    var = svals**2 / max(len(X) - 1, 1)
    return PcaProjection(mean=mean, components=vt[:k], explained=var[:k])
