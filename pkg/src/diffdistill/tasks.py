"""Built-in task presets.

``rings-and-blobs`` is the default benchmark: four classes in 2-D, each a
two-component mixture whose modes sit on adjacent positions of an
eight-point circle, so classes are bimodal and neighbouring classes
overlap. ``digits-pca`` projects the small public handwritten-digit set
to 16 dimensions to exercise non-synthetic data with a learned score.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import LabeledDataset, pca_fit
from .errors import ValidationError
from .scores import ClassMixture, GmmSpec, gmm_sample
from .sde import RngStream

RING_RADIUS = 2.5
RING_SIGMA = 0.7
RING_CLASSES = 4

DEFAULT_TRAIN_PER_CLASS = 500
DEFAULT_TEST_PER_CLASS = 1000

TASK_NAMES = ("rings-and-blobs", "digits-pca")


@dataclass
class Task:
    name: str
    train: LabeledDataset
    test: LabeledDataset
    gmm: GmmSpec | None = None  # analytic ground truth, when the task is synthetic


def rings_and_blobs_spec() -> GmmSpec:
    angles = np.arange(2 * RING_CLASSES) * (np.pi / RING_CLASSES)
    means = np.stack([RING_RADIUS * np.cos(angles), RING_RADIUS * np.sin(angles)], axis=1)
    var = np.full((2, 2), RING_SIGMA**2)
    classes = tuple(
        ClassMixture(
            label=c,
            weights=np.array([0.5, 0.5]),
            means=means[[2 * c, 2 * c + 1]],
            variances=var,
        )
        for c in range(RING_CLASSES)
    )
    return GmmSpec(classes=classes)


def make_rings_and_blobs(
    seed: int = 0,
    train_per_class: int = DEFAULT_TRAIN_PER_CLASS,
    test_per_class: int = DEFAULT_TEST_PER_CLASS,
) -> Task:
    spec = rings_and_blobs_spec()
    rng = RngStream(seed, key=("task", "rings-and-blobs"))
    train = gmm_sample(spec, train_per_class, rng.derive("train"), split="train")
    test = gmm_sample(spec, test_per_class, rng.derive("test"), split="test")
    return Task(name="rings-and-blobs", train=train, test=test, gmm=spec)


def make_digits_pca(seed: int = 0, dim: int = 16, test_fraction: float = 0.3) -> Task:
    from sklearn.datasets import load_digits

    raw = load_digits()
    X = np.asarray(raw.data, dtype=float) / 16.0
    y = np.asarray(raw.target, dtype=int)
    proj = pca_fit(X, dim)
    Z = proj.apply(X)
    rng = RngStream(seed, key=("task", "digits-pca"))
    order = np.argsort(rng.uniform(size=len(Z)))
    n_test = int(round(test_fraction * len(Z)))
    test_idx, train_idx = order[:n_test], order[n_test:]
    train = LabeledDataset(Z[train_idx], y[train_idx], split="train")
    test = LabeledDataset(Z[test_idx], y[test_idx], classes=train.classes, split="test")
    return Task(name="digits-pca", train=train, test=test, gmm=None)


def make_task(name: str, seed: int = 0, **kwargs) -> Task:
    if name == "rings-and-blobs":
        return make_rings_and_blobs(seed=seed, **kwargs)
    if name == "digits-pca":
        return make_digits_pca(seed=seed, **kwargs)
    raise ValidationError(f"unknown task preset {name!r}; known: {', '.join(TASK_NAMES)}")
