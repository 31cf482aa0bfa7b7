"""Mercer kernels, the kernel-induced distance, and feature maps.

A positive semi-definite kernel K induces the distance

    D(x, y) = sqrt(K(x,x) + K(y,y) - 2 K(x,y)),

which equals the Euclidean norm between feature-space images of x and y
and therefore satisfies the metric axioms. Two kernels are provided:
linear (K = x.y) and RBF (K = exp(-||x-y||^2 / 2 sigma^2)). The RBF
induced distance is sqrt(2 - 2 exp(-||x-y||^2 / 2 sigma^2)), a bounded,
saturating function of the Euclidean distance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

Array = np.ndarray

LINEAR = "linear"
RBF = "rbf"

# Bandwidths exposed as ready-made presets for sweeps.
RBF_BANDWIDTH_PRESETS = (0.5, 1.0, 2.0)

# Below this induced distance the gradient direction is undefined; the
# zero subgradient is used instead.
ZERO_DISTANCE_TOL = 1e-12


@dataclass(frozen=True)
class KernelSpec:
    """Kernel selection: ``linear`` or ``rbf`` with bandwidth sigma > 0."""

    kind: str = LINEAR
    bandwidth: float = 1.0

    def __post_init__(self) -> None:
        if self.kind not in (LINEAR, RBF):
            raise ValidationError(f"unknown kernel kind {self.kind!r}")
        if not np.isfinite(self.bandwidth) or self.bandwidth <= 0.0:
            raise ValidationError(f"bandwidth must be positive, got {self.bandwidth}")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "bandwidth": self.bandwidth}

    @classmethod
    def from_dict(cls, d: dict) -> "KernelSpec":
        return cls(kind=d["kind"], bandwidth=float(d.get("bandwidth", 1.0)))


def _check_pair(x: Array, y: Array) -> tuple[Array, Array]:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValidationError(f"expected two vectors of equal dimension, got {x.shape} and {y.shape}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValidationError("kernel inputs must be finite")
    return x, y


def kernel_eval(spec: KernelSpec, x: Array, y: Array) -> float:
    """Evaluate K(x, y) for two vectors."""
    x, y = _check_pair(x, y)
    if spec.kind == LINEAR:
        return float(x @ y)
    d2 = float(np.sum((x - y) ** 2))
    return float(np.exp(-d2 / (2.0 * spec.bandwidth**2)))


def kernel_matrix(spec: KernelSpec, X: Array, Y: Array) -> Array:
    """Cross Gram matrix K[i, j] = K(X[i], Y[j]) for (n,d) and (m,d) inputs."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    if X.shape[1] != Y.shape[1]:
        raise ValidationError(f"dimension mismatch: {X.shape[1]} vs {Y.shape[1]}")
    if spec.kind == LINEAR:
        return X @ Y.T
    d2 = _sq_dists(X, Y)
    return np.exp(-d2 / (2.0 * spec.bandwidth**2))


def gram_matrix(spec: KernelSpec, batch: Array) -> Array:
    """Symmetric Gram matrix of a non-empty batch of same-dimension vectors."""
    B = np.atleast_2d(np.asarray(batch, dtype=float))
    if B.size == 0:
        raise ValidationError("gram_matrix requires a non-empty batch")
    G = kernel_matrix(spec, B, B)
    # enforce exact symmetry against float asymmetry in the matmul
    return 0.5 * (G + G.T)


def _sq_dists(X: Array, Y: Array) -> Array:
    # ||x - y||^2 expanded; clamped at 0 to absorb round-off
    xn = np.sum(X * X, axis=1)[:, None]
    yn = np.sum(Y * Y, axis=1)[None, :]
    return np.maximum(xn + yn - 2.0 * (X @ Y.T), 0.0)


def induced_distance(spec: KernelSpec, x: Array, y: Array) -> float:
    """Kernel-induced distance; the radicand is clamped at 0 before the root."""
    kxx = kernel_eval(spec, x, x)
    kyy = kernel_eval(spec, y, y)
    kxy = kernel_eval(spec, x, y)
    return float(np.sqrt(max(kxx + kyy - 2.0 * kxy, 0.0)))


def _dist_from_sq(spec: KernelSpec, d2: Array) -> Array:
    if spec.kind == LINEAR:
        return np.sqrt(d2)
    rad = 2.0 - 2.0 * np.exp(-d2 / (2.0 * spec.bandwidth**2))
    return np.sqrt(np.maximum(rad, 0.0))


def paired_distance(spec: KernelSpec, X: Array, Y: Array) -> Array:
    """Induced distances between matching rows of X and Y, shape (n,)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    if X.shape != Y.shape:
        raise ValidationError(f"paired inputs must share a shape, got {X.shape} and {Y.shape}")
    diff = X - Y
    return _dist_from_sq(spec, np.sum(diff * diff, axis=1))


# above this many scratch floats the cross-distance falls back to the
# norm expansion, which is less exact near zero but memory-bounded
_PAIRWISE_DIRECT_LIMIT = 5_000_000


def pairwise_distance(spec: KernelSpec, X: Array, Y: Array) -> Array:
    """Induced distances D[i, j] between rows of X (n,d) and Y (m,d)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    if X.shape[1] != Y.shape[1]:
        raise ValidationError(f"dimension mismatch: {X.shape[1]} vs {Y.shape[1]}")
    if X.shape[0] * Y.shape[0] * X.shape[1] <= _PAIRWISE_DIRECT_LIMIT:
        diff = X[:, None, :] - Y[None, :, :]
        d2 = np.sum(diff * diff, axis=2)
    else:
        d2 = _sq_dists(X, Y)
    return _dist_from_sq(spec, d2)


def distance_gradients(spec: KernelSpec, x: Array, refs: Array) -> Array:
    """Per-reference gradients d/dx D(x, r_i), shape (n_refs, d).

    Rows where D(x, r_i) falls below ZERO_DISTANCE_TOL are zeroed: any
    subgradient is valid at the minimum and zero is the stable choice.
    """
    x = np.asarray(x, dtype=float)
    R = np.atleast_2d(np.asarray(refs, dtype=float))
    if x.ndim != 1 or R.shape[1] != x.shape[0]:
        raise ValidationError(f"dimension mismatch: x {x.shape} vs refs {R.shape}")
    diff = x[None, :] - R  # (n, d)
    if spec.kind == LINEAR:
        dist = np.linalg.norm(diff, axis=1)
        safe = np.where(dist < ZERO_DISTANCE_TOL, 1.0, dist)
        grads = diff / safe[:, None]
    else:
        s2 = spec.bandwidth**2
        d2 = np.sum(diff * diff, axis=1)
        k = np.exp(-d2 / (2.0 * s2))
        dist = np.sqrt(np.maximum(2.0 - 2.0 * k, 0.0))
        safe = np.where(dist < ZERO_DISTANCE_TOL, 1.0, dist)
        # dD/dx = (k / (sigma^2 D)) (x - r)
        grads = (k / (s2 * safe))[:, None] * diff
    grads[dist < ZERO_DISTANCE_TOL] = 0.0
    return grads


@dataclass(frozen=True, eq=False)
class FeatureMapSpec:
    """Feature map phi used inside the factorized distance.

    kind: ``identity``, ``random-projection`` or ``denoiser-hidden``.
    Random projections draw a (out_dim, in_dim) matrix with entries
    N(0, 1/out_dim) from ``seed``, so distances are preserved in
    expectation across output sizes; an explicitly supplied ``matrix``
    is used verbatim. ``denoiser-hidden`` reads the activations of
    hidden layer ``layer_index`` of a denoiser backbone and is resolved
    by the guidance layer, which owns the model.
    """

    kind: str = "identity"
    out_dim: int | None = None
    seed: int = 0
    matrix: Array | None = field(default=None, repr=False)
    layer_index: int = 1

    def __post_init__(self) -> None:
        if self.kind not in ("identity", "random-projection", "denoiser-hidden"):
            raise ValidationError(f"unknown feature map kind {self.kind!r}")
        if self.kind == "random-projection":
            if self.matrix is not None:
                M = np.asarray(self.matrix, dtype=float)
                if M.ndim != 2 or M.shape[0] < 1 or not np.all(np.isfinite(M)):
                    raise ValidationError("projection matrix must be a finite 2-D array")
                object.__setattr__(self, "matrix", M)
                object.__setattr__(self, "out_dim", M.shape[0])
            elif self.out_dim is None or self.out_dim < 1:
                raise ValidationError("random-projection needs out_dim >= 1 or an explicit matrix")
        if self.kind == "denoiser-hidden" and self.layer_index < 0:
            raise ValidationError("layer_index must be >= 0")

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.kind == "random-projection":
            d["seed"] = self.seed
            d["out_dim"] = self.out_dim
            if self.matrix is not None:
                d["matrix"] = np.asarray(self.matrix).tolist()
        if self.kind == "denoiser-hidden":
            d["layer_index"] = self.layer_index
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureMapSpec":
        matrix = np.asarray(d["matrix"], dtype=float) if "matrix" in d else None
        return cls(
            kind=d["kind"],
            out_dim=d.get("out_dim"),
            seed=int(d.get("seed", 0)),
            matrix=matrix,
            layer_index=int(d.get("layer_index", 1)),
        )


def projection_matrix(spec: FeatureMapSpec, in_dim: int) -> Array:
    """The (out_dim, in_dim) matrix realizing a random-projection map."""
    if spec.kind != "random-projection":
        raise ValidationError("projection_matrix applies to random-projection maps only")
    if spec.matrix is not None:
        M = np.asarray(spec.matrix, dtype=float)
        if M.shape[1] != in_dim:
            raise ValidationError(f"projection expects inputs of dim {M.shape[1]}, got {in_dim}")
        return M
    rng = np.random.default_rng(np.random.SeedSequence((int(spec.seed), in_dim, spec.out_dim)))
    return rng.standard_normal((spec.out_dim, in_dim)) / np.sqrt(spec.out_dim)


def apply_feature_map(spec: FeatureMapSpec, X: Array) -> Array:
    """Apply an identity or random-projection map to (d,) or (n,d) input.

    Denoiser-hidden maps need a model and are resolved in the guidance
    layer; calling them here is an error.
    """
    X = np.asarray(X, dtype=float)
    if spec.kind == "identity":
        return X
    if spec.kind == "denoiser-hidden":
        raise ValidationError("denoiser-hidden feature maps require a denoiser backend")
    in_dim = X.shape[-1]
    M = projection_matrix(spec, in_dim)
    return X @ M.T


def factorized_distance(map_spec: FeatureMapSpec, x: Array, y: Array, norm: str = "euclidean") -> float:
    """Distance in feature space: ||phi(x) - phi(y)||_2.

    For the identity map this coincides with the linear-kernel induced
    distance, which is the factorization property made executable.
    """
    if norm != "euclidean":
        raise ValidationError(f"unsupported norm {norm!r}")
    x, y = _check_pair(x, y)
    fx = apply_feature_map(map_spec, x)
    fy = apply_feature_map(map_spec, y)
    return float(np.linalg.norm(fx - fy))
