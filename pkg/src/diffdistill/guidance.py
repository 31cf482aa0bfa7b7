"""Representativeness guidance for the reverse sampler.

The condition likelihood is a Boltzmann distribution over the mean
kernel-induced distance between a sample and a batch of same-class
training points; its score is, up to the scale gamma, the negative
gradient of that mean distance through the feature map. Each guided
step therefore adds gamma * g_t to the plain reverse step, where g_t
points downhill on the energy. Guidance is disabled for t <= t_stop,
so t_stop = 0 guides every step and t_stop = T reproduces the unguided
sampler exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .data import LabeledDataset
from .errors import ValidationError
from .kernels import FeatureMapSpec, KernelSpec
from .scores import DenoiserScoreModel
from .sde import NoiseSchedule, RngStream, ancestral_step, forward_noise, x0_estimate

Array = np.ndarray

DEFAULT_REFERENCE_BATCH = 256


@dataclass(frozen=True)
class GuidanceConfig:
    """Scale, early stop, kernel, feature map, and reference-batch size.

    gamma = 0 must reduce to vanilla sampling; guided_step short-circuits
    in that case so the reduction is exact. ``frozen_ref_noise`` reuses
    one noise draw per reference across all steps of a trajectory instead
    of redrawing it fresh per step. ``guide_denoised`` measures the energy
    on the affine denoised estimate against clean references instead of
    on the noisy state against noised references.
    """

    gamma: float = 0.2
    t_stop: int = 25
    kernel: KernelSpec = field(default_factory=KernelSpec)
    feature_map: FeatureMapSpec = field(default_factory=FeatureMapSpec)
    reference_batch: int = DEFAULT_REFERENCE_BATCH
    frozen_ref_noise: bool = False
    guide_denoised: bool = False

    def __post_init__(self) -> None:
        if not np.isfinite(self.gamma) or self.gamma < 0:
            raise ValidationError(f"gamma must be finite and >= 0, got {self.gamma}")
        if self.t_stop < 0:
            raise ValidationError(f"t_stop must be >= 0, got {self.t_stop}")
        if self.reference_batch < 1:
            raise ValidationError("reference_batch must be >= 1")

    def to_dict(self) -> dict:
        return {
            "gamma": self.gamma,
            "t_stop": self.t_stop,
            "kernel": self.kernel.to_dict(),
            "feature_map": self.feature_map.to_dict(),
            "reference_batch": self.reference_batch,
            "frozen_ref_noise": self.frozen_ref_noise,
            "guide_denoised": self.guide_denoised,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GuidanceConfig":
        return cls(
            gamma=float(d["gamma"]),
            t_stop=int(d["t_stop"]),
            kernel=KernelSpec.from_dict(d["kernel"]),
            feature_map=FeatureMapSpec.from_dict(d["feature_map"]),
            reference_batch=int(d["reference_batch"]),
            frozen_ref_noise=bool(d.get("frozen_ref_noise", False)),
            guide_denoised=bool(d.get("guide_denoised", False)),
        )


@dataclass
class GuidanceStats:
    """Instrumentation: how many steps actually evaluated the guidance branch."""

    guided_steps: int = 0
    trajectories: int = 0
    per_trajectory: list = field(default_factory=list)


class FeatureExtractor:
    """Resolves a FeatureMapSpec into features and their input pullback.

    Identity and random-projection maps are closed-form; denoiser-hidden
    maps run the score backend's network and backpropagate through it,
    so they require a DenoiserScoreModel.
    """

    def __init__(self, map_spec: FeatureMapSpec, score_model=None):
        self.map_spec = map_spec
        self.score_model = score_model
        if map_spec.kind == "denoiser-hidden":
            if not isinstance(score_model, DenoiserScoreModel):
                raise ValidationError("denoiser-hidden feature maps require the denoiser backend")
            score_model.model.hidden_width(map_spec.layer_index)

    def features(self, X: Array, t: int | None = None, label: int | None = None) -> Array:
        if self.map_spec.kind == "denoiser-hidden":
            feats, _ = self.score_model.features_with_cache(
                X, self._step(t), label, self.map_spec.layer_index
            )
            return feats
        return kernels.apply_feature_map(self.map_spec, X)

    def value_and_pullback(self, x: Array, t: int | None = None, label: int | None = None):
        """Features of a single point plus a function mapping feature-space
        gradients back to input-space gradients."""
        x = np.asarray(x, dtype=float)
        if self.map_spec.kind == "identity":
            return x, lambda g: np.asarray(g, dtype=float)
        if self.map_spec.kind == "random-projection":
            M = kernels.projection_matrix(self.map_spec, x.shape[-1])
            return x @ M.T, lambda g: np.asarray(g, dtype=float) @ M
        feats, cache = self.score_model.features_with_cache(
            x, self._step(t), label, self.map_spec.layer_index
        )
        layer = self.map_spec.layer_index
        return feats, lambda g: self.score_model.input_grad_from_cache(cache, g, layer)

    @staticmethod
    def _step(t: int | None) -> int:
        if t is None:
            raise ValidationError("denoiser-hidden features need the step index t")
        return t


class ReferenceBank:
    """Per-class clean training samples plus noised-view caching.

    Noised references are regenerated per trajectory and step; the cache
    only serves callers that pass an explicit key, so independent
    trajectories never alias each other's noise.
    """

    def __init__(self, train: LabeledDataset, cache_limit: int = 4096):
        self._by_class = {c: train.by_class(c).copy() for c in train.classes}
        self._cache: dict = {}
        self._cache_limit = cache_limit

    @property
    def class_labels(self) -> tuple[int, ...]:
        return tuple(sorted(self._by_class))

    def class_size(self, label: int) -> int:
        self._check(label)
        return len(self._by_class[label])

    def clean(self, label: int) -> Array:
        self._check(label)
        return self._by_class[label]

    def sample_refs(self, label: int, n: int, rng: RngStream) -> Array:
        """Uniform without-replacement batch of min(n, class size) clean samples."""
        pool = self.clean(label)
        k = min(n, len(pool))
        return pool[rng.choice_without_replacement(len(pool), k)]

    def noised_refs(
        self,
        refs: Array,
        schedule: NoiseSchedule,
        t: int,
        rng: RngStream | None = None,
        eps: Array | None = None,
        cache_key: tuple | None = None,
    ) -> Array:
        if cache_key is not None and cache_key in self._cache:
            return self._cache[cache_key]
        noised, _ = forward_noise(schedule, refs, t, rng, eps=eps)
        if cache_key is not None:
            if len(self._cache) >= self._cache_limit:
                self._cache.clear()
            self._cache[cache_key] = noised
        return noised

    def _check(self, label: int) -> None:
        if label not in self._by_class:
            raise ValidationError(f"class {label} missing from reference bank")


def representativeness_energy(
    cfg: GuidanceConfig,
    x: Array,
    refs: Array,
    extractor: FeatureExtractor | None = None,
    t: int | None = None,
    label: int | None = None,
) -> float:
    """Mean kernel-induced distance from x to the reference batch.

    The condition log-likelihood is -gamma times this value up to an
    additive constant; the normalizer is never computed since it drops
    out of the gradient.
    """
    refs = np.atleast_2d(np.asarray(refs, dtype=float))
    if len(refs) == 0:
        raise ValidationError("reference batch must be non-empty")
    ext = extractor or FeatureExtractor(cfg.feature_map)
    fx = ext.features(np.asarray(x, dtype=float), t, label)
    fr = ext.features(refs, t, label)
    d = kernels.pairwise_distance(cfg.kernel, fx[None, :], fr)[0]
    return float(d.mean())


def guidance_gradient(
    cfg: GuidanceConfig,
    x_t: Array,
    refs_t: Array,
    t: int | None = None,
    label: int | None = None,
    extractor: FeatureExtractor | None = None,
) -> Array:
    """g_t = -grad_x of the mean feature-space distance to the references.

    Adding gamma * g_t to a state decreases the energy; references below
    the zero-distance tolerance contribute a zero subgradient.
    """
    refs_t = np.atleast_2d(np.asarray(refs_t, dtype=float))
    if len(refs_t) == 0:
        raise ValidationError("reference batch must be non-empty")
    ext = extractor or FeatureExtractor(cfg.feature_map)
    fx, pullback = ext.value_and_pullback(np.asarray(x_t, dtype=float), t, label)
    fr = ext.features(refs_t, t, label)
    per_ref = kernels.distance_gradients(cfg.kernel, fx, fr)
    return -pullback(per_ref.mean(axis=0))


def guided_step(
    cfg: GuidanceConfig,
    schedule: NoiseSchedule,
    score,
    bank: ReferenceBank,
    label: int,
    x_t: Array,
    t: int,
    rng: RngStream,
    ref_rng: RngStream | None = None,
    refs: Array | None = None,
    ref_eps: Array | None = None,
    stats: GuidanceStats | None = None,
    first_order: bool = False,
    extractor: FeatureExtractor | None = None,
) -> Array:
    """One reverse step with energy guidance above the early-stop boundary.

    For gamma = 0 or t <= t_stop the guidance branch is not evaluated and
    the result is bit-identical to the unguided step under a shared rng.
    """
    eps_pred = score.eps(x_t, t, label)
    base = ancestral_step(schedule, x_t, eps_pred, t, rng, first_order=first_order)
    if cfg.gamma == 0.0 or t <= cfg.t_stop:
        return base
    if stats is not None:
        stats.guided_steps += 1
    if refs is None:
        if ref_rng is None:
            raise ValidationError("guided_step needs refs or a reference rng")
        refs = bank.sample_refs(label, cfg.reference_batch, ref_rng)
    if cfg.guide_denoised:
        # energy on the affine denoised estimate against clean references;
        # the chain factor through the estimate is 1/sqrt(alpha_bar_t)
        x0h = x0_estimate(schedule, x_t, eps_pred, t)
        g = guidance_gradient(cfg, x0h, refs, t=t, label=label, extractor=extractor)
        g = g / np.sqrt(schedule.alpha_bar(t))
    else:
        refs_t = bank.noised_refs(refs, schedule, t, ref_rng, eps=ref_eps)
        g = guidance_gradient(cfg, x_t, refs_t, t=t, label=label, extractor=extractor)
    return base + cfg.gamma * g


def trajectory_stream(seed: int, index: int, prefix: tuple = ()) -> RngStream:
    """The stream feeding a trajectory's init draw and ancestral noise."""
    return RngStream(seed, key=prefix + ("traj", index))


def reference_stream(seed: int, index: int, prefix: tuple = ()) -> RngStream:
    """The dedicated stream feeding a trajectory's reference selection and noise."""
    return RngStream(seed, key=prefix + ("refs", index))


def sample_distilled(
    cfg: GuidanceConfig,
    schedule: NoiseSchedule,
    score,
    bank: ReferenceBank,
    label: int,
    ipc: int,
    seed: int,
    stats: GuidanceStats | None = None,
    first_order: bool = False,
    stream_prefix: tuple = (),
) -> Array:
    """ipc independent guided trajectories for one class, as an (ipc, d) array.

    Every trajectory owns two derived streams, one for its Gaussian init
    and ancestral noise and one for reference subsampling and noising, so
    runs are reproducible and guidance never perturbs the base sampler's
    draws.
    """
    if ipc < 1:
        raise ValidationError(f"ipc must be >= 1, got {ipc}")
    if cfg.t_stop > schedule.T:
        raise ValidationError(f"t_stop {cfg.t_stop} exceeds schedule length {schedule.T}")
    dim = bank.clean(label).shape[1]
    guidance_active = cfg.gamma > 0.0 and cfg.t_stop < schedule.T
    extractor = FeatureExtractor(cfg.feature_map, score) if guidance_active else None
    out = np.empty((ipc, dim))
    for i in range(ipc):
        rng = trajectory_stream(seed, i, stream_prefix)
        ref_rng = reference_stream(seed, i, stream_prefix)
        refs = ref_eps = None
        if guidance_active:
            refs = bank.sample_refs(label, cfg.reference_batch, ref_rng)
            if cfg.frozen_ref_noise and not cfg.guide_denoised:
                ref_eps = ref_rng.normal(refs.shape)
        before = stats.guided_steps if stats is not None else 0
        x = rng.normal(dim)
        for t in range(schedule.T, 0, -1):
            x = guided_step(
                cfg, schedule, score, bank, label, x, t, rng,
                ref_rng=ref_rng, refs=refs, ref_eps=ref_eps,
                stats=stats, first_order=first_order, extractor=extractor,
            )
        if stats is not None:
            stats.trajectories += 1
            stats.per_trajectory.append(stats.guided_steps - before)
        out[i] = x
    return out
