"""Noise predictors: an exact Gaussian-mixture score and a small trainable denoiser.

The analytic backend computes the exact score of the noised mixture
marginal (each component mean scaled by sqrt(alpha_bar_t), covariance
alpha_bar_t * Sigma + (1 - alpha_bar_t) * I) and converts it to the
noise-prediction convention eps = -sqrt(1 - alpha_bar_t) * score. It is
training-free, so guidance experiments can be run against an oracle.

The denoiser is a plain fully-connected net on [x, time embedding,
one-hot class] with hand-rolled reverse mode, because guidance needs
exact gradients of feature-space distances with respect to the input.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .data import LabeledDataset
from .errors import NumericalError, ValidationError
from .sde import NoiseSchedule, RngStream, forward_noise

Array = np.ndarray

CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# Gaussian mixture ground truth
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ClassMixture:
    """One class: mixture weights, component means, diagonal covariances."""

    label: int
    weights: Array
    means: Array      # (k, d)
    variances: Array  # (k, d), entries > 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "weights", np.asarray(self.weights, dtype=float))
        object.__setattr__(self, "means", np.atleast_2d(np.asarray(self.means, dtype=float)))
        object.__setattr__(self, "variances", np.atleast_2d(np.asarray(self.variances, dtype=float)))
        if self.weights.ndim != 1 or len(self.weights) != len(self.means):
            raise ValidationError("weights must match the number of components")
        if not np.isclose(self.weights.sum(), 1.0) or np.any(self.weights < 0):
            raise ValidationError("weights must form a simplex")
        if self.variances.shape != self.means.shape:
            raise ValidationError("variances must match means in shape")
        if np.any(self.variances <= 0):
            raise ValidationError("variances must be positive")


@dataclass(frozen=True)
class GmmSpec:
    """Per-class Gaussian mixtures sharing one data dimension."""

    classes: tuple[ClassMixture, ...]

    def __post_init__(self) -> None:
        if not self.classes:
            raise ValidationError("GmmSpec needs at least one class")
        dims = {cm.means.shape[1] for cm in self.classes}
        if len(dims) != 1:
            raise ValidationError(f"all class means must share one dimension, got {dims}")

    @property
    def dim(self) -> int:
        return self.classes[0].means.shape[1]

    @property
    def labels(self) -> tuple[int, ...]:
        return tuple(cm.label for cm in self.classes)

    def class_mixture(self, label: int) -> ClassMixture:
        for cm in self.classes:
            if cm.label == label:
                return cm
        raise ValidationError(f"unknown class {label}")


def gmm_sample(spec: GmmSpec, n_per_class: int, rng: RngStream, split: str = "train") -> LabeledDataset:
    """Draw n_per_class points from every class mixture."""
    xs, ys = [], []
    for cm in spec.classes:
        comp = rng.integers(0, len(cm.weights), size=n_per_class)
        # weights beyond uniform: inverse-CDF over the simplex
        if not np.allclose(cm.weights, cm.weights[0]):
            u = rng.uniform(size=n_per_class)
            comp = np.searchsorted(np.cumsum(cm.weights), u)
        mu = cm.means[comp]
        sd = np.sqrt(cm.variances[comp])
        xs.append(mu + sd * rng.normal((n_per_class, spec.dim)))
        ys.append(np.full(n_per_class, cm.label))
    return LabeledDataset(np.concatenate(xs), np.concatenate(ys), classes=spec.labels, split=split)


def _components_at(
    spec: GmmSpec, schedule: NoiseSchedule | None, t: int, label: int | None
) -> tuple[Array, Array, Array]:
    """Mixture components of the forward-process marginal at step t.

    label None gives the marginal over classes with a uniform class prior.
    """
    if t == 0 or schedule is None:
        ab = 1.0
    else:
        ab = schedule.alpha_bar(t)
    if label is None:
        mixtures = spec.classes
        prior = 1.0 / len(mixtures)
        w = np.concatenate([prior * cm.weights for cm in mixtures])
        mu = np.concatenate([cm.means for cm in mixtures])
        var = np.concatenate([cm.variances for cm in mixtures])
    else:
        cm = spec.class_mixture(label)
        w, mu, var = cm.weights, cm.means, cm.variances
    return w, np.sqrt(ab) * mu, ab * var + (1.0 - ab)


def _check_x(spec: GmmSpec, x: Array) -> tuple[Array, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    if X.shape[1] != spec.dim:
        raise ValidationError(f"input dim {X.shape[1]} does not match mixture dim {spec.dim}")
    return X, single


def gmm_logpdf(
    spec: GmmSpec, x: Array, schedule: NoiseSchedule | None = None, t: int = 0, label: int | None = None
) -> Array | float:
    """Exact log density of the (optionally noised, optionally class-conditional) mixture."""
    X, single = _check_x(spec, x)
    w, mu, var = _components_at(spec, schedule, t, label)
    diff = X[:, None, :] - mu[None, :, :]
    logcomp = -0.5 * np.sum(diff * diff / var[None, :, :] + np.log(2.0 * np.pi * var)[None, :, :], axis=2)
    logcomp = logcomp + np.log(w)[None, :]
    m = logcomp.max(axis=1, keepdims=True)
    out = (m + np.log(np.sum(np.exp(logcomp - m), axis=1, keepdims=True)))[:, 0]
    return float(out[0]) if single else out


def gmm_score(
    spec: GmmSpec, schedule: NoiseSchedule | None, x: Array, t: int, label: int | None = None
) -> Array:
    """Exact gradient of log p_t at x (same shape as x)."""
    X, single = _check_x(spec, x)
    w, mu, var = _components_at(spec, schedule, t, label)
    diff = X[:, None, :] - mu[None, :, :]
    logcomp = -0.5 * np.sum(diff * diff / var[None, :, :] + np.log(2.0 * np.pi * var)[None, :, :], axis=2)
    logcomp = logcomp + np.log(w)[None, :]
    m = logcomp.max(axis=1, keepdims=True)
    resp = np.exp(logcomp - m)
    resp /= resp.sum(axis=1, keepdims=True)
    grad = -np.sum(resp[:, :, None] * diff / var[None, :, :], axis=1)
    return grad[0] if single else grad


def gmm_eps(
    spec: GmmSpec, schedule: NoiseSchedule, x_t: Array, t: int, label: int | None = None
) -> Array:
    """Noise-prediction view of the exact score: -sqrt(1-alpha_bar_t) * score."""
    schedule._check_t(t)
    ab = schedule.alpha_bar(t)
    return -np.sqrt(1.0 - ab) * gmm_score(spec, schedule, x_t, t, label)


def gmm_nll(spec: GmmSpec, dataset: LabeledDataset) -> float:
    """Mean negative log density of the dataset under the clean mixture, in nats."""
    if len(dataset) == 0:
        raise ValidationError("cannot compute NLL of an empty dataset")
    if dataset.dim != spec.dim:
        raise ValidationError(f"dataset dim {dataset.dim} does not match mixture dim {spec.dim}")
    return float(-np.mean(gmm_logpdf(spec, dataset.samples)))


# ---------------------------------------------------------------------------
# Trainable denoiser
# ---------------------------------------------------------------------------


def time_embedding(t, dim: int) -> Array:
    """Sinusoidal embedding of an integer step index, or of an array of them."""
    if dim < 2 or dim % 2:
        raise ValidationError(f"time embedding dim must be even and >= 2, got {dim}")
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = np.multiply.outer(np.asarray(t, dtype=float), freqs)
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


def _activation(name: str):
    if name == "tanh":
        return np.tanh, lambda a: 1.0 - np.tanh(a) ** 2
    if name == "relu":
        return (lambda a: np.maximum(a, 0.0)), (lambda a: (a > 0).astype(float))
    raise ValidationError(f"unknown activation {name!r}")


@dataclass
class DenoiserModel:
    """Fully-connected noise predictor on [x, time embedding, one-hot class]."""

    weights: list
    biases: list
    data_dim: int
    n_classes: int
    class_labels: tuple[int, ...]
    time_dim: int = 32
    activation: str = "tanh"

    def __post_init__(self) -> None:
        _activation(self.activation)
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape[1] != b.shape[0]:
                raise ValidationError(f"layer {i}: weight/bias shape mismatch")
            if i and self.weights[i - 1].shape[1] != W.shape[0]:
                raise ValidationError(f"layer {i}: not composable with layer {i - 1}")
        if self.weights[0].shape[0] != self.data_dim + self.time_dim + self.n_classes:
            raise ValidationError("first layer does not match input layout")
        if self.weights[-1].shape[1] != self.data_dim:
            raise ValidationError("last layer must produce data_dim outputs")

    @property
    def n_hidden(self) -> int:
        return len(self.weights) - 1

    def hidden_width(self, index: int) -> int:
        if not 0 <= index < self.n_hidden:
            raise ValidationError(f"hidden layer {index} does not exist (have {self.n_hidden})")
        return self.weights[index].shape[1]

    def label_onehot(self, label: int) -> Array:
        if label not in self.class_labels:
            raise ValidationError(f"unknown class {label}")
        oh = np.zeros(self.n_classes)
        oh[self.class_labels.index(label)] = 1.0
        return oh


DEFAULT_HIDDEN = (128, 128, 128)
DEFAULT_FEATURE_LAYER = 1  # middle hidden layer of the default stack


def init_denoiser(
    data_dim: int,
    class_labels: tuple[int, ...],
    rng: RngStream,
    hidden: tuple[int, ...] = DEFAULT_HIDDEN,
    time_dim: int = 32,
    activation: str = "tanh",
) -> DenoiserModel:
    """Random model with 1/sqrt(fan_in) Gaussian weights and zero biases."""
    n_classes = len(class_labels)
    widths = (data_dim + time_dim + n_classes,) + tuple(hidden) + (data_dim,)
    weights, biases = [], []
    for nin, nout in zip(widths[:-1], widths[1:]):
        weights.append(rng.normal((nin, nout)) / np.sqrt(nin))
        biases.append(np.zeros(nout))
    return DenoiserModel(
        weights=weights,
        biases=biases,
        data_dim=data_dim,
        n_classes=n_classes,
        class_labels=tuple(int(c) for c in class_labels),
        time_dim=time_dim,
        activation=activation,
    )


def _assemble_input(model: DenoiserModel, x: Array, t, label: int) -> tuple[Array, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    n = len(X)
    if X.shape[1] != model.data_dim:
        raise ValidationError(f"input dim {X.shape[1]} does not match model dim {model.data_dim}")
    emb = time_embedding(t, model.time_dim)
    if emb.ndim == 1:
        emb = np.tile(emb, (n, 1))
    elif len(emb) != n:
        raise ValidationError(f"{len(emb)} step indices for {n} inputs")
    oh = model.label_onehot(label)
    inp = np.concatenate([X, emb, np.tile(oh, (n, 1))], axis=1)
    return inp, single


def denoiser_forward(
    model: DenoiserModel, x: Array, t, label: int
) -> tuple[Array, list, dict]:
    """Forward pass; returns (eps_pred, hidden activations, cache for backprop).

    ``t`` is one step index shared by the batch, or one index per row.
    """
    inp, single = _assemble_input(model, x, t, label)
    act, _ = _activation(model.activation)
    pre, post = [], []
    h = inp
    for i in range(model.n_hidden):
        a = h @ model.weights[i] + model.biases[i]
        pre.append(a)
        h = act(a)
        post.append(h)
    out = h @ model.weights[-1] + model.biases[-1]
    cache = {"inp": inp, "pre": pre, "post": post, "single": single}
    hidden = [p[0] if single else p for p in post]
    return (out[0] if single else out), hidden, cache


def denoiser_input_grad(
    model: DenoiserModel, grad: Array, cache: dict, at_layer: int | None = None
) -> Array:
    """Reverse-mode gradient with respect to the data part of the input.

    ``grad`` seeds the backward pass at the network output, or at the
    post-activation of hidden layer ``at_layer`` when given; this covers
    distances measured on a hidden-layer feature map.
    """
    if not cache or "pre" not in cache:
        raise ValidationError("missing or stale forward cache")
    single = cache["single"]
    g = np.atleast_2d(np.asarray(grad, dtype=float))
    _, dact = _activation(model.activation)
    if at_layer is None:
        start = model.n_hidden - 1
        if g.shape[1] != model.data_dim:
            raise ValidationError("output gradient has wrong width")
        g = g @ model.weights[-1].T
    else:
        if not 0 <= at_layer < model.n_hidden:
            raise ValidationError(f"hidden layer {at_layer} does not exist")
        if g.shape[1] != model.hidden_width(at_layer):
            raise ValidationError("hidden gradient has wrong width")
        start = at_layer
    for i in range(start, -1, -1):
        g = (g * dact(cache["pre"][i])) @ model.weights[i].T
    g = g[:, : model.data_dim]
    return g[0] if single else g


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: DenoiserModel
    steps: int
    val_eps_mse: float
    train_eps_mse: float
    history: list = field(default_factory=list)


def _weight_grads(model: DenoiserModel, cache: dict, dout: Array) -> tuple[list, list, Array]:
    _, dact = _activation(model.activation)
    gw = [None] * len(model.weights)
    gb = [None] * len(model.biases)
    g = dout
    gw[-1] = cache["post"][-1].T @ g
    gb[-1] = g.sum(axis=0)
    g = g @ model.weights[-1].T
    for i in range(model.n_hidden - 1, -1, -1):
        g = g * dact(cache["pre"][i])
        below = cache["inp"] if i == 0 else cache["post"][i - 1]
        gw[i] = below.T @ g
        gb[i] = g.sum(axis=0)
        g = g @ model.weights[i].T
    return gw, gb, g


def _draw_batch(source, batch_size: int, rng: RngStream):
    if isinstance(source, GmmSpec):
        labels = [source.labels[int(i)] for i in rng.integers(0, len(source.labels), size=batch_size)]
        per = {}
        for lb in labels:
            per[lb] = per.get(lb, 0) + 1
        xs, ys = [], []
        for lb, n in per.items():
            cm = source.class_mixture(lb)
            comp = rng.integers(0, len(cm.weights), size=n)
            xs.append(cm.means[comp] + np.sqrt(cm.variances[comp]) * rng.normal((n, source.dim)))
            ys.extend([lb] * n)
        return np.concatenate(xs), ys
    idx = rng.integers(0, len(source), size=batch_size)
    return source.samples[idx], [int(l) for l in source.labels[idx]]


def _noise_per_example(schedule: NoiseSchedule, X: Array, ts: Array, rng: RngStream):
    ab = schedule.alpha_bars[ts][:, None]  # ts are 1-based step indices
    eps = rng.normal(X.shape)
    return np.sqrt(ab) * X + np.sqrt(1.0 - ab) * eps, eps


def _eps_mse(model: DenoiserModel, schedule: NoiseSchedule, source, n: int, rng: RngStream) -> float:
    X, labels = _draw_batch(source, n, rng)
    total = 0.0
    for lb in sorted(set(labels)):
        mask = np.array([l == lb for l in labels])
        Xc = X[mask]
        ts = rng.integers(1, schedule.T + 1, size=len(Xc))
        xt, eps = _noise_per_example(schedule, Xc, ts, rng)
        pred, _, _ = denoiser_forward(model, xt, ts, lb)
        total += float(np.sum((pred - eps) ** 2))
    return total / (n * X.shape[1])


def train_denoiser(
    source,
    schedule: NoiseSchedule,
    rng: RngStream,
    steps: int = 20_000,
    lr: float = 5e-3,
    batch_size: int = 128,
    momentum: float = 0.9,
    hidden: tuple[int, ...] = DEFAULT_HIDDEN,
    time_dim: int = 32,
    activation: str = "tanh",
    final_lr: float | None = None,
    val_size: int = 16384,
    log_every: int = 1000,
) -> TrainResult:
    """Fit the denoiser by noise-prediction MSE with momentum SGD.

    ``source`` is a GmmSpec (fresh draws every batch) or a LabeledDataset
    (minibatches of rows). ``final_lr`` turns on a linear learning-rate
    decay from lr to that value over the run, which lowers the SGD noise
    floor near convergence. Divergence raises NumericalError naming the
    step.
    """
    if isinstance(source, GmmSpec):
        data_dim, class_labels = source.dim, source.labels
    elif isinstance(source, LabeledDataset):
        data_dim, class_labels = source.dim, source.classes
    else:
        raise ValidationError("source must be a GmmSpec or LabeledDataset")
    model = init_denoiser(data_dim, class_labels, rng.derive("init"), hidden, time_dim, activation)
    vel_w = [np.zeros_like(W) for W in model.weights]
    vel_b = [np.zeros_like(b) for b in model.biases]
    data_rng = rng.derive("batches")
    history = []
    for step in range(1, steps + 1):
        X, labels = _draw_batch(source, batch_size, data_rng)
        loss = 0.0
        gw_acc = [np.zeros_like(W) for W in model.weights]
        gb_acc = [np.zeros_like(b) for b in model.biases]
        for lb in sorted(set(labels)):
            mask = np.array([l == lb for l in labels])
            rows = X[mask]
            ts = data_rng.integers(1, schedule.T + 1, size=len(rows))
            xt, eps = _noise_per_example(schedule, rows, ts, data_rng)
            pred, _, cache = denoiser_forward(model, xt, ts, lb)
            with np.errstate(over="ignore"):
                resid = pred - eps
                loss += float(np.sum(resid**2))
            gw, gb, _ = _weight_grads(model, cache, 2.0 * resid / (batch_size * data_dim))
            for i in range(len(gw_acc)):
                gw_acc[i] += gw[i]
                gb_acc[i] += gb[i]
        loss /= batch_size * data_dim
        if not np.isfinite(loss):
            raise NumericalError(f"training diverged at step {step} (loss={loss})")
        step_lr = lr
        if final_lr is not None and steps > 1:
            step_lr = lr + (final_lr - lr) * (step - 1) / (steps - 1)
        if step_lr > 0:
            for i in range(len(model.weights)):
                vel_w[i] = momentum * vel_w[i] - step_lr * gw_acc[i]
                vel_b[i] = momentum * vel_b[i] - step_lr * gb_acc[i]
                model.weights[i] = model.weights[i] + vel_w[i]
                model.biases[i] = model.biases[i] + vel_b[i]
        if log_every and (step % log_every == 0 or step == steps):
            history.append((step, loss))
    eval_rng = rng.derive("val")
    val_mse = _eps_mse(model, schedule, source, val_size, eval_rng)
    train_mse = _eps_mse(model, schedule, source, val_size, rng.derive("train-eval"))
    return TrainResult(model=model, steps=steps, val_eps_mse=val_mse, train_eps_mse=train_mse, history=history)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_denoiser(model: DenoiserModel, path) -> None:
    """Versioned npz dump with explicit layer shapes in a JSON meta entry."""
    meta = {
        "version": CHECKPOINT_VERSION,
        "data_dim": model.data_dim,
        "n_classes": model.n_classes,
        "class_labels": list(model.class_labels),
        "time_dim": model.time_dim,
        "activation": model.activation,
        "layer_shapes": [list(W.shape) for W in model.weights],
    }
    arrays = {"meta": np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)}
    for i, (W, b) in enumerate(zip(model.weights, model.biases)):
        arrays[f"w{i}"] = W
        arrays[f"b{i}"] = b
    np.savez(path, **arrays)


def load_denoiser(path) -> DenoiserModel:
    with np.load(path) as z:
        meta = json.loads(bytes(z["meta"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValidationError(f"unsupported checkpoint version {meta.get('version')}")
        n_layers = len(meta["layer_shapes"])
        weights = [z[f"w{i}"] for i in range(n_layers)]
        biases = [z[f"b{i}"] for i in range(n_layers)]
    for W, shape in zip(weights, meta["layer_shapes"]):
        if list(W.shape) != shape:
            raise ValidationError("checkpoint layer shapes do not match its meta block")
    return DenoiserModel(
        weights=weights,
        biases=biases,
        data_dim=int(meta["data_dim"]),
        n_classes=int(meta["n_classes"]),
        class_labels=tuple(int(c) for c in meta["class_labels"]),
        time_dim=int(meta["time_dim"]),
        activation=meta["activation"],
    )


# ---------------------------------------------------------------------------
# Score-model backends (one interface for the sampler and guidance)
# ---------------------------------------------------------------------------


class AnalyticScoreModel:
    """Exact mixture noise predictor; the default, training-free backend."""

    backend_id = "analytic"

    def __init__(self, spec: GmmSpec, schedule: NoiseSchedule):
        self.spec = spec
        self.schedule = schedule

    def eps(self, x_t: Array, t: int, label: int | None = None) -> Array:
        return gmm_eps(self.spec, self.schedule, x_t, t, label)


class DenoiserScoreModel:
    """Trained-denoiser backend exposing hidden layers as feature maps."""

    backend_id = "denoiser"

    def __init__(self, model: DenoiserModel):
        self.model = model

    def eps(self, x_t: Array, t: int, label: int | None = None) -> Array:
        if label is None:
            raise ValidationError("the denoiser backend is class-conditional; a label is required")
        out, _, _ = denoiser_forward(self.model, x_t, t, label)
        return out

    def features_with_cache(self, x: Array, t: int, label: int, layer_index: int) -> tuple[Array, dict]:
        self.model.hidden_width(layer_index)
        _, hidden, cache = denoiser_forward(self.model, x, t, label)
        return hidden[layer_index], cache

    def input_grad_from_cache(self, cache: dict, grad: Array, layer_index: int) -> Array:
        return denoiser_input_grad(self.model, grad, cache, at_layer=layer_index)
