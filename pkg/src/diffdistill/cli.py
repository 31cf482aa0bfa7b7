"""Batch experiment driver.

Subcommands: distill, eval, ablate, scatter, train-denoiser, selftest.
Configuration lives in an INI file with sections [task], [schedule],
[score], [guidance], [run], [train]; every key can be overridden on the
command line with --set section.key=value. Exit codes: 0 ok, 1 usage,
2 validation failure, 3 numerical failure.

Artifacts are split into deterministic files (containers, metric CSVs,
SVG plots; byte-identical across reruns of one config, each embedding
the config hash) and timing files (wall-clock measurements, inherently
run-dependent).
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import __version__, kernels, svg
from .data import load_csv, pca_fit
from .distill import (
    distill_guided,
    distill_random,
    file_sha256,
    load_set,
    save_set,
)
from .errors import NumericalError, ValidationError
from .evaluation import (
    DEFAULT_CLASSIFIERS,
    EvalReport,
    diversity_metrics,
    nll_report,
    representativeness_score,
    train_and_test,
)
from .guidance import GuidanceConfig, GuidanceStats
from .kernels import FeatureMapSpec, KernelSpec
from .scores import (
    AnalyticScoreModel,
    DenoiserScoreModel,
    load_denoiser,
    save_denoiser,
    train_denoiser,
)
from .sde import RngStream, default_schedule, make_schedule
from .tasks import Task, make_task

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3

OUTDIR_ENV = "DIFFDISTILL_OUTDIR"

DEFAULT_GAMMA_GRID = (0.0, 0.05, 0.1, 0.2, 0.5, 1.0, 2.0, 3.0)


@dataclass(frozen=True)
class RunConfig:
    """Flat, fully serialized experiment configuration."""

    # [task]
    task: str = "rings-and-blobs"
    dataset_path: str = ""
    test_path: str = ""
    task_seed: int = 0
    train_per_class: int = 500
    test_per_class: int = 1000
    # [schedule]
    steps: int = 50
    beta_start: float = 0.0  # 0 means: use the rescaled default for this step count
    beta_end: float = 0.0
    # [score]
    backend: str = "analytic"
    checkpoint: str = ""
    # [guidance]
    gamma: float = 0.2
    t_stop: int = 25
    kernel: str = "linear"
    bandwidth: float = 1.0
    feature_map: str = "identity"
    projection_dim: int = 8
    projection_seed: int = 0
    hidden_layer: int = 1
    reference_batch: int = 256
    frozen_ref_noise: bool = False
    guide_denoised: bool = False
    first_order_step: bool = False
    # [run]
    ipc: int = 10
    seeds: tuple = (0, 1, 2, 3, 4)
    gamma_grid: tuple = DEFAULT_GAMMA_GRID
    # full guidance isolates the scale effect in gamma sweeps
    gamma_sweep_t_stop: int = 0
    t_stop_grid: tuple = ()  # empty: {0, T/4, T/2, 3T/4, T}
    eval_seeds: tuple = (0, 1, 2)
    classifiers: tuple = DEFAULT_CLASSIFIERS
    methods: tuple = ("guided", "random")
    workers: int = 1
    timing_repeats: int = 1
    output_dir: str = ""
    # [train]
    train_steps: int = 60000
    train_lr: float = 5e-3
    train_final_lr: float = 1e-4
    train_batch: int = 128
    train_hidden: tuple = (128, 128, 128)
    train_time_dim: int = 32
    train_activation: str = "tanh"

    def hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValidationError(f"cannot parse boolean {s!r}")


def _parse_tuple(cast):
    def parse(s: str) -> tuple:
        s = s.strip()
        if not s:
            return ()
        return tuple(cast(part.strip()) for part in s.split(",") if part.strip())

    return parse


_FIELD_PARSERS = {
    "task.preset": ("task", str),
    "task.dataset_path": ("dataset_path", str),
    "task.test_path": ("test_path", str),
    "task.seed": ("task_seed", int),
    "task.train_per_class": ("train_per_class", int),
    "task.test_per_class": ("test_per_class", int),
    "schedule.steps": ("steps", int),
    "schedule.beta_start": ("beta_start", float),
    "schedule.beta_end": ("beta_end", float),
    "score.backend": ("backend", str),
    "score.checkpoint": ("checkpoint", str),
    "guidance.gamma": ("gamma", float),
    "guidance.t_stop": ("t_stop", int),
    "guidance.kernel": ("kernel", str),
    "guidance.bandwidth": ("bandwidth", float),
    "guidance.feature_map": ("feature_map", str),
    "guidance.projection_dim": ("projection_dim", int),
    "guidance.projection_seed": ("projection_seed", int),
    "guidance.hidden_layer": ("hidden_layer", int),
    "guidance.reference_batch": ("reference_batch", int),
    "guidance.frozen_ref_noise": ("frozen_ref_noise", _parse_bool),
    "guidance.guide_denoised": ("guide_denoised", _parse_bool),
    "guidance.first_order_step": ("first_order_step", _parse_bool),
    "run.ipc": ("ipc", int),
    "run.seeds": ("seeds", _parse_tuple(int)),
    "run.gamma_grid": ("gamma_grid", _parse_tuple(float)),
    "run.gamma_sweep_t_stop": ("gamma_sweep_t_stop", int),
    "run.t_stop_grid": ("t_stop_grid", _parse_tuple(int)),
    "run.eval_seeds": ("eval_seeds", _parse_tuple(int)),
    "run.classifiers": ("classifiers", _parse_tuple(str)),
    "run.methods": ("methods", _parse_tuple(str)),
    "run.workers": ("workers", int),
    "run.timing_repeats": ("timing_repeats", int),
    "run.output_dir": ("output_dir", str),
    "train.steps": ("train_steps", int),
    "train.lr": ("train_lr", float),
    "train.final_lr": ("train_final_lr", float),
    "train.batch": ("train_batch", int),
    "train.hidden": ("train_hidden", _parse_tuple(int)),
    "train.time_dim": ("train_time_dim", int),
    "train.activation": ("train_activation", str),
}


def load_config(path: str | None, overrides=()) -> RunConfig:
    cfg = RunConfig()
    updates = {}
    if path:
        parser = configparser.ConfigParser()
        read = parser.read(path)
        if not read:
            raise ValidationError(f"cannot read config file {path}")
        for section in parser.sections():
            for key, value in parser.items(section):
                dotted = f"{section}.{key}"
                if dotted not in _FIELD_PARSERS:
                    raise ValidationError(f"unknown config key [{section}] {key}")
                attr, cast = _FIELD_PARSERS[dotted]
                try:
                    updates[attr] = cast(value)
                except (TypeError, ValueError) as exc:
                    raise ValidationError(f"bad value for [{section}] {key}: {value!r}") from exc
    for item in overrides or ():
        if "=" not in item:
            raise ValidationError(f"--set expects section.key=value, got {item!r}")
        dotted, value = item.split("=", 1)
        if dotted not in _FIELD_PARSERS:
            raise ValidationError(f"unknown config key {dotted!r}")
        attr, cast = _FIELD_PARSERS[dotted]
        try:
            updates[attr] = cast(value)
        except (TypeError, ValueError) as exc:
            raise ValidationError(f"bad value for {dotted}: {value!r}") from exc
    return replace(cfg, **updates)


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------


def build_task(cfg: RunConfig) -> Task:
    if cfg.dataset_path:
        train = load_csv(cfg.dataset_path, split="train")
        if cfg.test_path:
            test = load_csv(cfg.test_path, split="test")
        else:
            raise ValidationError("a dataset_path needs a matching test_path")
        return Task(name=os.path.basename(cfg.dataset_path), train=train, test=test, gmm=None)
    return make_task(
        cfg.task,
        seed=cfg.task_seed,
        **(
            {"train_per_class": cfg.train_per_class, "test_per_class": cfg.test_per_class}
            if cfg.task == "rings-and-blobs"
            else {}
        ),
    )


def build_schedule(cfg: RunConfig):
    if cfg.beta_start > 0 or cfg.beta_end > 0:
        return make_schedule("linear", cfg.steps, cfg.beta_start, cfg.beta_end)
    return default_schedule(cfg.steps)


def build_score(cfg: RunConfig, task: Task, schedule):
    if cfg.backend == "analytic":
        if task.gmm is None:
            raise ValidationError(
                f"task {task.name!r} has no analytic ground truth; use the denoiser backend"
            )
        return AnalyticScoreModel(task.gmm, schedule)
    if cfg.backend == "denoiser":
        if not cfg.checkpoint:
            raise ValidationError("the denoiser backend needs score.checkpoint")
        return DenoiserScoreModel(load_denoiser(cfg.checkpoint))
    raise ValidationError(f"unknown score backend {cfg.backend!r}")


def build_guidance(cfg: RunConfig, gamma: float | None = None, t_stop: int | None = None) -> GuidanceConfig:
    kernel = KernelSpec(kind=cfg.kernel, bandwidth=cfg.bandwidth)
    if cfg.feature_map == "identity":
        fmap = FeatureMapSpec()
    elif cfg.feature_map == "random-projection":
        fmap = FeatureMapSpec(kind="random-projection", out_dim=cfg.projection_dim, seed=cfg.projection_seed)
    elif cfg.feature_map == "denoiser-hidden":
        fmap = FeatureMapSpec(kind="denoiser-hidden", layer_index=cfg.hidden_layer)
    else:
        raise ValidationError(f"unknown feature map {cfg.feature_map!r}")
    return GuidanceConfig(
        gamma=cfg.gamma if gamma is None else gamma,
        t_stop=cfg.t_stop if t_stop is None else t_stop,
        kernel=kernel,
        feature_map=fmap,
        reference_batch=cfg.reference_batch,
        frozen_ref_noise=cfg.frozen_ref_noise,
        guide_denoised=cfg.guide_denoised,
    )


def resolve_outdir(cfg: RunConfig, flag_value: str | None) -> str:
    out = flag_value or cfg.output_dir or os.environ.get(OUTDIR_ENV, "runs")
    os.makedirs(out, exist_ok=True)
    return out


def _write_rows(path: str, fieldnames: list, rows: list) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fieldnames)
        w.writeheader()
        w.writerows(rows)


def _svg_with_hash(markup: str, cfg_hash: str) -> str:
    head, sep, rest = markup.partition("\n")
    return f"{head}\n<!-- config_hash={cfg_hash} -->\n{rest}"


# ---------------------------------------------------------------------------
# distill
# ---------------------------------------------------------------------------


def _one_guided_run(cfg, task, schedule, score, gamma, t_stop, seed, repeats=1):
    gcfg = build_guidance(cfg, gamma=gamma, t_stop=t_stop)
    best_wall = None
    for _ in range(max(1, repeats)):
        stats = GuidanceStats()
        t0 = time.perf_counter()
        dset = distill_guided(
            task.train, gcfg, schedule, score, cfg.ipc, seed,
            stats=stats, first_order=cfg.first_order_step,
        )
        wall = time.perf_counter() - t0
        best_wall = wall if best_wall is None else min(best_wall, wall)
    dset.wall_clock_s = best_wall
    return dset, stats


def cmd_distill(cfg: RunConfig, outdir: str, use_gamma_grid: bool = False) -> list:
    task = build_task(cfg)
    schedule = build_schedule(cfg)
    cfg_hash = cfg.hash()
    needs_score = any(m in ("guided", "unguided") for m in cfg.methods)
    score = build_score(cfg, task, schedule) if needs_score else None
    manifest, timing = [], []
    for method in cfg.methods:
        if method == "random":
            gammas = [None]
        elif method in ("guided", "unguided"):
            gammas = list(cfg.gamma_grid) if use_gamma_grid else [0.0 if method == "unguided" else cfg.gamma]
        else:
            raise ValidationError(f"unknown method {method!r}")
        for gamma in gammas:
            for seed in cfg.seeds:
                t0 = time.perf_counter()
                if method == "random":
                    dset = distill_random(task.train, cfg.ipc, seed)
                    name = f"{task.name}_random_ipc{cfg.ipc}_seed{seed}.dds"
                    wall = time.perf_counter() - t0
                else:
                    dset, _ = _one_guided_run(cfg, task, schedule, score, gamma, cfg.t_stop, seed)
                    wall = dset.wall_clock_s
                    tag = dset.provenance["method"]
                    name = f"{task.name}_{tag}_g{gamma:g}_t{cfg.t_stop}_ipc{cfg.ipc}_seed{seed}.dds"
                dset.provenance["config_hash"] = cfg_hash
                path = os.path.join(outdir, name)
                save_set(dset, path)
                manifest.append({
                    "file": name,
                    "method": dset.provenance["method"],
                    "gamma": "" if gamma is None else f"{gamma:g}",
                    "t_stop": "" if method == "random" else cfg.t_stop,
                    "ipc": cfg.ipc,
                    "seed": seed,
                    "sha256": file_sha256(path),
                    "config_hash": cfg_hash,
                })
                timing.append({"file": name, "wall_clock_s": f"{wall:.6f}"})
                print(f"wrote {path} ({wall:.2f}s)")
    _write_rows(os.path.join(outdir, "manifest.csv"),
                ["file", "method", "gamma", "t_stop", "ipc", "seed", "sha256", "config_hash"], manifest)
    _write_rows(os.path.join(outdir, "timing.csv"), ["file", "wall_clock_s"], timing)
    return [row["file"] for row in manifest]


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def cmd_eval(cfg: RunConfig, set_files: list, outdir: str) -> EvalReport:
    if not set_files:
        raise ValidationError("eval needs at least one distilled-set file")
    task = build_task(cfg)
    cfg_hash = cfg.hash()
    report = EvalReport(meta={"config_hash": cfg_hash, "package_version": __version__})
    acc_rows = []
    kernel = KernelSpec(kind=cfg.kernel, bandwidth=cfg.bandwidth)
    for path in set_files:
        dset = load_set(path)
        name = os.path.basename(path)
        for clf in cfg.classifiers:
            stats = train_and_test(clf, dset, task.test, cfg.eval_seeds)
            acc_rows.append({
                "file": name,
                "method": dset.provenance.get("method", "unknown"),
                "classifier": clf,
                "acc_mean": f"{stats.mean:.6f}",
                "acc_std": f"{stats.std:.6f}",
                "n_seeds": len(cfg.eval_seeds),
                "config_hash": cfg_hash,
            })
            report.add(name, f"accuracy_{clf}", stats.mean, detail=f"std={stats.std:.6f}")
        rep = representativeness_score(dset, task.train, kernel=kernel)
        for c, cs in rep.items():
            report.add(name, f"representativeness_class_{c}", cs.score,
                       detail="saturated" if cs.saturated else "")
        div = diversity_metrics(dset, task.train, kernel=kernel)
        for c, tr in div.cov_trace.items():
            report.add(name, f"cov_trace_class_{c}", tr,
                       detail="collapsed" if c in div.collapsed_classes else "")
        report.add(name, "mmd2", div.mmd2)
        report.add(name, "moment_distance", div.moment_distance)
    if task.gmm is not None:
        nll_train, nll_test = nll_report(task.gmm, task.train, task.test)
        report.add("task", "nll_train", nll_train)
        report.add("task", "nll_test", nll_test)
        report.add("task", "nll_gap", abs(nll_train - nll_test))
    else:
        report.meta["nll"] = "unavailable: learned denoiser has no tractable likelihood"
    _write_rows(os.path.join(outdir, "accuracy.csv"),
                ["file", "method", "classifier", "acc_mean", "acc_std", "n_seeds", "config_hash"],
                acc_rows)
    report.write_csv(os.path.join(outdir, "metrics.csv"))
    report.write_json(os.path.join(outdir, "report.json"))
    print(f"wrote {outdir}/accuracy.csv ({len(acc_rows)} rows), metrics.csv, report.json")
    return report


# ---------------------------------------------------------------------------
# ablate
# ---------------------------------------------------------------------------


def _ablate_unit(args):
    cfg, sweep, value, seed = args
    task = build_task(cfg)
    schedule = build_schedule(cfg)
    score = build_score(cfg, task, schedule)
    if sweep == "gamma":
        gamma, t_stop = value, cfg.gamma_sweep_t_stop
    else:
        gamma, t_stop = cfg.gamma, int(value)
    dset, stats = _one_guided_run(cfg, task, schedule, score, gamma, t_stop, seed,
                                  repeats=cfg.timing_repeats)
    counts = sorted(set(stats.per_trajectory))
    row = {
        "sweep": sweep,
        "value": f"{value:g}",
        "seed": seed,
        "gamma": f"{gamma:g}",
        "t_stop": t_stop,
        "guided_steps_per_traj": ";".join(str(c) for c in counts),
    }
    kernel = KernelSpec(kind=cfg.kernel, bandwidth=cfg.bandwidth)
    for clf in cfg.classifiers:
        row[f"acc_{clf}"] = f"{train_and_test(clf, dset, task.test, [seed]).mean:.6f}"
    rep = representativeness_score(dset, task.train, kernel=kernel)
    div = diversity_metrics(dset, task.train, kernel=kernel)
    dists = []
    for c in dset.classes:
        row[f"repr_class_{c}"] = f"{rep[c].score:.6f}"
        row[f"trace_class_{c}"] = f"{div.cov_trace[c]:.6f}"
        dists.append(1.0 / rep[c].score if rep[c].score else 0.0)
    row["mean_distance"] = f"{float(np.mean(dists)):.6f}"
    return row, {"sweep": sweep, "value": f"{value:g}", "seed": seed,
                 "wall_clock_s": f"{dset.wall_clock_s:.6f}"}


def cmd_ablate(cfg: RunConfig, sweep: str, outdir: str) -> str:
    if sweep not in ("gamma", "t-stop"):
        raise ValidationError(f"unknown sweep {sweep!r} (expected gamma or t-stop)")
    schedule = build_schedule(cfg)
    if sweep == "gamma":
        values = list(cfg.gamma_grid)
    else:
        values = list(cfg.t_stop_grid) or [0, schedule.T // 4, schedule.T // 2,
                                           3 * schedule.T // 4, schedule.T]
        for v in values:
            if not 0 <= v <= schedule.T:
                raise ValidationError(f"t_stop {v} outside [0, {schedule.T}]")
    units = [(cfg, sweep, value, seed) for value in values for seed in cfg.seeds]
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_ablate_unit, units))
    else:
        results = [_ablate_unit(u) for u in units]
    rows = [r for r, _ in results]
    timing = [t for _, t in results]
    cfg_hash = cfg.hash()
    for row in rows:
        row["config_hash"] = cfg_hash
    task = build_task(cfg)
    classes = task.train.classes
    fields = (["sweep", "value", "seed", "gamma", "t_stop", "guided_steps_per_traj"]
              + [f"acc_{c}" for c in cfg.classifiers]
              + [f"repr_class_{c}" for c in classes]
              + [f"trace_class_{c}" for c in classes]
              + ["mean_distance", "config_hash"])
    stem = "sweep_gamma" if sweep == "gamma" else "sweep_t_stop"
    csv_path = os.path.join(outdir, f"{stem}.csv")
    _write_rows(csv_path, fields, rows)
    _write_rows(os.path.join(outdir, f"{stem}_timing.csv"),
                ["sweep", "value", "seed", "wall_clock_s"], timing)

    series = []
    for clf in cfg.classifiers:
        by_value = {}
        for row in rows:
            by_value.setdefault(float(row["value"]), []).append(float(row[f"acc_{clf}"]))
        xs = sorted(by_value)
        ys = [float(np.mean(by_value[x])) for x in xs]
        series.append((clf, xs, ys))
    xlabel = "guidance scale" if sweep == "gamma" else "early-stop step"
    markup = svg.line_chart(series, title=f"{task.name}: accuracy vs {xlabel}",
                            xlabel=xlabel, ylabel="test accuracy")
    svg_path = os.path.join(outdir, f"{stem}.svg")
    with open(svg_path, "w") as fh:
        fh.write(_svg_with_hash(markup, cfg_hash))
    print(f"wrote {csv_path} ({len(rows)} rows), {stem}_timing.csv, {svg_path}")
    return csv_path


# ---------------------------------------------------------------------------
# scatter
# ---------------------------------------------------------------------------


def cmd_scatter(cfg: RunConfig, set_file: str, outdir: str) -> str:
    task = build_task(cfg)
    dset = load_set(set_file)
    if dset.dim != task.train.dim:
        raise ValidationError(f"set dim {dset.dim} does not match task dim {task.train.dim}")
    if dset.dim > 2:
        proj = pca_fit(task.train.samples, 2)
        frac = proj.explained / max(np.sum(pca_fit(task.train.samples, dset.dim).explained), 1e-300)
        xlabel = f"PCA axis 1 ({100 * frac[0]:.0f}% var)"
        ylabel = f"PCA axis 2 ({100 * frac[1]:.0f}% var)"
        transform = proj.apply
    else:
        xlabel, ylabel = "x1", "x2"
        transform = lambda X: np.atleast_2d(X)
    groups = []
    for c in task.train.classes:
        groups.append((f"class {c}", transform(task.train.by_class(c)), False))
    for c in dset.classes:
        groups.append((f"class {c}", transform(dset.samples_by_class[c]), True))
    markup = svg.scatter_chart(groups, title=f"{task.name}: real (faint) vs distilled (bold)",
                               xlabel=xlabel, ylabel=ylabel)
    out_path = os.path.join(outdir, os.path.basename(set_file).replace(".dds", "") + "_scatter.svg")
    with open(out_path, "w") as fh:
        fh.write(_svg_with_hash(markup, cfg.hash()))
    print(f"wrote {out_path}")
    return out_path


# ---------------------------------------------------------------------------
# train-denoiser
# ---------------------------------------------------------------------------


def cmd_train_denoiser(cfg: RunConfig, outdir: str) -> str:
    task = build_task(cfg)
    schedule = build_schedule(cfg)
    source = task.gmm if task.gmm is not None else task.train
    result = train_denoiser(
        source,
        schedule,
        RngStream(cfg.task_seed, key=("train-denoiser",)),
        steps=cfg.train_steps,
        lr=cfg.train_lr,
        final_lr=cfg.train_final_lr or None,
        batch_size=cfg.train_batch,
        hidden=cfg.train_hidden,
        time_dim=cfg.train_time_dim,
        activation=cfg.train_activation,
    )
    path = os.path.join(outdir, f"{task.name}_denoiser.npz")
    save_denoiser(result.model, path)
    print(f"wrote {path} (val eps-MSE {result.val_eps_mse:.4f}, "
          f"train eps-MSE {result.train_eps_mse:.4f}, {result.steps} steps)")
    return path


# ---------------------------------------------------------------------------
# selftest
# ---------------------------------------------------------------------------


def _selftest_checks():
    from .guidance import ReferenceBank, guidance_gradient, representativeness_energy, sample_distilled
    from .scores import gmm_eps
    from .sde import reverse_trajectory
    from .tasks import make_rings_and_blobs

    rng = np.random.default_rng(7)

    def metric_axioms():
        for spec in (KernelSpec(), KernelSpec(kind="rbf", bandwidth=1.0)):
            X = rng.standard_normal((2000, 3))
            Y = rng.standard_normal((2000, 3))
            Z = rng.standard_normal((2000, 3))
            dxy = kernels.paired_distance(spec, X, Y)
            dyx = kernels.paired_distance(spec, Y, X)
            dxz = kernels.paired_distance(spec, X, Z)
            dzy = kernels.paired_distance(spec, Z, Y)
            assert np.all(dxy >= 0)
            assert np.max(np.abs(dxy - dyx)) < 1e-12
            assert np.all(dxz + dzy - dxy > -1e-9)
            assert np.max(kernels.paired_distance(spec, X, X)) < 1e-9
        return "metric axioms on 2000 random triples per kernel"

    def factorization():
        X = rng.standard_normal((2000, 4))
        Y = rng.standard_normal((2000, 4))
        lin = kernels.pairwise_distance(KernelSpec(), X, Y).diagonal()
        fac = np.array([kernels.factorized_distance(FeatureMapSpec(), x, y) for x, y in zip(X, Y)])
        assert np.max(np.abs(lin - fac)) < 1e-9
        return "linear induced distance equals identity-map factorized distance"

    def gradient_fidelity():
        cfg = GuidanceConfig(gamma=1.0, t_stop=0)
        for _ in range(20):
            x = rng.standard_normal(3)
            refs = rng.standard_normal((8, 3))
            g = guidance_gradient(cfg, x, refs)
            h = 1e-6
            fd = np.empty(3)
            for i in range(3):
                e = np.zeros(3)
                e[i] = h
                fd[i] = (representativeness_energy(cfg, x + e, refs)
                         - representativeness_energy(cfg, x - e, refs)) / (2 * h)
            assert np.linalg.norm(g + fd) / max(np.linalg.norm(fd), 1e-12) < 1e-4
        return "guidance gradient matches finite differences on 20 configurations"

    def zero_guidance():
        task = make_rings_and_blobs(train_per_class=64, test_per_class=8)
        schedule = default_schedule(25)
        score = AnalyticScoreModel(task.gmm, schedule)
        bank = ReferenceBank(task.train)
        cfg = GuidanceConfig(gamma=0.0, t_stop=0, reference_batch=16)
        got = sample_distilled(cfg, schedule, score, bank, 0, 2, seed=3)
        from .guidance import trajectory_stream
        want = np.empty_like(got)
        for i in range(2):
            s = trajectory_stream(3, i)
            want[i] = reverse_trajectory(schedule, lambda x, t: gmm_eps(task.gmm, schedule, x, t, 0),
                                         s.normal(2), s)
        assert np.array_equal(got, want)
        return "gamma=0 trajectories are bit-identical to the unguided sampler"

    def oracle_equivalence():
        from .evaluation import mmd2_unbiased
        spec = KernelSpec(kind="rbf", bandwidth=1.0)
        X = rng.standard_normal((24, 3))
        Y = rng.standard_normal((20, 3))
        fast = mmd2_unbiased(spec, X, Y)
        sx = sum(kernels.kernel_eval(spec, X[i], X[j]) for i in range(24) for j in range(24) if i != j)
        sy = sum(kernels.kernel_eval(spec, Y[i], Y[j]) for i in range(20) for j in range(20) if i != j)
        sxy = sum(kernels.kernel_eval(spec, x, y) for x in X for y in Y)
        slow = sx / (24 * 23) + sy / (20 * 19) - 2 * sxy / (24 * 20)
        assert abs(fast - slow) < 1e-10
        cfgg = GuidanceConfig(gamma=1.0, t_stop=0)
        e_fast = representativeness_energy(cfgg, X[0], Y)
        e_slow = np.mean([kernels.induced_distance(KernelSpec(), X[0], y) for y in Y])
        assert abs(e_fast - e_slow) < 1e-10
        return "MMD^2 and energy match brute-force double loops"

    return [metric_axioms, factorization, gradient_fidelity, zero_guidance, oracle_equivalence]


def cmd_selftest() -> int:
    failures = 0
    for check in _selftest_checks():
        try:
            detail = check()
            print(f"PASS {check.__name__}: {detail}")
        except Exception as exc:  # noqa: BLE001 - report and continue
            failures += 1
            print(f"FAIL {check.__name__}: {exc}")
    return EXIT_NUMERICAL if failures else EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _add_common(p):
    p.add_argument("-c", "--config", default=None, help="INI config file")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override a config value")
    p.add_argument("-o", "--output-dir", default=None,
                   help=f"output directory (default: config, then ${OUTDIR_ENV}, then ./runs)")


def build_parser() -> _Parser:
    parser = _Parser(prog="diffdistill",
                     description="Guided-diffusion dataset distillation experiments")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("distill", help="produce distilled-set container files")
    _add_common(p)
    p.add_argument("--use-gamma-grid", action="store_true",
                   help="emit one guided set per value of run.gamma_grid")

    p = sub.add_parser("eval", help="evaluate distilled-set files against the test split")
    _add_common(p)
    p.add_argument("sets", nargs="*", help="distilled-set .dds files")

    p = sub.add_parser("ablate", help="sweep gamma or the early-stop step")
    _add_common(p)
    p.add_argument("--sweep", choices=("gamma", "t-stop"), default="gamma")

    p = sub.add_parser("scatter", help="2-D scatter of real vs distilled samples")
    _add_common(p)
    p.add_argument("set_path", metavar="SET", help="distilled-set .dds file")

    p = sub.add_parser("train-denoiser", help="fit the small denoiser and save a checkpoint")
    _add_common(p)

    sub.add_parser("selftest", help="run the built-in property suite")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command == "selftest":
        return cmd_selftest()
    try:
        cfg = load_config(args.config, args.set)
        outdir = resolve_outdir(cfg, args.output_dir)
        if args.command == "distill":
            cmd_distill(cfg, outdir, use_gamma_grid=args.use_gamma_grid)
        elif args.command == "eval":
            if not args.sets:
                print("error: eval needs at least one distilled-set file", file=sys.stderr)
                return EXIT_USAGE
            cmd_eval(cfg, args.sets, outdir)
        elif args.command == "ablate":
            cmd_ablate(cfg, args.sweep, outdir)
        elif args.command == "scatter":
            cmd_scatter(cfg, args.set_path, outdir)
        elif args.command == "train-denoiser":
            cmd_train_denoiser(cfg, outdir)
    except ValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except FileNotFoundError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
