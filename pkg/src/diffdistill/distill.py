"""End-to-end distillation runs and the distilled-set container format.

Container layout (extension ``.dds``), little-endian throughout:

    bytes 0..3    magic "DDS1"
    bytes 4..7    uint32 header length H
    bytes 8..8+H  UTF-8 JSON header with sorted keys:
                  {"format_version": 1, "dim": d, "ipc": n, "classes": [...],
                   "provenance": {...}}
    remainder     float64 sample rows, ipc rows per class in ascending
                  class order, d values per row

The header's provenance block is everything needed to regenerate the set
bit-exactly (method, full guidance config, schedule, score backend id,
seed); wall-clock timing deliberately stays out of the bytes so a rerun
of the same config hashes identically, and is reported in run logs
instead.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .data import LabeledDataset
from .errors import ValidationError
from .guidance import GuidanceConfig, GuidanceStats, ReferenceBank, sample_distilled
from .sde import NoiseSchedule, RngStream, make_schedule

Array = np.ndarray

MAGIC = b"DDS1"
FORMAT_VERSION = 1


@dataclass
class DistilledSet:
    """Per-class synthetic samples with full run provenance."""

    samples_by_class: dict
    provenance: dict
    wall_clock_s: float | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        if not self.samples_by_class:
            raise ValidationError("distilled set has no classes")
        self.samples_by_class = {
            int(c): np.atleast_2d(np.asarray(v, dtype=float))
            for c, v in self.samples_by_class.items()
        }
        counts = {len(v) for v in self.samples_by_class.values()}
        dims = {v.shape[1] for v in self.samples_by_class.values()}
        if len(counts) != 1:
            raise ValidationError(f"classes carry unequal sample counts: {sorted(counts)}")
        if len(dims) != 1:
            raise ValidationError(f"classes carry unequal dimensions: {sorted(dims)}")

    @property
    def classes(self) -> tuple[int, ...]:
        return tuple(sorted(self.samples_by_class))

    @property
    def ipc(self) -> int:
        return len(next(iter(self.samples_by_class.values())))

    @property
    def dim(self) -> int:
        return next(iter(self.samples_by_class.values())).shape[1]

    def to_dataset(self, split: str = "train") -> LabeledDataset:
        xs = [self.samples_by_class[c] for c in self.classes]
        ys = [np.full(self.ipc, c) for c in self.classes]
        return LabeledDataset(np.concatenate(xs), np.concatenate(ys), classes=self.classes, split=split)


def distill_guided(
    train: LabeledDataset,
    cfg: GuidanceConfig,
    schedule: NoiseSchedule,
    score,
    ipc: int,
    seed: int,
    stats: GuidanceStats | None = None,
    first_order: bool = False,
) -> DistilledSet:
    """Run guided sampling classwise; gamma = 0 is auto-labeled "unguided"."""
    bank = ReferenceBank(train)
    by_class = {}
    for label in train.classes:
        by_class[label] = sample_distilled(
            cfg, schedule, score, bank, label, ipc, seed,
            stats=stats, first_order=first_order, stream_prefix=("class", label),
        )
    provenance = {
        "method": "unguided" if cfg.gamma == 0.0 else "guided",
        "ipc": ipc,
        "seed": seed,
        "guidance": cfg.to_dict(),
        "schedule": schedule.to_dict(),
        "score_backend": getattr(score, "backend_id", "unknown"),
        "first_order": first_order,
        "classes": [int(c) for c in train.classes],
        "dim": train.dim,
        "package_version": __version__,
    }
    return DistilledSet(samples_by_class=by_class, provenance=provenance)


def distill_random(train: LabeledDataset, ipc: int, seed: int) -> DistilledSet:
    """Uniform without-replacement subsample of ipc real points per class."""
    rng = RngStream(seed, key=("random-subset",))
    by_class = {}
    for label in train.classes:
        pool = train.by_class(label)
        if len(pool) < ipc:
            raise ValidationError(f"class {label} has {len(pool)} samples, fewer than ipc={ipc}")
        by_class[label] = pool[rng.derive(label).choice_without_replacement(len(pool), ipc)]
    provenance = {
        "method": "random",
        "ipc": ipc,
        "seed": seed,
        "classes": [int(c) for c in train.classes],
        "dim": train.dim,
        "package_version": __version__,
    }
    return DistilledSet(samples_by_class=by_class, provenance=provenance)


def subsample_set(dset: DistilledSet, new_ipc: int, seed: int) -> DistilledSet:
    """Per-class uniform subsample of an existing set; provenance chains to the parent."""
    if new_ipc > dset.ipc:
        raise ValidationError(f"new_ipc={new_ipc} exceeds current ipc={dset.ipc}")
    if new_ipc < 1:
        raise ValidationError("new_ipc must be >= 1")
    rng = RngStream(seed, key=("subsample",))
    by_class = {
        c: dset.samples_by_class[c][rng.derive(c).choice_without_replacement(dset.ipc, new_ipc)]
        for c in dset.classes
    }
    provenance = {
        "method": dset.provenance.get("method", "unknown") + "+subsample",
        "ipc": new_ipc,
        "seed": seed,
        "parent": dset.provenance,
        "package_version": __version__,
    }
    return DistilledSet(samples_by_class=by_class, provenance=provenance)


def save_set(dset: DistilledSet, path) -> None:
    header = {
        "format_version": FORMAT_VERSION,
        "dim": dset.dim,
        "ipc": dset.ipc,
        "classes": list(dset.classes),
        "provenance": dset.provenance,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for c in dset.classes:
            fh.write(np.ascontiguousarray(dset.samples_by_class[c], dtype="<f8").tobytes())


def load_set(path) -> DistilledSet:
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ValidationError(f"{path}: not a distilled-set container")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        if header.get("format_version") != FORMAT_VERSION:
            raise ValidationError(f"{path}: unsupported format version {header.get('format_version')}")
        dim, ipc = int(header["dim"]), int(header["ipc"])
        by_class = {}
        for c in header["classes"]:
            raw = fh.read(8 * dim * ipc)
            if len(raw) != 8 * dim * ipc:
                raise ValidationError(f"{path}: truncated sample block for class {c}")
            by_class[int(c)] = np.frombuffer(raw, dtype="<f8").reshape(ipc, dim).copy()
    return DistilledSet(samples_by_class=by_class, provenance=header["provenance"])


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def schedule_from_provenance(prov: dict) -> NoiseSchedule:
    s = prov["schedule"]
    return make_schedule(s["kind"], int(s["T"]), float(s["beta_start"]), float(s["beta_end"]))
