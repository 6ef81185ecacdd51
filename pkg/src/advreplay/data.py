"""Task streams, synthetic data generation, and record-and-replay augmentation.

A task stream partitions the class inventory into disjoint groups.  In cold
start every group holds ``total/T`` classes; in warm start the first group
holds half of the classes and the remainder is split evenly over the other
``T-1`` tasks.

Augmentation policies are the storage currency of pseudo-replay: each policy
is a short, fully recorded parameter vector whose replay on the same sample
is bit-identical.  The default family mirrors crop / flip / jitter / rescale
semantics in vector space and serializes to 7 scalars per sample.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, DecodeError, DimensionError
from .tensor import Tensor

BINARY_MAGIC = b"APRD"
BINARY_VERSION = 1


# -- labeled data -------------------------------------------------------------


@dataclass(frozen=True)
class LabeledSet:
    """Immutable sample/label batch carrying its split provenance."""

    x: Tensor  # (n, input_dim)
    y: tuple[int, ...]
    split: str  # "train" | "val" | "test"

    def __post_init__(self):
        if self.x.data.ndim != 2 or len(self.y) != self.x.shape[0]:
            raise DimensionError("LabeledSet: samples and labels disagree")
        if self.split not in ("train", "val", "test"):
            raise ContractError(f"unknown split tag {self.split!r}")

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def input_dim(self) -> int:
        return self.x.shape[1]

    def classes(self) -> tuple[int, ...]:
        return tuple(sorted(set(self.y)))


@dataclass(frozen=True)
class TaskStream:
    """Ordered disjoint class groups with per-task train/val/test sets."""

    mode: str  # "cold" | "warm"
    class_groups: tuple[tuple[int, ...], ...]
    train: tuple[LabeledSet, ...]
    val: tuple[LabeledSet, ...]
    test: tuple[LabeledSet, ...]

    @property
    def task_count(self) -> int:
        return len(self.class_groups)

    def seen_classes(self, upto_task: int) -> tuple[int, ...]:
        seen: list[int] = []
        for group in self.class_groups[: upto_task + 1]:
            seen.extend(group)
        return tuple(sorted(seen))


def group_sizes(total_classes: int, task_count: int, mode: str) -> list[int]:
    """Class-count layout per task for a start mode."""
    if task_count < 1:
        raise ConfigError("task count must be >= 1")
    if mode == "cold":
        if total_classes % task_count != 0:
            raise ConfigError(
                f"cold start needs total classes ({total_classes}) divisible by T ({task_count})")
        return [total_classes // task_count] * task_count
    if mode == "warm":
        if task_count < 2:
            raise ConfigError("warm start needs at least 2 tasks")
        if total_classes % 2 != 0 or (total_classes // 2) % (task_count - 1) != 0:
            raise ConfigError(
                f"warm start needs total/2 classes ({total_classes}/2) divisible by "
                f"T-1 ({task_count - 1})")
        rest = (total_classes // 2) // (task_count - 1)
        return [total_classes // 2] + [rest] * (task_count - 1)
    raise ConfigError(f"unknown start mode {mode!r}")


# -- synthetic generator -------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    """Gaussian cluster per class: mean on a sphere, random SPD covariance."""

    n_classes: int = 20
    input_dim: int = 16
    radius: float = 8.0
    cluster_std: float = 1.0
    n_train: int = 100
    n_val: int = 20
    n_test: int = 50


def class_clusters(spec: SyntheticSpec, rng) -> tuple[np.ndarray, np.ndarray]:
    """True per-class (means, covariances); also the oracle for sanity tests."""
    d = spec.input_dim
    means = rng.normal(size=(spec.n_classes, d))
    means *= spec.radius / np.linalg.norm(means, axis=1, keepdims=True)
    covs = np.empty((spec.n_classes, d, d))
    for c in range(spec.n_classes):
        q, _ = np.linalg.qr(rng.normal(size=(d, d)))
        eigs = rng.uniform(0.5, 1.5, size=d) * spec.cluster_std**2
        covs[c] = (q * eigs) @ q.T
    return means, covs


def _sample_class(mean, cov, n, rng):
    chol = np.linalg.cholesky(cov)
    return mean + rng.standard_normal((n, mean.shape[0])) @ chol.T


def make_task_stream(spec: SyntheticSpec, task_count: int, mode: str,
                     seed: int, class_shuffle_seed: int) -> TaskStream:
    """Deterministic synthetic stream under (seed, class_shuffle_seed)."""
    sizes = group_sizes(spec.n_classes, task_count, mode)
    shuffle_rng = np.random.default_rng(class_shuffle_seed)
    order = shuffle_rng.permutation(spec.n_classes)
    groups, cursor = [], 0
    for size in sizes:
        groups.append(tuple(int(c) for c in order[cursor: cursor + size]))
        cursor += size

    data_rng = np.random.default_rng(seed)
    means, covs = class_clusters(spec, data_rng)
    per_class = {}
    for c in range(spec.n_classes):
        block = _sample_class(means[c], covs[c],
                              spec.n_train + spec.n_val + spec.n_test, data_rng)
        per_class[c] = (
            block[: spec.n_train],
            block[spec.n_train: spec.n_train + spec.n_val],
            block[spec.n_train + spec.n_val:],
        )

    def bundle(group, part, split):
        xs = np.concatenate([per_class[c][part] for c in group])
        ys = tuple(int(c) for c in group for _ in range(len(per_class[c][part])))
        return LabeledSet(Tensor(xs), ys, split)

    train = tuple(bundle(g, 0, "train") for g in groups)
    val = tuple(bundle(g, 1, "val") for g in groups)
    test = tuple(bundle(g, 2, "test") for g in groups)
    return TaskStream(mode, tuple(groups), train, val, test)


# -- augmentation policies -----------------------------------------------------


@dataclass(frozen=True)
class TransformRecord:
    kind: str  # "crop" | "flip" | "jitter" | "scale"
    apply: bool
    params: tuple[float, ...] = ()


@dataclass(frozen=True)
class AugPolicy:
    """Recorded augmentation; replay on the same sample is bit-identical.

    Canonical scalar layout (7 values): crop apply / offset / width,
    flip apply, jitter seed / sigma, rescale factor.
    """

    records: tuple[TransformRecord, ...] = ()

    def scalar_count(self) -> int:
        count = 0
        for rec in self.records:
            count += len(rec.params)
            if rec.kind in ("crop", "flip"):  # jitter/scale flags live in params
                count += 1
        return count


@dataclass(frozen=True)
class AugFamily:
    """Sampling ranges for the default vector-space augmentation family."""

    enabled: bool = True
    crop_prob: float = 0.5
    crop_width_range: tuple[int, int] = (1, 4)
    flip_prob: float = 0.5
    jitter_prob: float = 0.8
    jitter_sigma_range: tuple[float, float] = (0.01, 0.15)
    scale_range: tuple[float, float] = (0.9, 1.1)
    input_dim: int = 16


DEFAULT_FAMILY = AugFamily()


def sample_policy(rng, family: AugFamily = DEFAULT_FAMILY) -> AugPolicy:
    """Draw a fully recorded policy; a disabled family yields the identity."""
    if not family.enabled:
        return AugPolicy(())
    crop_apply = bool(rng.random() < family.crop_prob)
    width = int(rng.integers(family.crop_width_range[0], family.crop_width_range[1] + 1))
    width = min(width, family.input_dim)
    offset = int(rng.integers(0, family.input_dim - width + 1))
    flip_apply = bool(rng.random() < family.flip_prob)
    jitter_on = rng.random() < family.jitter_prob
    sigma = float(rng.uniform(*family.jitter_sigma_range)) if jitter_on else 0.0
    seed = int(rng.integers(0, 2**32))
    factor = float(rng.uniform(*family.scale_range))
    return AugPolicy((
        TransformRecord("crop", crop_apply, (float(offset), float(width))),
        TransformRecord("flip", flip_apply),
        TransformRecord("jitter", sigma > 0.0, (float(seed), sigma)),
        TransformRecord("scale", True, (factor,)),
    ))


def apply_policy(x: np.ndarray | Tensor, policy: AugPolicy) -> np.ndarray:
    """Pure, deterministic replay of a recorded policy on one sample."""
    if isinstance(x, Tensor):
        x = x.data
    out = np.array(x, dtype=np.float64)
    if out.ndim != 1:
        raise DimensionError("apply_policy expects a single 1-D sample")
    for rec in policy.records:
        if rec.kind == "crop":
            if len(rec.params) != 2:
                raise DecodeError("crop record needs (offset, width)")
            if rec.apply:
                off, width = int(rec.params[0]), int(rec.params[1])
                if off < 0 or width < 0 or off + width > out.shape[0]:
                    raise DecodeError("crop window out of bounds")
                out[off: off + width] = 0.0
        elif rec.kind == "flip":
            if rec.apply:
                out = out[::-1].copy()
        elif rec.kind == "jitter":
            if len(rec.params) != 2:
                raise DecodeError("jitter record needs (seed, sigma)")
            if rec.apply:
                noise_rng = np.random.default_rng(int(rec.params[0]))
                out = out + rec.params[1] * noise_rng.standard_normal(out.shape[0])
        elif rec.kind == "scale":
            if len(rec.params) != 1:
                raise DecodeError("scale record needs (factor,)")
            if rec.apply:
                out = out * rec.params[0]
        else:
            raise DecodeError(f"unknown transform kind {rec.kind!r}")
    return out


# binary policy record: crop flag u8, offset u32, width u32, flip flag u8,
# jitter flag u8, jitter seed u64, jitter sigma f64, scale factor f64
_POLICY_STRUCT = struct.Struct("<BIIBBQdd")
POLICY_RECORD_BYTES = _POLICY_STRUCT.size


def encode_policy(policy: AugPolicy) -> bytes:
    if not policy.records:
        return _POLICY_STRUCT.pack(0, 0, 0, 0, 0, 0, 0.0, 1.0)
    by_kind = {rec.kind: rec for rec in policy.records}
    try:
        crop, flip = by_kind["crop"], by_kind["flip"]
        jitter, scale = by_kind["jitter"], by_kind["scale"]
    except KeyError as missing:
        raise DecodeError(f"policy lacks a {missing} record") from None
    return _POLICY_STRUCT.pack(
        int(crop.apply), int(crop.params[0]), int(crop.params[1]),
        int(flip.apply),
        int(jitter.apply), int(jitter.params[0]), float(jitter.params[1]),
        float(scale.params[0]),
    )


def decode_policy(payload: bytes) -> AugPolicy:
    if len(payload) != POLICY_RECORD_BYTES:
        raise DecodeError(f"policy record must be {POLICY_RECORD_BYTES} bytes")
    crop_f, off, width, flip_f, jit_f, seed, sigma, factor = _POLICY_STRUCT.unpack(payload)
    return AugPolicy((
        TransformRecord("crop", bool(crop_f), (float(off), float(width))),
        TransformRecord("flip", bool(flip_f)),
        TransformRecord("jitter", bool(jit_f), (float(seed), float(sigma))),
        TransformRecord("scale", True, (float(factor),)),
    ))


# -- ingestion ----------------------------------------------------------------


def load_csv(path, split: str = "train") -> LabeledSet:
    """Read rows of ``label,f0,...,f{D-1}`` into a labeled set."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "label":
            raise DecodeError(f"{path}: expected header starting with 'label'")
        rows, labels = [], []
        for row in reader:
            if not row:
                continue
            labels.append(int(row[0]))
            rows.append([float(v) for v in row[1:]])
    if not rows:
        raise DecodeError(f"{path}: no data rows")
    return LabeledSet(Tensor(np.array(rows)), tuple(labels), split)


def save_csv(dataset: LabeledSet, path) -> None:
    path = Path(path)
    dim = dataset.input_dim
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label"] + [f"f{i}" for i in range(dim)])
        for label, row in zip(dataset.y, dataset.x.data):
            writer.writerow([label] + [repr(float(v)) for v in row])


def save_binary(dataset: LabeledSet, path) -> None:
    """Matrix container: magic, version, rows, cols, f64 data, u32 labels."""
    rows, cols = dataset.x.shape
    with Path(path).open("wb") as fh:
        fh.write(BINARY_MAGIC)
        fh.write(struct.pack("<III", BINARY_VERSION, rows, cols))
        fh.write(np.ascontiguousarray(dataset.x.data, dtype="<f8").tobytes())
        fh.write(np.asarray(dataset.y, dtype="<u4").tobytes())


def load_binary(path, split: str = "train") -> LabeledSet:
    payload = Path(path).read_bytes()
    if payload[:4] != BINARY_MAGIC:
        raise DecodeError(f"{path}: bad magic {payload[:4]!r}")
    version, rows, cols = struct.unpack_from("<III", payload, 4)
    if version != BINARY_VERSION:
        raise DecodeError(f"{path}: unsupported version {version}")
    offset = 16
    matrix = np.frombuffer(payload, dtype="<f8", count=rows * cols, offset=offset)
    offset += rows * cols * 8
    labels = np.frombuffer(payload, dtype="<u4", count=rows, offset=offset)
    return LabeledSet(Tensor(matrix.reshape(rows, cols)), tuple(int(v) for v in labels), split)
