"""Long-tailed dataset construction: profiles, synthesis, sampling, storage.

A profile is the per-class sample count vector. A dataset is samples plus
labels grouped by class, synthesized from a Gaussian mixture or subsampled
from a balanced corpus. Class splits (many/medium/few) are decided by the
training counts. Samplers are infinite, seeded index streams.

On-disk corpus layout (one directory per dataset):
    meta.json    {"format": "lcreg-corpus-v1", "num_classes": C,
                  "sample_shape": [...], "count": N}
    samples.bin  little-endian float32, row-major, N x prod(sample_shape)
    labels.bin   little-endian uint32, N entries
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CORPUS_FORMAT = "lcreg-corpus-v1"
CACHE_ENV_VAR = "LCREG_CACHE_DIR"
DEFAULT_CACHE_DIR = ".lcreg_cache"

MANY_MIN = 101  # many: count > 100
FEW_MAX = 19    # few: count < 20


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def build_profile(num_classes: int, n_max: int, imbalance_factor: float,
                  kind: str = "exponential") -> np.ndarray:
    """Per-class counts, class 0 largest.

    exponential: count_c = round(n_max * IF**(-c/(C-1))), half-up, clamped
    to >= 1. step: the first ceil(C/2) classes get n_max, the rest n_max/IF.
    """
    if num_classes < 1 or n_max < 1:
        raise ValueError("build_profile: num_classes and n_max must be >= 1")
    imbalance_factor = float(imbalance_factor)
    if imbalance_factor < 1.0:
        raise ValueError("build_profile: imbalance_factor must be >= 1")
    if n_max < imbalance_factor:
        raise ValueError("build_profile: need n_max >= imbalance_factor")
    if kind == "exponential":
        if num_classes == 1:
            return np.array([n_max], dtype=np.int64)
        counts = [
            max(1, round_half_up(n_max * imbalance_factor ** (-c / (num_classes - 1))))
            for c in range(num_classes)
        ]
    elif kind == "step":
        head = (num_classes + 1) // 2
        tail_count = max(1, round_half_up(n_max / imbalance_factor))
        counts = [n_max] * head + [tail_count] * (num_classes - head)
    else:
        raise ValueError(f"build_profile: unknown kind {kind!r}")
    return np.array(counts, dtype=np.int64)


def realized_imbalance(counts) -> float:
    counts = np.asarray(counts)
    return float(counts.max()) / float(counts.min())


@dataclass(frozen=True)
class ClassSplit:
    """Class index sets by training-set frequency."""
    many: frozenset
    medium: frozenset
    few: frozenset


def split_classes(counts) -> ClassSplit:
    counts = np.asarray(counts)
    many = frozenset(int(c) for c in np.where(counts >= MANY_MIN)[0])
    few = frozenset(int(c) for c in np.where(counts <= FEW_MAX)[0])
    medium = frozenset(range(len(counts))) - many - few
    return ClassSplit(many=many, medium=medium, few=few)


@dataclass
class LongTailDataset:
    """Samples grouped by class with the realized per-class counts."""
    samples: np.ndarray   # [N, ...] float64
    labels: np.ndarray    # [N] int64
    counts: np.ndarray    # [C] int64
    seed: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if len(self.samples) != len(self.labels):
            raise ValueError("dataset: samples and labels length mismatch")
        if int(self.counts.sum()) != len(self.labels):
            raise ValueError("dataset: counts do not sum to sample count")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= len(self.counts)):
            raise ValueError("dataset: label out of range")

    @property
    def num_classes(self) -> int:
        return len(self.counts)

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return self.samples.shape[1:]


@dataclass(frozen=True)
class MixtureSpec:
    """Gaussian mixture task: one spherical component per class."""
    num_classes: int
    input_dim: int
    means: np.ndarray = field(repr=False)  # [C, input_dim]
    stdev: float
    seed: int

    def __post_init__(self):
        means = np.asarray(self.means, dtype=np.float64)
        object.__setattr__(self, "means", means)
        if means.shape != (self.num_classes, self.input_dim):
            raise ValueError("mixture: means shape mismatch")
        if self.stdev <= 0:
            raise ValueError("mixture: stdev must be positive")
        if self.num_classes > 1:
            diffs = means[:, None, :] - means[None, :, :]
            dist = np.sqrt((diffs ** 2).sum(-1))
            np.fill_diagonal(dist, np.inf)
            if dist.min() == 0.0:
                raise ValueError("mixture: class means must be pairwise distinct")


def make_mixture_spec(num_classes: int, input_dim: int, seed: int,
                      mean_scale: float = 1.0, stdev: float = 1.0) -> MixtureSpec:
    """Class means drawn N(0, mean_scale^2 I) from the spec seed."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 11]))
    means = rng.standard_normal((num_classes, input_dim)) * mean_scale
    return MixtureSpec(num_classes, input_dim, means, stdev, int(seed))


def synthesize_mixture(spec: MixtureSpec, counts, seed: int | None = None) -> LongTailDataset:
    """Draw counts[c] samples from component c, grouped by class."""
    counts = np.asarray(counts, dtype=np.int64)
    if len(counts) != spec.num_classes:
        raise ValueError("synthesize_mixture: counts length != num_classes")
    draw_seed = spec.seed if seed is None else int(seed)
    rng = np.random.default_rng(np.random.SeedSequence([draw_seed, 23]))
    xs, ys = [], []
    for c, n in enumerate(counts):
        noise = rng.standard_normal((int(n), spec.input_dim))
        xs.append(spec.means[c] + spec.stdev * noise)
        ys.append(np.full(int(n), c, dtype=np.int64))
    return LongTailDataset(np.concatenate(xs), np.concatenate(ys), counts, draw_seed)


def subsample_corpus(corpus: LongTailDataset, counts, seed: int) -> LongTailDataset:
    """Deterministic per-class uniform subsample without replacement."""
    counts = np.asarray(counts, dtype=np.int64)
    if len(counts) != corpus.num_classes:
        raise ValueError("subsample_corpus: counts length != corpus classes")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 37]))
    keep = []
    for c, n in enumerate(counts):
        pool = np.where(corpus.labels == c)[0]
        if len(pool) < n:
            raise ValueError(
                f"subsample_corpus: class {c} has {len(pool)} samples, need {int(n)}"
            )
        keep.append(np.sort(rng.choice(pool, size=int(n), replace=False)))
    keep = np.concatenate(keep) if keep else np.array([], dtype=np.int64)
    return LongTailDataset(corpus.samples[keep], corpus.labels[keep], counts, int(seed))


def batch_stream(dataset: LongTailDataset, mode: str, batch_size: int, seed: int):
    """Infinite generator of index batches; deterministic under the seed.

    instance_balanced draws uniformly over samples; class_balanced draws a
    class uniformly, then a sample uniformly within it.
    """
    if batch_size < 1:
        raise ValueError("batch_stream: batch_size must be >= 1")
    if mode not in ("instance_balanced", "class_balanced"):
        raise ValueError(f"batch_stream: unknown mode {mode!r}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 41]))
    n = len(dataset.labels)
    if mode == "instance_balanced":
        while True:
            yield rng.integers(0, n, size=batch_size)
    else:
        c = dataset.num_classes
        counts = dataset.counts
        lut = np.zeros((c, int(counts.max())), dtype=np.int64)
        for k in range(c):
            lut[k, : counts[k]] = np.where(dataset.labels == k)[0]
        while True:
            cls = rng.integers(0, c, size=batch_size)
            within = rng.integers(0, counts[cls])
            yield lut[cls, within]


# -- corpus files and the dataset cache ----------------------------------


def save_dataset(dataset: LongTailDataset, dirpath) -> Path:
    dirpath = Path(dirpath)
    dirpath.mkdir(parents=True, exist_ok=True)
    meta = {
        "format": CORPUS_FORMAT,
        "num_classes": int(dataset.num_classes),
        "sample_shape": [int(s) for s in dataset.sample_shape],
        "count": int(len(dataset.labels)),
        "seed": int(dataset.seed),
    }
    (dirpath / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=1))
    flat = dataset.samples.reshape(len(dataset.labels), -1)
    (dirpath / "samples.bin").write_bytes(flat.astype("<f4").tobytes())
    (dirpath / "labels.bin").write_bytes(dataset.labels.astype("<u4").tobytes())
    return dirpath


def load_dataset(dirpath) -> LongTailDataset:
    dirpath = Path(dirpath)
    meta = json.loads((dirpath / "meta.json").read_text())
    if meta.get("format") != CORPUS_FORMAT:
        raise ValueError(f"load_dataset: unsupported format {meta.get('format')!r}")
    shape = tuple(meta["sample_shape"])
    count = int(meta["count"])
    flat = np.frombuffer((dirpath / "samples.bin").read_bytes(), dtype="<f4")
    labels = np.frombuffer((dirpath / "labels.bin").read_bytes(), dtype="<u4")
    if flat.size != count * int(np.prod(shape)) or labels.size != count:
        raise ValueError("load_dataset: payload size does not match meta.json")
    samples = flat.astype(np.float64).reshape((count,) + shape)
    labels = labels.astype(np.int64)
    counts = np.bincount(labels, minlength=meta["num_classes"]).astype(np.int64)
    return LongTailDataset(samples, labels, counts, int(meta.get("seed", 0)))


def cache_root() -> Path:
    return Path(os.environ.get(CACHE_ENV_VAR, DEFAULT_CACHE_DIR))


def cache_key(params: dict) -> str:
    blob = json.dumps(params, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def dataset_cache_dir(params: dict) -> Path:
    kind = params.get("data_kind", "dataset")
    return cache_root() / f"{kind}-{cache_key(params)}"
