"""Windowed time-series datasets and a synthetic low/high-frequency generator."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

SPLIT_NAMES = ("train", "val", "test")
class DatasetFormatError(ValueError):
    """On-disk dataset does not match its metadata."""


class DatasetValueError(ValueError):
    """Dataset contains invalid values (NaN/Inf, labels out of range)."""


class SplitConfigError(ValueError):
    """Split or subsample request cannot be satisfied."""


@dataclass
class TimeSeriesDataset:
    samples: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = "dataset"
    split: str | None = None
    # indices into the parent dataset, kept so splits/subsets can be audited
    indices: np.ndarray | None = None
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        validate_dataset(self)
        if self.indices is None:
            self.indices = np.arange(len(self.labels))

    def __len__(self):
        return self.samples.shape[0]

    @property
    def channels(self):
        return self.samples.shape[1]

    @property
    def length(self):
        return self.samples.shape[2]

    def subset(self, idx, split=None):
        idx = np.asarray(idx, dtype=np.int64)
        return TimeSeriesDataset(
            samples=self.samples[idx],
            labels=self.labels[idx],
            num_classes=self.num_classes,
            name=self.name,
            split=self.split if split is None else split,
            indices=self.indices[idx],
        )


def validate_dataset(ds):
    x, y = ds.samples, ds.labels
    if x.ndim != 3:
        raise DatasetFormatError(f"samples must be 3-D [n, channels, length], got shape {x.shape}")
    if x.shape[0] != y.shape[0]:
        raise DatasetFormatError(f"{x.shape[0]} samples but {y.shape[0]} labels")
    if x.shape[1] < 1 or x.shape[2] < 2:
        raise DatasetFormatError(f"need channels >= 1 and length >= 2, got {x.shape[1:]}")
    if ds.num_classes < 1:
        raise DatasetFormatError("num_classes must be positive")
    if y.size and (y.min() < 0 or y.max() >= ds.num_classes):
        raise DatasetValueError(f"labels must lie in [0, {ds.num_classes})")
    if not np.all(np.isfinite(x)):
        raise DatasetValueError("samples contain NaN or Inf")


@dataclass(frozen=True)
class SplitSpec:
    train_frac: float = 0.6
    val_frac: float = 0.2
    test_frac: float = 0.2
    seed: int = 0

    def __post_init__(self):
        fracs = (self.train_frac, self.val_frac, self.test_frac)
        if any(not 0.0 < f < 1.0 for f in fracs):
            raise SplitConfigError(f"split fractions must be in (0, 1), got {fracs}")
        if abs(sum(fracs) - 1.0) > 1e-9:
            raise SplitConfigError(f"split fractions must sum to 1, got {sum(fracs)}")


@dataclass(frozen=True)
class SyntheticSpec:
    n_per_class: int = 200
    channels: int = 3
    length: int = 128
    low_freq_classes: tuple[float, ...] = (2.0, 3.0)
    high_freq_classes: tuple[float, ...] = (16.0, 32.0)
    noise_sigma: float = 1.0
    burst_fraction: float = 0.5

    def __post_init__(self):
        freqs = tuple(self.low_freq_classes) + tuple(self.high_freq_classes)
        if not freqs:
            raise ValueError("at least one class frequency is required")
        if any(f <= 0 for f in freqs):
            raise ValueError("class frequencies must be positive")
        if self.low_freq_classes and self.high_freq_classes:
            if max(self.low_freq_classes) >= min(self.high_freq_classes):
                raise ValueError("low-frequency classes must lie strictly below high-frequency classes")
        if self.n_per_class < 1 or self.channels < 1 or self.length < 2:
            raise ValueError("n_per_class, channels must be >= 1 and length >= 2")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if not 0.0 < self.burst_fraction <= 1.0:
            raise ValueError("burst_fraction must be in (0, 1]")

    @property
    def num_classes(self):
        return len(self.low_freq_classes) + len(self.high_freq_classes)


# ---------------------------------------------------------------------------
# on-disk format
# ---------------------------------------------------------------------------

def _atomic_write_bytes(path, payload):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def save_dataset(root, splits, name=None, num_classes=None):
    """Write ``{split: TimeSeriesDataset}`` into ``root`` in the binary layout.

    Samples go to ``<split>.bin`` as little-endian float32 in row-major
    ``[n, channels, length]`` order, labels to ``<split>.labels`` as
    little-endian int64, shapes to ``meta.json``.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    first = next(iter(splits.values()))
    shapes = {ds.samples.shape[1:] for ds in splits.values()}
    if len(shapes) != 1:
        raise DatasetFormatError(f"splits disagree on [channels, length]: {sorted(shapes)}")
    for split, ds in splits.items():
        if split not in SPLIT_NAMES:
            raise DatasetFormatError(f"unknown split name {split!r}")
        _atomic_write_bytes(root / f"{split}.bin", np.ascontiguousarray(ds.samples, dtype="<f4").tobytes())
        _atomic_write_bytes(root / f"{split}.labels", np.ascontiguousarray(ds.labels, dtype="<i8").tobytes())
    meta = {
        "name": name or first.name,
        "channels": int(first.channels),
        "length": int(first.length),
        "num_classes": int(num_classes or first.num_classes),
        "splits": {split: len(ds) for split, ds in splits.items()},
    }
    _atomic_write_bytes(root / "meta.json", json.dumps(meta, indent=2).encode())
    return root


def read_meta(root):
    root = Path(root)
    meta_path = root / "meta.json"
    if not meta_path.is_file():
        raise FileNotFoundError(f"no meta.json in {root}")
    meta = json.loads(meta_path.read_text())
    missing = {"name", "channels", "length", "num_classes", "splits"} - set(meta)
    if missing:
        raise DatasetFormatError(f"meta.json is missing keys {sorted(missing)}")
    return meta


def read_split(root, split_name, meta=None):
    """Read one split exactly as stored (no normalization)."""
    root = Path(root)
    meta = meta or read_meta(root)
    if split_name not in meta["splits"]:
        raise FileNotFoundError(f"split {split_name!r} not listed in {root / 'meta.json'}")
    bin_path, lab_path = root / f"{split_name}.bin", root / f"{split_name}.labels"
    if not bin_path.is_file() or not lab_path.is_file():
        raise FileNotFoundError(f"split {split_name!r} files missing in {root}")
    n, c, t = int(meta["splits"][split_name]), int(meta["channels"]), int(meta["length"])
    raw = np.fromfile(bin_path, dtype="<f4")
    if raw.size != n * c * t:
        raise DatasetFormatError(
            f"{bin_path.name} holds {raw.size} values, metadata implies {n}x{c}x{t}={n * c * t}"
        )
    labels = np.fromfile(lab_path, dtype="<i8")
    if labels.size != n:
        raise DatasetFormatError(f"{lab_path.name} holds {labels.size} labels, metadata says n={n}")
    samples = raw.reshape(n, c, t).astype(np.float32)
    if not np.all(np.isfinite(samples)):
        raise DatasetValueError(f"{bin_path.name} contains NaN or Inf")
    return TimeSeriesDataset(samples, labels.astype(np.int64), int(meta["num_classes"]),
                             name=meta["name"], split=split_name)


def channel_stats(samples):
    """Per-channel mean and std over samples and time; zero std maps to 1."""
    x = np.asarray(samples, dtype=np.float64)
    mean = x.mean(axis=(0, 2))
    std = x.std(axis=(0, 2))
    std = np.where(std > 0, std, 1.0)
    return mean, std


def apply_zscore(ds, mean, std):
    x = (np.asarray(ds.samples, dtype=np.float64) - mean[None, :, None]) / std[None, :, None]
    return replace(ds, samples=x.astype(np.float32), warnings=list(ds.warnings))


def load_dataset(root_path, split_name, normalize=True):
    """Load ``split_name`` from a dataset directory.

    Per-channel z-scoring uses statistics of the train split only, so every
    split of one directory is normalized identically.
    """
    meta = read_meta(root_path)
    if split_name not in SPLIT_NAMES:
        raise FileNotFoundError(f"unknown split name {split_name!r}; expected one of {SPLIT_NAMES}")
    ds = read_split(root_path, split_name, meta)
    if not normalize:
        return ds
    train = ds if split_name == "train" else read_split(root_path, "train", meta)
    mean, std = channel_stats(train.samples)
    return apply_zscore(ds, mean, std)


def load_splits(root_path, normalize=True):
    meta = read_meta(root_path)
    return {s: load_dataset(root_path, s, normalize) for s in SPLIT_NAMES if s in meta["splits"]}


def resplit_union(root_path, spec):
    """Pool every stored split and re-partition the union with ``spec``.

    Returns z-scored (train, val, test) using statistics of the new train
    split.
    """
    meta = read_meta(root_path)
    parts = [read_split(root_path, s, meta) for s in SPLIT_NAMES if s in meta["splits"]]
    union = TimeSeriesDataset(np.concatenate([p.samples for p in parts]),
                              np.concatenate([p.labels for p in parts]),
                              int(meta["num_classes"]), name=meta["name"])
    return zscore_splits(*split_dataset(union, spec))


def zscore_splits(train, *others):
    """Normalize ``train`` and any other splits with train-split statistics."""
    mean, std = channel_stats(train.samples)
    return tuple(apply_zscore(ds, mean, std) for ds in (train,) + others)


# ---------------------------------------------------------------------------
# splitting and subsampling
# ---------------------------------------------------------------------------

def _allocate(n, fracs):
    """Largest-remainder allocation of ``n`` items to fractions."""
    raw = [n * f for f in fracs]
    counts = [int(math.floor(r + 1e-9)) for r in raw]
    order = sorted(range(len(fracs)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def split_indices(labels, spec):
    """Index partition ``(train, val, test)``; depends on labels and seed only."""
    labels = np.asarray(labels)
    n = len(labels)
    fracs = (spec.train_frac, spec.val_frac, spec.test_frac)
    rng = np.random.default_rng(spec.seed)
    classes, counts = np.unique(labels, return_counts=True)
    parts = [[], [], []]
    if len(classes) > 0 and counts.min() >= 5:
        totals = _allocate(n, fracs)
        per_class = {c: _allocate(int(k), fracs) for c, k in zip(classes, counts)}
        # nudge per-class allocations so split totals match the global allocation
        for j in range(3):
            diff = totals[j] - sum(per_class[c][j] for c in classes)
            for c in classes:
                if diff == 0:
                    break
                donor = max((k for k in range(3) if k != j), key=lambda k: per_class[c][k])
                if diff > 0 and per_class[c][donor] > 1:
                    per_class[c][donor] -= 1
                    per_class[c][j] += 1
                    diff -= 1
                elif diff < 0 and per_class[c][j] > 1:
                    per_class[c][j] -= 1
                    per_class[c][donor] += 1
                    diff += 1
        for c in classes:
            idx = rng.permutation(np.flatnonzero(labels == c))
            a, b, _ = per_class[c]
            parts[0].append(idx[:a])
            parts[1].append(idx[a:a + b])
            parts[2].append(idx[a + b:])
    else:
        idx = rng.permutation(n)
        a, b, _ = _allocate(n, fracs)
        parts = [[idx[:a]], [idx[a:a + b]], [idx[a + b:]]]
    out = tuple(np.sort(np.concatenate(p)) if p else np.array([], dtype=np.int64) for p in parts)
    for name, part in zip(SPLIT_NAMES, out):
        if part.size == 0:
            raise SplitConfigError(f"{name} split would be empty for n={n} and fractions {fracs}")
    return out


def split_dataset(ds, spec):
    if len(ds) == 0:
        raise SplitConfigError("cannot split an empty dataset")
    idx = split_indices(ds.labels, spec)
    return tuple(ds.subset(i, split=name) for i, name in zip(idx, SPLIT_NAMES))


def subsample_indices(labels, fraction, seed):
    """Stratified subset of ``ceil(fraction * n)`` indices plus warnings.

    Members of each class are ranked by a seed-determined permutation; the
    r-th member of a class of size k gets priority ``(r + 0.5) / k`` and the
    lowest priorities are kept. The ordering does not depend on ``fraction``,
    so larger fractions with the same seed always contain the smaller ones.
    """
    if not 0.0 < fraction <= 1.0:
        raise SplitConfigError(f"fraction must be in (0, 1], got {fraction}")
    labels = np.asarray(labels)
    n = len(labels)
    if fraction == 1.0:
        return np.arange(n), []
    target = int(math.ceil(fraction * n - 1e-9))
    rng = np.random.default_rng(seed)
    classes = np.unique(labels)
    priority = np.empty(n)
    for c in classes:
        members = np.flatnonzero(labels == c)
        ranking = members[rng.permutation(len(members))]
        priority[ranking] = (np.arange(len(members)) + 0.5) / len(members)
    order = np.lexsort((labels, priority))
    idx = np.sort(order[:target])
    warnings = []
    kept = set(labels[idx].tolist())
    for c in classes:
        if int(c) not in kept:
            count = int(np.sum(labels == c))
            warnings.append(f"class {int(c)} has no samples at fraction {fraction} "
                            f"(expected {count * fraction:.3f})")
    return idx, warnings


def subsample_labels(ds, fraction, seed):
    idx, warnings = subsample_indices(ds.labels, fraction, seed)
    out = ds.subset(idx)
    out.warnings = list(ds.warnings) + warnings
    return out


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

def _class_signal(kind, freq, length, rng, burst_fraction):
    t = np.arange(length) / length
    phase = rng.uniform(0, 2 * np.pi)
    wave = np.sin(2 * np.pi * freq * t + phase)
    if kind == "low":
        return wave
    # high-frequency class: Hann-windowed burst covering burst_fraction of the window
    width = max(int(length * burst_fraction), 2)
    start = int(rng.integers(0, length - width + 1))
    window = np.zeros(length)
    window[start:start + width] = np.hanning(width)
    return wave * window


def generate_synthetic(spec, seed):
    """Balanced dataset mixing slow envelope classes and short burst classes.

    Low-frequency classes are full-window sinusoids at their designated
    cycles/window; high-frequency classes are a Hann-windowed burst at their
    frequency placed at a random position. Every channel carries the class
    signal with a random gain in [0.5, 1.5], plus white Gaussian noise.
    """
    rng = np.random.default_rng(seed)
    kinds = [("low", f) for f in spec.low_freq_classes] + [("high", f) for f in spec.high_freq_classes]
    n = spec.n_per_class * len(kinds)
    samples = np.empty((n, spec.channels, spec.length), dtype=np.float64)
    labels = np.repeat(np.arange(len(kinds)), spec.n_per_class)
    for i, c in enumerate(labels):
        kind, freq = kinds[c]
        base = _class_signal(kind, freq, spec.length, rng, spec.burst_fraction)
        gains = rng.uniform(0.5, 1.5, size=(spec.channels, 1))
        samples[i] = gains * base[None, :]
    if spec.noise_sigma > 0:
        samples += rng.normal(0.0, spec.noise_sigma, size=samples.shape)
    order = rng.permutation(n)
    return TimeSeriesDataset(samples[order].astype(np.float32), labels[order], len(kinds), name="synthetic")
