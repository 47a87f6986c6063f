"""Synthetic signals, CSV ingestion, stratified splits, normalization and batching."""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator

import numpy as np

from .autodiff import Tensor


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    signals: np.ndarray  # (N, C, L)
    labels: np.ndarray  # (N,)
    classes: int
    channel_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.signals = np.asarray(self.signals, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.signals.ndim != 3:
            raise DataError(f"signals must be (N, C, L), got {self.signals.shape}")
        if self.labels.shape != (self.signals.shape[0],):
            raise DataError("one label per signal")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise DataError(f"labels outside [0, {self.classes})")
        if not np.all(np.isfinite(self.signals)):
            raise DataError("signals contain NaN or Inf")
        if not self.channel_names:
            self.channel_names = [f"ch{i}" for i in range(self.signals.shape[1])]

    def __len__(self):
        return self.signals.shape[0]

    @property
    def channels(self) -> int:
        return self.signals.shape[1]

    @property
    def length(self) -> int:
        return self.signals.shape[2]

    def subset(self, index) -> "Dataset":
        index = np.asarray(index, dtype=np.intp)
        return Dataset(self.signals[index], self.labels[index], self.classes, list(self.channel_names))


@dataclass(frozen=True)
class SyntheticSpec:
    classes: int = 3
    samples_per_class: int = 150
    length: int = 256
    channels: int = 1
    base_freqs: tuple[float, ...] | None = None
    amplitude_range: tuple[float, float] = (0.8, 1.2)
    phase_range: tuple[float, float] = (0.0, 2 * np.pi)
    freq_jitter: float = 0.0
    noise: float = 0.2
    ecg_like: bool = False
    seed: int = 0

    def freqs(self) -> tuple[float, ...]:
        f = self.base_freqs or tuple(float(2 + i) for i in range(self.classes))
        if len(f) != self.classes:
            raise DataError("one base frequency per class")
        if len(set(f)) != len(f):
            raise DataError("base frequencies must be distinct")
        return tuple(f)


def _spike_train(t: np.ndarray, period: float, offset: float, rng, width: float = 1.5) -> np.ndarray:
    out = np.zeros_like(t)
    pos = offset
    while pos < t.size + 3 * width:
        out += np.exp(-0.5 * ((t - pos) / width) ** 2)
        pos += period * (1.0 + 0.05 * rng.standard_normal())
    return out


def gen_synthetic(spec: SyntheticSpec) -> Dataset:
    """Class c: amplitude * sin(2 pi f_c t / L + phase) (+ spike train) + Gaussian noise."""
    freqs = spec.freqs()
    rng = np.random.default_rng(spec.seed)
    length = spec.length
    t = np.arange(length, dtype=np.float64)
    signals, labels = [], []
    for c, f in enumerate(freqs):
        for _ in range(spec.samples_per_class):
            sample = np.empty((spec.channels, length))
            for ch in range(spec.channels):
                amp = rng.uniform(*spec.amplitude_range)
                phase = rng.uniform(*spec.phase_range)
                freq = f * (1.0 + spec.freq_jitter * rng.uniform(-1, 1))
                wave = amp * np.sin(2 * np.pi * freq * t / length + phase)
                if spec.ecg_like:
                    period = length / freq
                    wave = 0.2 * wave + 2.0 * amp * _spike_train(t, period, rng.uniform(0, period), rng)
                sample[ch] = wave + spec.noise * rng.standard_normal(length)
            signals.append(sample)
            labels.append(c)
    return Dataset(np.stack(signals), np.array(labels), spec.classes)


def write_manifest(path, spec: SyntheticSpec, **extra):
    record = {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(spec).items()}
    record.update(extra)
    Path(path).write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------- CSV


@dataclass(frozen=True)
class CsvSchema:
    channels: int
    length: int
    classes: int | None = None


def export_csv(ds: Dataset, path):
    """Header ``label,ch0_t0,...`` then one row per sample, values channel-major."""
    header = ["label"] + [f"{name}_t{i}" for name in ds.channel_names for i in range(ds.length)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for x, y in zip(ds.signals, ds.labels):
            w.writerow([int(y)] + [repr(float(v)) for v in x.reshape(-1)])


def load_csv(path, schema: CsvSchema) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    width = schema.channels * schema.length
    rows, labels = [], []
    names = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or not any(cell.strip() for cell in row):
                continue
            if lineno == 1 and row[0].strip() == "label":
                names = _channel_names(row[1:], schema)
                continue
            if len(row) != width + 1:
                raise DataError(f"line {lineno}: expected {width + 1} fields, found {len(row)}")
            try:
                label = int(row[0])
                values = [float(v) for v in row[1:]]
            except ValueError:
                raise DataError(f"line {lineno}: non-numeric field") from None
            if schema.classes is not None and not 0 <= label < schema.classes:
                raise DataError(f"line {lineno}: label {label} outside [0, {schema.classes})")
            rows.append(values)
            labels.append(label)
    if not rows:
        raise DataError("no data rows")
    signals = np.array(rows).reshape(len(rows), schema.channels, schema.length)
    if not np.all(np.isfinite(signals)):
        raise DataError("signals contain NaN or Inf")
    classes = schema.classes if schema.classes is not None else max(labels) + 1
    if min(labels) < 0:
        raise DataError("negative label")
    return Dataset(signals, np.array(labels), classes, names)


def _channel_names(header: list[str], schema: CsvSchema) -> list[str]:
    names = []
    for i in range(schema.channels):
        cell = header[i * schema.length] if i * schema.length < len(header) else ""
        names.append(cell.rsplit("_t", 1)[0] if "_t" in cell else f"ch{i}")
    return names


# ------------------------------------------------------------------ splits


def _allocate(counts: np.ndarray, fraction: float) -> np.ndarray:
    """Largest-remainder allocation of round(fraction * total) across groups."""
    ideal = counts * fraction
    base = np.floor(ideal).astype(int)
    short = int(round(fraction * counts.sum())) - base.sum()
    order = np.argsort(-(ideal - base), kind="stable")
    base[order[:short]] += 1
    return np.minimum(base, counts)


def split(ds: Dataset, fractions=(0.8, 0.2), seed: int = 0) -> tuple[Dataset, Dataset]:
    """Stratified, disjoint train/test split."""
    train_frac, test_frac = fractions
    if abs(train_frac + test_frac - 1.0) > 1e-9 or min(fractions) < 0:
        raise DataError(f"fractions must be non-negative and sum to 1, got {fractions}")
    rng = np.random.default_rng(seed)
    classes = np.unique(ds.labels)
    counts = np.array([(ds.labels == c).sum() for c in classes])
    if train_frac > 0 and test_frac > 0 and counts.min() < 2:
        raise DataError("every class needs at least 2 samples to appear in both splits")
    n_train = _allocate(counts, train_frac)
    if train_frac > 0 and test_frac > 0:
        n_train = np.clip(n_train, 1, counts - 1)  # every class lands on both sides
    train_idx, test_idx = [], []
    for c, k in zip(classes, n_train):
        idx = rng.permutation(np.flatnonzero(ds.labels == c))
        train_idx.append(idx[:k])
        test_idx.append(idx[k:])
    train_idx = np.sort(np.concatenate(train_idx))
    test_idx = np.sort(np.concatenate(test_idx))
    return ds.subset(train_idx), ds.subset(test_idx)


def label_subsample(ds: Dataset, fraction: float, seed: int = 0) -> Dataset:
    """Stratified subset holding round(fraction * N) labelled samples."""
    if not 0 < fraction <= 1:
        raise DataError("label fraction must lie in (0, 1]")
    if fraction == 1:
        return ds
    rng = np.random.default_rng(seed)
    classes = np.unique(ds.labels)
    counts = np.array([(ds.labels == c).sum() for c in classes])
    take = _allocate(counts, fraction)
    # keep every class represented when the budget allows
    for i in np.flatnonzero(take == 0):
        donor = int(np.argmax(take))
        if take[donor] > 1:
            take[donor] -= 1
            take[i] = 1
    picked = [rng.permutation(np.flatnonzero(ds.labels == c))[:k] for c, k in zip(classes, take)]
    return ds.subset(np.sort(np.concatenate(picked)))


# ------------------------------------------------------------ normalization


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray


def normalize(ds: Dataset, mode: str = "zscore-per-channel", stats: NormStats | None = None):
    """Returns (dataset, stats). Pass the train stats back in to normalize a test split."""
    if mode == "none":
        c = ds.channels
        return ds, NormStats(np.zeros(c), np.ones(c))
    if mode != "zscore-per-channel":
        raise DataError(f"unknown normalization {mode!r}")
    if stats is None:
        mean = ds.signals.mean(axis=(0, 2))
        std = ds.signals.std(axis=(0, 2))
        flat = std == 0
        if flat.any():
            warnings.warn(f"zero-variance channels {np.flatnonzero(flat).tolist()} left unscaled", stacklevel=2)
            mean = np.where(flat, 0.0, mean)
            std = np.where(flat, 1.0, std)
        stats = NormStats(mean, std)
    signals = (ds.signals - stats.mean[None, :, None]) / stats.std[None, :, None]
    return replace(ds, signals=signals, channel_names=list(ds.channel_names)), stats


# ----------------------------------------------------------------- batching


def batches(ds: Dataset, batch_size: int, seed: int, epoch: int = 0, drop_last: bool = True,
            shuffle: bool = True) -> Iterator[tuple[Tensor, np.ndarray]]:
    """Yield (signals, labels); the order depends only on (seed, epoch)."""
    if batch_size < 1:
        raise DataError("batch size must be >= 1")
    n = len(ds)
    order = np.random.default_rng([seed, epoch]).permutation(n) if shuffle else np.arange(n)
    stop = n - n % batch_size if drop_last else n
    for start in range(0, stop, batch_size):
        idx = order[start : start + batch_size]
        yield Tensor(ds.signals[idx]), ds.labels[idx]
