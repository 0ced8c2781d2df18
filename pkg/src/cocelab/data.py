"""Synthetic classification data with truncated-Poisson corruption severities.

Random numbers come from numpy's PCG64 bit generator (``np.random.default_rng``),
seeded through ``SeedSequence``; see ``derive_rng``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, CSVFormatError

NO_STATE = -1

# stream ids for SeedSequence-derived generators
STREAM_DATA = 0
STREAM_SPLIT = 1
STREAM_INIT = 2
STREAM_BATCHES = 3


def derive_rng(seed: int, stream: int) -> np.random.Generator:
    """Independent PCG64 stream keyed by (seed, stream)."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), int(stream)])))


@dataclass(frozen=True)
class LabeledExample:
    features: np.ndarray
    label: int
    state: int | None = None


@dataclass
class Dataset:
    """Column-oriented examples; ``states`` uses -1 for an unobserved state."""

    X: np.ndarray
    y: np.ndarray
    states: np.ndarray

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.states = np.asarray(self.states, dtype=np.int64)
        if self.X.ndim != 2 or self.y.shape != (self.X.shape[0],) or self.states.shape != self.y.shape:
            raise ValueError("inconsistent dataset shapes")

    def __len__(self):
        return self.y.size

    def __getitem__(self, idx):
        if isinstance(idx, (int, np.integer)):
            s = int(self.states[idx])
            return LabeledExample(self.X[idx], int(self.y[idx]), None if s == NO_STATE else s)
        return Dataset(self.X[idx], self.y[idx], self.states[idx])

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.X.shape == other.X.shape
            and np.array_equal(self.X, other.X)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.states, other.states)
        )

    @property
    def input_dim(self) -> int:
        return self.X.shape[1]

    @property
    def has_states(self) -> bool:
        return bool(np.all(self.states != NO_STATE))

    def observed_states(self):
        return sorted(int(s) for s in np.unique(self.states) if s != NO_STATE)

    @classmethod
    def from_examples(cls, examples):
        examples = list(examples)
        X = np.array([e.features for e in examples], dtype=np.float64)
        y = [e.label for e in examples]
        s = [NO_STATE if e.state is None else e.state for e in examples]
        return cls(X.reshape(len(examples), -1), y, s)


@dataclass
class SplitDataset:
    train: Dataset
    val: Dataset
    test: Dataset

    def __getitem__(self, name):
        return getattr(self, name)


@dataclass(frozen=True)
class DataConfig:
    num_classes: int = 3
    input_dim: int = 10
    # size of the train+val pool; test set is drawn separately
    samples: int = 6250
    test_samples: int = 5000
    class_separation: float = 3.0
    s_max: int = 5
    severity_noise_scale: float = 0.75
    drift_mode: bool = False
    train_fraction: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2 or self.input_dim < 1:
            raise ConfigError("need num_classes >= 2 and input_dim >= 1")
        if self.num_classes > self.input_dim + 1:
            raise ConfigError("a regular simplex of class means needs num_classes <= input_dim + 1")
        if self.samples < self.num_classes or self.test_samples < self.num_classes:
            raise ConfigError("samples must be at least num_classes")
        if self.s_max < 0:
            raise ConfigError("s_max must be >= 0")
        if not (self.class_separation > 0 and self.severity_noise_scale > 0):
            raise ConfigError("class_separation and severity_noise_scale must be positive")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError("train_fraction must lie in (0, 1)")
        if self.seed < 0:
            raise ConfigError("seed must be unsigned")

    @property
    def num_states(self) -> int:
        return self.s_max + 1


def severity_pmf(s_max: int = 5) -> np.ndarray:
    """P(S = s) for S = min(Poisson(1), s_max)."""
    pmf = np.array([math.exp(-1.0) / math.factorial(s) for s in range(s_max)])
    return np.append(pmf, 1.0 - pmf.sum())


def sample_severity(rng: np.random.Generator, s_max: int = 5, size=None):
    """Inverse-CDF draw of min(Poisson(1), s_max); tail mass lands on s_max."""
    cdf = np.cumsum(severity_pmf(s_max))[:-1]
    u = rng.random(size)
    out = np.searchsorted(cdf, u, side="right")
    return int(out) if size is None else out.astype(np.int64)


def corrupt(x, s, cfg: DataConfig, rng: np.random.Generator):
    """Add N(0, (scale * s)^2 I) noise; severity 0 returns the input untouched."""
    x = np.asarray(x, dtype=np.float64)
    s = np.asarray(s)
    if np.any(s < 0) or np.any(s > cfg.s_max):
        raise ValueError(f"severity out of range 0..{cfg.s_max}")
    if x.ndim == 1:
        if int(s) == 0:
            return x.copy()
        return x + cfg.severity_noise_scale * int(s) * rng.standard_normal(x.shape)
    noise = rng.standard_normal(x.shape) * (cfg.severity_noise_scale * s)[:, None]
    return np.where((s > 0)[:, None], x + noise, x)


def class_means(num_classes: int, input_dim: int, separation: float) -> np.ndarray:
    """Vertices of a regular simplex with norm ``separation``, centred at the origin."""
    E = np.eye(num_classes, input_dim)
    if num_classes <= input_dim:
        E = E - E.mean(axis=0)
    else:
        # C = d + 1: project the standard basis of R^C onto the sum-zero hyperplane
        full = np.eye(num_classes) - 1.0 / num_classes
        basis = np.linalg.svd(full)[2][: num_classes - 1]
        E = full @ basis.T
    return separation * E / np.linalg.norm(E, axis=1, keepdims=True)


def _draw(cfg: DataConfig, n: int, rng, corrupted: bool) -> Dataset:
    means = class_means(cfg.num_classes, cfg.input_dim, cfg.class_separation)
    y = rng.permutation(np.arange(n) % cfg.num_classes)
    clean = means[y] + rng.standard_normal((n, cfg.input_dim))
    if corrupted:
        states = sample_severity(rng, cfg.s_max, size=n)
    else:
        states = np.zeros(n, dtype=np.int64)
    return Dataset(corrupt(clean, states, cfg, rng), y, states)


def split(dataset: Dataset, train_fraction: float, seed: int):
    """Seeded shuffle, then prefix split into (train, val)."""
    n = len(dataset)
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie in (0, 1)")
    n_train = int(round(train_fraction * n))
    if n_train == 0 or n_train == n:
        raise ValueError(f"split of {n} examples at {train_fraction} leaves a side empty")
    perm = derive_rng(seed, STREAM_SPLIT).permutation(n)
    return dataset[perm[:n_train]], dataset[perm[n_train:]]


def generate_dataset(cfg: DataConfig) -> SplitDataset:
    rng = derive_rng(cfg.seed, STREAM_DATA)
    pool = _draw(cfg, cfg.samples, rng, corrupted=not cfg.drift_mode)
    test = _draw(cfg, cfg.test_samples, rng, corrupted=True)
    train, val = split(pool, cfg.train_fraction, cfg.seed)
    return SplitDataset(train, val, test)


def save_csv(dataset: Dataset, path) -> None:
    d = dataset.input_dim
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["state", "label"] + [f"f{j}" for j in range(d)])
        for x, y, s in zip(dataset.X, dataset.y, dataset.states):
            w.writerow(["" if s == NO_STATE else int(s), int(y)] + [format(v, ".17g") for v in x])


def load_csv(path) -> Dataset:
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CSVFormatError("empty file", row=1) from None
        has_state = bool(header) and header[0] == "state"
        cols = header[1:] if has_state else header
        if not cols or cols[0] != "label":
            raise CSVFormatError("header must be 'state,label,f0,...' or 'label,f0,...'", row=1)
        feats = cols[1:]
        if feats != [f"f{j}" for j in range(len(feats))] or not feats:
            raise CSVFormatError("feature columns must be f0..f{d-1}", row=1)
        X, y, states = [], [], []
        for rownum, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise CSVFormatError(f"expected {len(header)} fields, got {len(row)}", row=rownum)
            try:
                if has_state:
                    states.append(int(row[0]) if row[0] != "" else NO_STATE)
                    row = row[1:]
                else:
                    states.append(NO_STATE)
                y.append(int(row[0]))
                X.append([float(v) for v in row[1:]])
            except ValueError as exc:
                raise CSVFormatError(str(exc), row=rownum) from None
            if states[-1] < NO_STATE or y[-1] < 0 or not all(math.isfinite(v) for v in X[-1]):
                raise CSVFormatError("negative state/label or non-finite feature", row=rownum)
    return Dataset(np.array(X, dtype=np.float64).reshape(len(y), len(feats)), y, states)
