"""Synthetic Gaussian sequence data: covariance construction, seeded sampling,
the mid-sequence sine label, zero padding and on-disk datasets."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

__all__ = [
    "KINDS",
    "ProcessSpec",
    "SequenceDataset",
    "NonPSDCovarianceError",
    "white_noise_h",
    "covariance_matrix",
    "jittered_cholesky",
    "sample_batch",
    "label_index",
    "sine_labels",
    "pad_left_zero",
    "pad_right_zero",
    "save_dataset",
    "load_dataset",
]

KINDS = ("gaussian_white_noise", "ornstein_uhlenbeck", "identical_gaussian")
LABEL_RULE = "sin(x[floor(L/2), 0])"


class NonPSDCovarianceError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class ProcessSpec:
    """Generative description of a stationary Gaussian input process.

    ``mean`` defaults to 1 for white noise (the synthetic-experiment setting)
    and to 0 for the other two kinds.
    """

    kind: str = "gaussian_white_noise"
    length: int = 128
    dim: int = 1
    seed: int = 0
    b: float = 1.0
    mean: Optional[float] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown process kind {self.kind!r}; expected one of {KINDS}")
        if self.length < 1 or self.dim < 1:
            raise ValueError("length and dim must be >= 1")
        if self.kind == "gaussian_white_noise" and self.b == 0:
            raise ValueError("bandwidth b must be non-zero")

    @property
    def mu(self) -> float:
        if self.mean is not None:
            return float(self.mean)
        return 1.0 if self.kind == "gaussian_white_noise" else 0.0

    def mean_fn(self, t):
        return np.full(np.shape(t), self.mu, dtype=float)

    def var_fn(self, t):
        """Marginal variance K(t, t), constant for every bundled process."""
        v = white_noise_h(0.0, self.b) if self.kind == "gaussian_white_noise" else 1.0
        return np.full(np.shape(t), v, dtype=float)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class SequenceDataset:
    inputs: np.ndarray  # (n, L, d)
    labels: np.ndarray  # (n,)
    spec: ProcessSpec
    label_rule: str = LABEL_RULE

    def __post_init__(self):
        if self.inputs.ndim != 3 or self.labels.shape != (self.inputs.shape[0],):
            raise ValueError("inputs must be (n, L, d) with one label per sequence")
        if not (np.all(np.isfinite(self.inputs)) and np.all(np.isfinite(self.labels))):
            raise ValueError("dataset contains non-finite values")

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.inputs).tobytes())
        h.update(np.ascontiguousarray(self.labels).tobytes())
        return h.hexdigest()[:16]


def white_noise_h(t, b: float):
    """Gaussian autocovariance ``exp(-(t/b)^2) / (|b| sqrt(pi))``."""
    t = np.asarray(t, dtype=float)
    return np.exp(-((t / b) ** 2)) / (abs(b) * math.sqrt(math.pi))


def covariance_matrix(spec: ProcessSpec) -> np.ndarray:
    lag = np.subtract.outer(np.arange(spec.length), np.arange(spec.length)).astype(float)
    if spec.kind == "gaussian_white_noise":
        return white_noise_h(lag, spec.b)
    if spec.kind == "ornstein_uhlenbeck":
        return np.exp(-np.abs(lag))
    return np.ones_like(lag)


def jittered_cholesky(k: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor of ``k + eps I``.

    ``eps`` starts at ``1e-12 * trace/L`` and grows tenfold up to
    ``1e-6 * trace/L``.
    """
    n = k.shape[0]
    scale = np.trace(k) / n
    if not np.isfinite(scale) or scale <= 0:
        raise NonPSDCovarianceError("non-PSD covariance: non-positive trace")
    eye = np.eye(n)
    for power in range(-12, -5):
        try:
            return np.linalg.cholesky(k + (10.0**power) * scale * eye)
        except np.linalg.LinAlgError:
            continue
    raise NonPSDCovarianceError("non-PSD covariance: Cholesky failed at maximum jitter")


def label_index(length: int) -> int:
    return length // 2


def sine_labels(inputs: np.ndarray) -> np.ndarray:
    return np.sin(inputs[:, label_index(inputs.shape[1]), 0])


def sequence_rng(seed: int, index: int) -> np.random.Generator:
    """Per-sequence generator; sequence ``i`` depends only on ``(seed, i)``."""
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, index])


def sample_batch(spec: ProcessSpec, n: int) -> SequenceDataset:
    """Draw ``n`` sequences of shape ``(L, d)`` with i.i.d. channels."""
    if n < 1:
        raise ValueError("n must be >= 1")
    L, d = spec.length, spec.dim
    if spec.kind == "identical_gaussian":
        # rank-one covariance: the exact factor is a column of ones
        factor = np.ones((L, 1))
    else:
        factor = jittered_cholesky(covariance_matrix(spec))
    z = np.stack([sequence_rng(spec.seed, i).standard_normal((factor.shape[1], d)) for i in range(n)])
    inputs = spec.mu + np.einsum("lk,nkd->nld", factor, z)
    return SequenceDataset(inputs, sine_labels(inputs), spec)


def pad_left_zero(x: np.ndarray) -> np.ndarray:
    """Prepend ``L`` zeros along the time axis (axis 0 for ``(L, ...)``)."""
    x = np.asarray(x)
    return np.concatenate([np.zeros_like(x), x], axis=0)


def pad_right_zero(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    return np.concatenate([x, np.zeros_like(x)], axis=0)


def save_dataset(ds: SequenceDataset, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n, L, d = ds.inputs.shape
    meta = {
        "spec": ds.spec.to_dict(),
        "n": n,
        "length": L,
        "dim": d,
        "label_rule": ds.label_rule,
        "label_index": label_index(L),
        "digest": ds.digest(),
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    header = [f"x_{t}_{c}" for t in range(L) for c in range(d)] + ["label"]
    with open(out / "data.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row, y in zip(ds.inputs.reshape(n, L * d), ds.labels):
            w.writerow([repr(float(v)) for v in row] + [repr(float(y))])
    return out


def load_dataset(path) -> SequenceDataset:
    path = Path(path)
    meta = json.loads((path / "meta.json").read_text())
    raw = np.loadtxt(path / "data.csv", delimiter=",", skiprows=1, ndmin=2)
    n, L, d = meta["n"], meta["length"], meta["dim"]
    inputs = raw[:, :-1].reshape(n, L, d)
    return SequenceDataset(inputs, raw[:, -1].copy(), ProcessSpec(**meta["spec"]), meta["label_rule"])
