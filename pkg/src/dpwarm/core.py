"""Domain types, synthetic data, CSV persistence and seeded randomness."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np


class DatasetFormatError(ValueError):
    """Raised when a dataset file cannot be parsed."""

    def __init__(self, message: str, row: Optional[int] = None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class RngStream:
    """A reproducible, splittable random stream.

    Two streams with equal ``(seed, stream_id, path)`` produce identical draw
    sequences. ``substream`` derives child streams that never collide with
    their parent or siblings, so parallel trials and algorithm stages can each
    own one.
    """

    seed: int
    stream_id: int = 0
    path: tuple = ()

    def __post_init__(self):
        if not (0 <= int(self.seed) < 2**64):
            raise ValueError("seed must be a 64-bit unsigned integer")
        if self.stream_id < 0:
            raise ValueError("stream_id must be nonnegative")

    def substream(self, *keys: int) -> "RngStream":
        return RngStream(self.seed, self.stream_id, self.path + tuple(int(k) for k in keys))

    def generator(self) -> np.random.Generator:
        """Fresh generator positioned at the start of this stream."""
        ss = np.random.SeedSequence(int(self.seed), spawn_key=(int(self.stream_id),) + self.path)
        return np.random.Generator(np.random.PCG64(ss))


@dataclass(frozen=True)
class PrivacyBudget:
    epsilon: float
    delta: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.epsilon) and self.epsilon >= 0):
            raise ValueError(f"epsilon must be finite and >= 0, got {self.epsilon}")
        if not (0 <= self.delta < 1):
            raise ValueError(f"delta must lie in [0, 1), got {self.delta}")

    def __iter__(self):
        yield self.epsilon
        yield self.delta

    def scaled(self, factor: float) -> "PrivacyBudget":
        return PrivacyBudget(self.epsilon * factor, self.delta * factor)


@dataclass(frozen=True)
class LossMetadata:
    """Declared regularity constants of a loss family.

    ``L`` is the per-sample Lipschitz constant, ``beta`` the smoothness
    constant and ``D`` the diameter of the parameter domain. The optional
    fields carry the Hessian-Lipschitz constant, the quasar-convexity
    parameter and the KL* pair ``(gamma, k)``.
    """

    L: float
    beta: float
    D: float
    rho: Optional[float] = None
    q: Optional[float] = None
    gamma_k: Optional[tuple] = None

    def __post_init__(self):
        for name in ("L", "beta", "D"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.q is not None and not (0 < self.q <= 1):
            raise ValueError("q must lie in (0, 1]")
        if self.gamma_k is not None:
            gamma, k = self.gamma_k
            if not (gamma > 0 and 1 <= k <= 2):
                raise ValueError("gamma_k requires gamma > 0 and k in [1, 2]")


@dataclass(frozen=True)
class Dataset:
    samples: np.ndarray
    labels: Optional[np.ndarray] = field(default=None)

    def __post_init__(self):
        x = np.ascontiguousarray(np.asarray(self.samples, dtype=np.float64))
        if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
            raise ValueError(f"samples must be an n x d matrix with n, d >= 1, got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise ValueError("samples contain non-finite values")
        x.setflags(write=False)
        object.__setattr__(self, "samples", x)
        if self.labels is not None:
            y = np.ascontiguousarray(np.asarray(self.labels, dtype=np.float64).reshape(-1))
            if y.shape[0] != x.shape[0]:
                raise ValueError("labels must have one entry per sample")
            if not np.all(np.isfinite(y)):
                raise ValueError("labels contain non-finite values")
            y.setflags(write=False)
            object.__setattr__(self, "labels", y)

    @property
    def n(self) -> int:
        return self.samples.shape[0]

    @property
    def d(self) -> int:
        return self.samples.shape[1]

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows, dtype=np.int64)
        labels = None if self.labels is None else self.labels[rows]
        return Dataset(self.samples[rows], labels)


def sample_unit_ball(d: int, n: int, rng: RngStream) -> Dataset:
    """Draw ``n`` points uniformly from the closed unit ball in R^d.

    Direction is uniform on the sphere (normalised Gaussian); the radius is
    ``U ** (1/d)``.
    """
    if int(d) != d or int(n) != n or d < 1 or n < 1:
        raise ValueError(f"d and n must be positive integers, got d={d}, n={n}")
    gen = rng.generator()
    g = gen.standard_normal((n, d))
    norms = np.linalg.norm(g, axis=1, keepdims=True)
    # a zero Gaussian row has probability zero; guard anyway
    norms[norms == 0] = 1.0
    radius = gen.random((n, 1)) ** (1.0 / d)
    x = g / norms * radius
    return Dataset(x)


def sample_unit_ball_rejection(d: int, n: int, rng: RngStream) -> Dataset:
    """Uniform ball sampling by rejection from the cube; only sensible for small d."""
    if d < 1 or n < 1:
        raise ValueError("d and n must be positive")
    gen = rng.generator()
    out = []
    have = 0
    while have < n:
        cand = gen.uniform(-1.0, 1.0, size=(max(2 * (n - have), 16), d))
        keep = cand[np.sum(cand * cand, axis=1) <= 1.0]
        out.append(keep)
        have += keep.shape[0]
    return Dataset(np.concatenate(out)[:n])


def write_dataset(path, data: Dataset) -> None:
    """Write a dataset as CSV with a ``# d=<d> labeled=<0|1>`` header."""
    labeled = data.labels is not None
    rows = data.samples if not labeled else np.column_stack([data.samples, data.labels])
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"# d={data.d} labeled={int(labeled)}\n")
        for row in rows:
            # repr gives the shortest string that round-trips exactly
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def read_dataset(path) -> Dataset:
    text = Path(path).read_text(encoding="ascii").splitlines()
    if not text or not text[0].startswith("#"):
        raise DatasetFormatError("missing '# d=<d> labeled=<0|1>' header", row=0)
    header = dict(tok.split("=", 1) for tok in text[0][1:].split() if "=" in tok)
    try:
        d = int(header["d"])
        labeled = int(header.get("labeled", "0")) == 1
    except (KeyError, ValueError):
        raise DatasetFormatError(f"malformed header {text[0]!r}", row=0) from None
    width = d + int(labeled)
    rows = []
    for i, line in enumerate(text[1:], start=1):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != width:
            raise DatasetFormatError(f"expected {width} values, found {len(parts)}", row=i)
        try:
            rows.append([float(p) for p in parts])
        except ValueError:
            raise DatasetFormatError(f"non-numeric value in {line!r}", row=i) from None
    if not rows:
        raise DatasetFormatError("no samples", row=1)
    arr = np.array(rows, dtype=np.float64)
    if labeled:
        return Dataset(arr[:, :d], arr[:, d])
    return Dataset(arr)


def dataset_io(path, mode: str, data: Optional[Dataset] = None):
    """Read or write a dataset file; ``mode`` is ``"read"`` or ``"write"``."""
    if mode == "write":
        if data is None:
            raise ValueError("write mode needs a dataset")
        write_dataset(path, data)
        return None
    if mode == "read":
        return read_dataset(path)
    raise ValueError(f"unknown mode {mode!r}")


def train_test_split(data: Dataset, fraction: float, rng: RngStream):
    """Random disjoint split with ``ceil(fraction * n)`` rows in the first part."""
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie in (0, 1)")
    n_train = math.ceil(fraction * data.n)
    if n_train == 0 or n_train == data.n:
        raise ValueError(f"fraction {fraction} on n={data.n} leaves an empty split")
    perm = rng.generator().permutation(data.n)
    return data.subset(perm[:n_train]), data.subset(perm[n_train:])
