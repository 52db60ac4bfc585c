"""Synthetic long-tailed Gaussian-mixture datasets.

Generates class-conditional isotropic Gaussian samples under a long-tail
count profile, computes class statistics (empirical prior, imbalance
factor), builds test-time shifted label distributions, and round-trips
datasets through CSV at full float64 precision.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    CountError,
    DimensionError,
    NormalizationError,
    ParseError,
    ProfileError,
    ShiftError,
)
from .numerics import RngStream, as_matrix, prob_vector

PROFILE_KINDS = ("exponential", "step", "explicit")
SHIFT_DIRECTIONS = ("forward", "backward", "uniform")


@dataclass(frozen=True)
class GaussianMixtureSpec:
    """Ground-truth generative mixture: one isotropic Gaussian per class."""

    means: np.ndarray  # (C, D)
    sigmas: np.ndarray  # (C,) positive isotropic std-devs

    def __post_init__(self):
        means = as_matrix(self.means)
        sigmas = np.asarray(self.sigmas, dtype=np.float64)
        if means.shape[0] < 2:
            raise DimensionError("mixture needs >= 2 classes")
        if sigmas.shape != (means.shape[0],):
            raise DimensionError(
                f"sigmas shape {sigmas.shape} does not match {means.shape[0]} classes"
            )
        if not np.all(np.isfinite(sigmas)) or np.any(sigmas <= 0):
            raise CountError("class sigmas must be finite and positive")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "sigmas", sigmas)

    @property
    def num_classes(self) -> int:
        return self.means.shape[0]

    @property
    def dims(self) -> int:
        return self.means.shape[1]


@dataclass(frozen=True)
class LongTailProfile:
    """Shape of the per-class training counts.

    ``exponential`` decays counts geometrically from ``max_count`` down to
    ``max_count / imbalance_factor``; ``step`` gives the head half of the
    classes ``max_count`` each and the tail half the minimum; ``explicit``
    uses ``counts`` verbatim.
    """

    num_classes: int
    max_count: int = 0
    imbalance_factor: float = 1.0
    kind: str = "exponential"
    counts: tuple[int, ...] = field(default=())

    def __post_init__(self):
        if self.kind not in PROFILE_KINDS:
            raise ProfileError(f"unknown profile kind {self.kind!r}")
        if self.num_classes < 2:
            raise ProfileError(f"need >= 2 classes, got {self.num_classes}")
        if self.kind == "explicit":
            if len(self.counts) != self.num_classes:
                raise ProfileError("explicit profile needs one count per class")
        else:
            if self.max_count < 1:
                raise ProfileError(f"max_count must be >= 1, got {self.max_count}")
            if self.imbalance_factor < 1:
                raise ProfileError(
                    f"imbalance factor must be >= 1, got {self.imbalance_factor}"
                )


def _round_half_even(values: np.ndarray) -> np.ndarray:
    # np.rint rounds half to even, the documented convention here.
    return np.rint(values).astype(np.int64)


def make_longtail_counts(profile: LongTailProfile) -> np.ndarray:
    """Per-class counts for a long-tail profile, head class first.

    Exponential decay: counts[i] = round(max_count * IF**(-i / (C - 1))),
    so counts[0] == max_count and counts[C-1] == round(max_count / IF).
    """
    c = profile.num_classes
    if profile.kind == "explicit":
        counts = np.asarray(profile.counts, dtype=np.int64)
    elif profile.kind == "exponential":
        i = np.arange(c, dtype=np.float64)
        raw = profile.max_count * profile.imbalance_factor ** (-i / (c - 1))
        counts = _round_half_even(raw)
    else:  # step
        head = c - c // 2
        tail_count = _round_half_even(
            np.array([profile.max_count / profile.imbalance_factor])
        )[0]
        counts = np.array([profile.max_count] * head + [tail_count] * (c - head))
    if np.any(counts < 1):
        raise ProfileError(
            f"profile produces a zero count (counts={counts.tolist()}); "
            "reduce the imbalance factor or raise max_count"
        )
    return counts


@dataclass
class LabeledDataset:
    """Feature matrix plus integer labels and per-class counts."""

    features: np.ndarray  # (N, D)
    labels: np.ndarray  # (N,) ints in [0, C)
    counts: np.ndarray  # (C,)

    def __post_init__(self):
        self.features = as_matrix(self.features)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.counts = np.asarray(self.counts, dtype=np.int64)
        n, c = self.features.shape[0], self.counts.shape[0]
        if self.labels.shape != (n,):
            raise DimensionError(f"{n} feature rows but {self.labels.shape} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= c):
            raise CountError(
                f"label {int(self.labels.max())} out of range for {c} classes"
            )
        observed = np.bincount(self.labels, minlength=c)
        if not np.array_equal(observed, self.counts):
            raise CountError(
                f"counts {self.counts.tolist()} inconsistent with labels "
                f"{observed.tolist()}"
            )

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dims(self) -> int:
        return self.features.shape[1]

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]


@dataclass(frozen=True)
class ShiftSpec:
    """Test-time label-distribution shift.

    forward: counts decay with class index (same ordering as training);
    backward: counts grow with class index; uniform: equal counts.
    """

    direction: str
    ratio: float = 1.0

    def __post_init__(self):
        if self.direction not in SHIFT_DIRECTIONS:
            raise ShiftError(f"unknown shift direction {self.direction!r}")
        if self.ratio < 1:
            raise ShiftError(f"shift ratio must be >= 1, got {self.ratio}")
        if self.direction == "uniform" and self.ratio != 1:
            raise ShiftError("uniform shift requires ratio == 1")


def sample_dataset(
    gmm: GaussianMixtureSpec, counts, rng: RngStream
) -> LabeledDataset:
    """Draw counts[i] samples from class i's Gaussian, in seeded random order.

    Deterministic given the stream: the same (seed, stream_id) reproduces the
    dataset bit for bit.
    """
    counts = np.asarray(counts, dtype=np.int64)
    if counts.shape != (gmm.num_classes,):
        raise DimensionError(
            f"{counts.size} counts for {gmm.num_classes} mixture classes"
        )
    if np.any(counts < 1):
        raise CountError(f"every class needs >= 1 sample, got {counts.tolist()}")
    gen = rng.generator()
    blocks = []
    labels = []
    for i, n_i in enumerate(counts):
        x = gmm.means[i] + gmm.sigmas[i] * gen.standard_normal((int(n_i), gmm.dims))
        blocks.append(x)
        labels.append(np.full(int(n_i), i, dtype=np.int64))
    features = np.concatenate(blocks, axis=0)
    labels = np.concatenate(labels)
    perm = gen.permutation(features.shape[0])
    return LabeledDataset(features[perm], labels[perm], counts)


def empirical_prior(counts) -> np.ndarray:
    """Class-frequency prior n_i / sum(n)."""
    counts = np.asarray(counts, dtype=np.int64)
    if np.any(counts < 1):
        raise CountError(f"counts must all be >= 1, got {counts.tolist()}")
    total = counts.sum()
    if total <= 0:
        raise NormalizationError("zero total count")
    return prob_vector(counts / total)


def imbalance_factor(counts) -> float:
    """max(counts) / min(counts)."""
    counts = np.asarray(counts, dtype=np.int64)
    if np.any(counts < 1):
        raise CountError(f"counts must all be >= 1, got {counts.tolist()}")
    return float(counts.max() / counts.min())


def make_shifted_counts(base_counts, shift: ShiftSpec) -> np.ndarray:
    """Redistribute the total of ``base_counts`` under a shifted profile.

    The shifted profile is the exponential long-tail shape at the requested
    ratio, scaled so the total is preserved within rounding; ``backward``
    reverses the class ordering, ``uniform`` splits the total evenly.
    """
    base = np.asarray(base_counts, dtype=np.int64)
    c = base.shape[0]
    if c < 2:
        raise DimensionError("need >= 2 classes to shift")
    total = float(base.sum())
    if shift.direction == "uniform":
        counts = _round_half_even(np.full(c, total / c))
    else:
        i = np.arange(c, dtype=np.float64)
        weights = shift.ratio ** (-i / (c - 1))
        counts = _round_half_even(total * weights / weights.sum())
        if shift.direction == "backward":
            counts = counts[::-1].copy()
    if np.any(counts < 1):
        raise ShiftError(
            f"shift produces a zero count (counts={counts.tolist()}); "
            "lower the ratio or enlarge the base total"
        )
    return counts


def feature_mean(ds: LabeledDataset, label: int | None = None) -> np.ndarray:
    """Mean feature row, optionally restricted to one class."""
    if label is None:
        rows = ds.features
    else:
        rows = ds.features[ds.labels == label]
    if rows.shape[0] == 0:
        raise DimensionError(
            "empty dataset" if label is None else f"no samples with label {label}"
        )
    return rows.mean(axis=0)


def _format_float(x: float) -> str:
    # repr() of a float64 is the shortest decimal that round-trips exactly.
    return repr(float(x))


def save_dataset(ds: LabeledDataset, path) -> None:
    """Write ``f0,...,f{D-1},label`` CSV; lossless float64 round-trip."""
    path = Path(path)
    header = ",".join([f"f{j}" for j in range(ds.dims)] + ["label"])
    lines = [header]
    for row, label in zip(ds.features, ds.labels):
        lines.append(",".join([_format_float(v) for v in row] + [str(int(label))]))
    path.write_text("\n".join(lines) + "\n")


def load_dataset(path, num_classes: int | None = None) -> LabeledDataset:
    """Parse a dataset CSV written by :func:`save_dataset`.

    Raises :class:`ParseError` naming the offending line for malformed rows,
    inconsistent column counts, or labels outside [0, num_classes).
    """
    path = Path(path)
    text = path.read_text()
    lines = text.splitlines()
    if not lines or not lines[0].strip():
        raise ParseError(f"{path}: no header")
    header = lines[0].split(",")
    if header[-1] != "label" or len(header) < 2:
        raise ParseError(f"{path}: line 1: expected header 'f0,...,label'")
    dims = len(header) - 1
    features = []
    labels = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != dims + 1:
            raise ParseError(
                f"{path}: line {lineno}: expected {dims + 1} columns, got {len(parts)}"
            )
        try:
            features.append([float(v) for v in parts[:-1]])
            label = int(parts[-1])
        except ValueError as exc:
            raise ParseError(f"{path}: line {lineno}: {exc}") from exc
        if label < 0 or (num_classes is not None and label >= num_classes):
            raise ParseError(
                f"{path}: line {lineno}: label {label} out of range"
                + (f" [0, {num_classes})" if num_classes is not None else "")
            )
        labels.append(label)
    if not labels:
        raise ParseError(f"{path}: no data rows")
    labels = np.asarray(labels, dtype=np.int64)
    c = num_classes if num_classes is not None else int(labels.max()) + 1
    counts = np.bincount(labels, minlength=c)
    if np.any(counts < 1):
        missing = int(np.argmin(counts))
        raise ParseError(f"{path}: class {missing} has no samples")
    return LabeledDataset(np.asarray(features, dtype=np.float64), labels, counts)


def save_counts(counts, path) -> None:
    """Write the counts JSON sidecar: {"counts": [n0, ...]}."""
    Path(path).write_text(
        json.dumps({"counts": [int(v) for v in np.asarray(counts)]}) + "\n"
    )


def load_counts(path) -> np.ndarray:
    path = Path(path)
    try:
        payload = json.loads(path.read_text())
        counts = np.asarray(payload["counts"], dtype=np.int64)
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"{path}: not a counts file: {exc}") from exc
    if counts.ndim != 1 or counts.size < 2:
        raise ParseError(f"{path}: counts must list >= 2 classes")
    return counts
