"""Synthetic domain-shift datasets, CSV ingestion, and deterministic batching.

Two families: interleaved half-circles whose target domain is rotated about
the origin, and Gaussian blobs on a circle whose target domain is translated
and rescaled.  Labeled target data exists only in the held-out test split;
target training data is unlabeled by construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from gada.autodiff import ContractError
from gada.rngstreams import site_rng

FAMILIES = ("two_moons", "gauss_blobs")


class CsvParseError(ContractError):
    """Malformed CSV input; message carries the 1-based line number."""


@dataclass
class ShiftSpec:
    """Recipe for one source/target pair."""

    family: str = "two_moons"
    angle_deg: float = 30.0          # two_moons: rotation of the target domain
    translate: tuple = (0.0, 0.0)    # gauss_blobs: target translation
    scale: float = 1.0               # gauss_blobs: target rescale about the origin
    noise_sigma: float = 0.15
    n_source: int = 1000
    n_target: int = 1000
    n_test: int = 1000
    K: int = 2                       # gauss_blobs only; two_moons forces 2
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ContractError("unknown dataset family %r" % self.family)
        if min(self.n_source, self.n_target, self.n_test) < 1:
            raise ContractError("split sizes must be positive")
        if self.noise_sigma < 0:
            raise ContractError("noise_sigma must be nonnegative")
        if self.K < 2:
            raise ContractError("need at least two classes")


@dataclass
class DomainShiftDataset:
    """Labeled source, unlabeled target, labeled held-out target test."""

    source_x: np.ndarray
    source_y: np.ndarray
    target_x: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    K: int
    d: int
    provenance: str

    def __post_init__(self):
        for name, y in (("source_y", self.source_y), ("test_y", self.test_y)):
            if y.min() < 1 or y.max() > self.K:
                raise ContractError("%s labels must lie in 1..%d" % (name, self.K))
        if set(np.unique(self.source_y)) != set(range(1, self.K + 1)):
            raise ContractError("every class must appear in source_y")


def _moon_draws(rng, n: int, sigma: float) -> tuple:
    """Raw samples of the centered two-moons law, labels alternating 1/2."""
    t = rng.uniform(0.0, math.pi, n)
    base = np.stack([np.cos(t) - 0.5, np.sin(t) - 0.25], axis=1)
    labels = np.where(np.arange(n) % 2 == 0, 1, 2)
    base[labels == 2] *= -1.0
    return base + sigma * rng.standard_normal((n, 2)), labels


def rotation_matrix(angle_deg: float) -> np.ndarray:
    a = math.radians(angle_deg)
    return np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])


def gen_two_moons_shift(spec: ShiftSpec) -> DomainShiftDataset:
    """Source moons plus target/test moons rotated about the origin.

    Target points are source-law draws times the rotation matrix, so the
    angle-0 dataset shares the law (not the draws) of its source split.
    """
    if spec.family != "two_moons":
        raise ContractError("spec family is %r, not two_moons" % spec.family)
    R = rotation_matrix(spec.angle_deg)
    src_x, src_y = _moon_draws(site_rng(spec.seed, "data.source"), spec.n_source,
                               spec.noise_sigma)
    tgt_x, _ = _moon_draws(site_rng(spec.seed, "data.target"), spec.n_target,
                           spec.noise_sigma)
    tst_x, tst_y = _moon_draws(site_rng(spec.seed, "data.test"), spec.n_test,
                               spec.noise_sigma)
    return DomainShiftDataset(
        source_x=src_x, source_y=src_y,
        target_x=tgt_x @ R.T,
        test_x=tst_x @ R.T, test_y=tst_y,
        K=2, d=2,
        provenance="two_moons(angle=%g,sigma=%g,seed=%d)"
                   % (spec.angle_deg, spec.noise_sigma, spec.seed))


def _blob_means(K: int, sigma: float) -> np.ndarray:
    # Radius keeps every pair of means at least 6 sigma apart (adjacent pair
    # is the closest); the 1.01 factor absorbs float rounding at the bound.
    radius = max(1.0, 1.01 * 3.0 * sigma / math.sin(math.pi / K))
    angles = 2.0 * math.pi * np.arange(K) / K
    return radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def _blob_draws(rng, n: int, K: int, sigma: float, means: np.ndarray) -> tuple:
    labels = (np.arange(n) % K) + 1
    pts = means[labels - 1] + sigma * rng.standard_normal((n, 2))
    return pts, labels


def gen_blobs_shift(spec: ShiftSpec) -> DomainShiftDataset:
    """K isotropic Gaussians on a circle; target translated and rescaled."""
    if spec.family != "gauss_blobs":
        raise ContractError("spec family is %r, not gauss_blobs" % spec.family)
    means = _blob_means(spec.K, spec.noise_sigma)
    shift = np.asarray(spec.translate, dtype=np.float64)
    src_x, src_y = _blob_draws(site_rng(spec.seed, "data.source"), spec.n_source,
                               spec.K, spec.noise_sigma, means)
    tgt_x, _ = _blob_draws(site_rng(spec.seed, "data.target"), spec.n_target,
                           spec.K, spec.noise_sigma, means)
    tst_x, tst_y = _blob_draws(site_rng(spec.seed, "data.test"), spec.n_test,
                               spec.K, spec.noise_sigma, means)
    return DomainShiftDataset(
        source_x=src_x, source_y=src_y,
        target_x=spec.scale * tgt_x + shift,
        test_x=spec.scale * tst_x + shift, test_y=tst_y,
        K=spec.K, d=2,
        provenance="gauss_blobs(K=%d,translate=%s,scale=%g,sigma=%g,seed=%d)"
                   % (spec.K, tuple(shift), spec.scale, spec.noise_sigma, spec.seed))


def load_csv(path_features, path_labels=None) -> tuple:
    """Parse feature rows (and optional one-integer-per-row labels).

    Returns (features[N,d], labels[N] or None).  Any malformation raises
    CsvParseError naming the offending 1-based line.
    """
    rows = []
    width = None
    with open(path_features, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            cells = line.split(",")
            if width is None:
                width = len(cells)
            elif len(cells) != width:
                raise CsvParseError(
                    "ragged row: expected %d cells, got %d at line %d"
                    % (width, len(cells), lineno))
            try:
                rows.append([float(c) for c in cells])
            except ValueError:
                raise CsvParseError("non-numeric cell at line %d" % lineno)
    if not rows:
        raise CsvParseError("empty dataset: no data rows in %s" % path_features)
    features = np.asarray(rows, dtype=np.float64)
    if path_labels is None:
        return features, None
    labels = []
    with open(path_labels, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                labels.append(int(line))
            except ValueError:
                raise CsvParseError("non-integer label at line %d" % lineno)
    if len(labels) != features.shape[0]:
        raise CsvParseError(
            "label/feature count mismatch: %d labels for %d rows"
            % (len(labels), features.shape[0]))
    return features, np.asarray(labels, dtype=np.int64)


def save_csv(path, arr: np.ndarray) -> None:
    """Write rows in the same format load_csv reads; full float precision."""
    arr = np.atleast_2d(np.asarray(arr))
    as_int = np.issubdtype(arr.dtype, np.integer)
    with open(path, "w", encoding="utf-8") as fh:
        for row in arr:
            if as_int:
                fh.write(",".join(str(int(v)) for v in row))
            else:
                fh.write(",".join(repr(float(v)) for v in row))
            fh.write("\n")


def instance_normalize(x: np.ndarray) -> np.ndarray:
    """Per-sample standardization across features: zero mean, unit-ish scale.

    The 1e-6 inside the root guards constant rows (they map to zeros).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] < 2:
        raise ContractError("instance_normalize expects [B,d] with d >= 2")
    mean = x.mean(axis=1, keepdims=True)
    var = ((x - mean) ** 2).mean(axis=1, keepdims=True)
    return (x - mean) / np.sqrt(var + 1e-6)


def batch_indices(n: int, M: int, seed: int, stream_id: str, step: int) -> np.ndarray:
    """Batch for one step: uniform without replacement within the batch,
    independent across steps; a pure function of all five inputs."""
    if n < M:
        raise ContractError("dataset of %d rows cannot fill batches of %d" % (n, M))
    rng = site_rng(seed, "batch.%s" % stream_id, step)
    return rng.choice(n, size=M, replace=False)


def batch_sampler(n: int, M: int, seed: int, stream_id: str):
    """Infinite iterator over per-step batches; see batch_indices."""
    if n < M:
        raise ContractError("dataset of %d rows cannot fill batches of %d" % (n, M))

    def gen():
        step = 0
        while True:
            yield batch_indices(n, M, seed, stream_id, step)
            step += 1

    return gen()
