"""Visual-vocabulary training and descriptor-to-word quantization.

The vocabulary is a set of K centroids in descriptor space trained with
Lloyd's algorithm from a seeded k-means++ initialization. Assignment is
exact (brute force); an approximate path would be needed at production
vocabulary sizes but desk-scale corpora do not require one.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FeatureFileError, ValidationError

logger = logging.getLogger(__name__)

#: Production-scale presets; desk-scale runs use far smaller vocabularies.
FULL_SCALE_BOW_WORDS = 1_000_000
FULL_SCALE_MVOCAB_WORDS = 8_192

_MAGIC = b"ELVC"
_VERSION = 1


@dataclass(frozen=True)
class Vocabulary:
    """K centroid descriptors defining the visual words."""

    centroids: np.ndarray  # shape (K, d), float64
    trained_on: str = ""

    def __post_init__(self):
        centroids = np.asarray(self.centroids, dtype=np.float64)
        if centroids.ndim != 2 or centroids.shape[0] < 1:
            raise ValidationError(f"centroids must be a (K, d) matrix with K >= 1, got {centroids.shape}")
        object.__setattr__(self, "centroids", centroids)

    @property
    def word_count(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]


def _squared_distances(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Pairwise squared Euclidean distances, shape (n_points, n_centroids)."""
    # |x - c|^2 = |x|^2 - 2 x.c + |c|^2; clip tiny negatives from cancellation
    d2 = (
        np.sum(points**2, axis=1)[:, None]
        - 2.0 * points @ centroids.T
        + np.sum(centroids**2, axis=1)[None, :]
    )
    return np.maximum(d2, 0.0)


def kmeans_plusplus_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Seeded k-means++ seeding.

    Protocol (mirrored by oracle tests): the first centroid is the point at
    index rng.integers(n); each following centroid is drawn with probability
    proportional to the squared distance to the nearest already-chosen
    centroid (uniformly if all distances vanish).
    """
    n = points.shape[0]
    chosen = [int(rng.integers(n))]
    min_d2 = _squared_distances(points, points[chosen[-1]][None, :])[:, 0]
    while len(chosen) < k:
        total = min_d2.sum()
        if total > 0:
            idx = int(rng.choice(n, p=min_d2 / total))
        else:
            idx = int(rng.integers(n))
        chosen.append(idx)
        min_d2 = np.minimum(min_d2, _squared_distances(points, points[idx][None, :])[:, 0])
    return points[chosen].copy()


def train_kmeans(
    descriptors: np.ndarray,
    k: int,
    seed: int,
    max_iter: int = 100,
    tol: float = 1e-6,
    trained_on: str = "",
) -> Vocabulary:
    """Cluster descriptors into k visual words (Lloyd iterations).

    Stops once the largest centroid movement drops below tol or after
    max_iter iterations. A cluster that loses all members is re-seeded to
    the point farthest from its current centroid.
    """
    points = np.asarray(descriptors, dtype=np.float64)
    if points.ndim != 2:
        raise ValidationError(f"descriptors must be an (n, d) matrix, got shape {points.shape}")
    n = points.shape[0]
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    if n < k:
        raise ValidationError(f"need at least k={k} descriptors, got {n}")

    rng = np.random.default_rng(seed)
    centroids = kmeans_plusplus_init(points, k, rng)
    for iteration in range(max_iter):
        assignments = np.argmin(_squared_distances(points, centroids), axis=1)
        new_centroids = centroids.copy()
        for j in range(k):
            members = points[assignments == j]
            if len(members):
                new_centroids[j] = members.mean(axis=0)
            else:
                far = int(np.argmax(_squared_distances(points, centroids[j][None, :])[:, 0]))
                new_centroids[j] = points[far]
                logger.debug("k-means: re-seeded empty cluster %d to point %d", j, far)
        movement = float(np.sqrt(np.sum((new_centroids - centroids) ** 2, axis=1)).max())
        centroids = new_centroids
        if movement < tol:
            break
    return Vocabulary(centroids=centroids, trained_on=trained_on)


def kmeans_objective(vocabulary: Vocabulary, descriptors: np.ndarray) -> float:
    """Sum of squared distances from each descriptor to its nearest word."""
    points = np.asarray(descriptors, dtype=np.float64)
    return float(_squared_distances(points, vocabulary.centroids).min(axis=1).sum())


def quantize(vocabulary: Vocabulary, descriptor: np.ndarray) -> int:
    """Nearest visual word of one descriptor; ties break to the lowest id."""
    v = np.asarray(descriptor, dtype=np.float64)
    if v.shape != (vocabulary.dim,):
        raise ValidationError(f"descriptor has dim {v.shape}, vocabulary expects ({vocabulary.dim},)")
    return int(np.argmin(_squared_distances(v[None, :], vocabulary.centroids)[0]))


def quantize_batch(vocabulary: Vocabulary, descriptors: np.ndarray) -> np.ndarray:
    """Vectorized quantize over an (n, d) matrix; same tie-break rule."""
    points = np.asarray(descriptors, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != vocabulary.dim:
        raise ValidationError(f"descriptor matrix has shape {points.shape}, expected (n, {vocabulary.dim})")
    if points.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    return np.argmin(_squared_distances(points, vocabulary.centroids), axis=1)


# ---------------------------------------------------------------------------
# Vocabulary file I/O
# ---------------------------------------------------------------------------


def save_vocabulary(path: str | Path, vocabulary: Vocabulary) -> None:
    tag = vocabulary.trained_on.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<III", _VERSION, vocabulary.word_count, vocabulary.dim))
        fh.write(vocabulary.centroids.astype("<f4").tobytes())
        fh.write(struct.pack("<H", len(tag)))
        fh.write(tag)


def load_vocabulary(path: str | Path) -> Vocabulary:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 4 or data[:4] != _MAGIC:
        raise FeatureFileError(f"{path}: bad magic, not a vocabulary file")
    if len(data) < 16:
        raise FeatureFileError(f"{path}: truncated header")
    version, k, dim = struct.unpack_from("<III", data, 4)
    if version != _VERSION:
        raise FeatureFileError(f"{path}: unsupported version {version}")
    offset = 16
    end = offset + 4 * k * dim
    if end + 2 > len(data):
        raise FeatureFileError(f"{path}: truncated centroid block")
    centroids = np.frombuffer(data, dtype="<f4", count=k * dim, offset=offset).reshape(k, dim)
    (tag_len,) = struct.unpack_from("<H", data, end)
    tag = data[end + 2 : end + 2 + tag_len].decode("utf-8")
    return Vocabulary(centroids=centroids.astype(np.float64), trained_on=tag)
