"""Sparse idf-weighted BOW encoding, inverted-file construction, and retrieval.

Each image becomes a unit-norm sparse vector over visual words; retrieval
scores are cosine similarities accumulated through per-word posting lists,
so only images sharing at least one word with the query are ranked.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import EmptyImageError, FeatureFileError, ValidationError
from .features import LocalFeature
from .vocab import Vocabulary, quantize_batch

logger = logging.getLogger(__name__)

_MAGIC = b"ELIX"
_VERSION = 1


@dataclass(frozen=True)
class IdfTable:
    """Per-word inverse document frequency weights over an indexed corpus."""

    weights: np.ndarray  # shape (K,), float64, >= 0
    doc_count: int

    def __post_init__(self):
        weights = np.asarray(self.weights, dtype=np.float64)
        if weights.ndim != 1:
            raise ValidationError("idf weights must be a 1-D vector")
        if np.any(weights < 0):
            raise ValidationError("idf weights must be non-negative")
        object.__setattr__(self, "weights", weights)

    @property
    def word_count(self) -> int:
        return self.weights.shape[0]


def compute_idf(word_document_counts: np.ndarray, doc_count: int) -> IdfTable:
    """idf(w) = ln(doc_count / n_w); unseen words get the smoothed ceiling ln(doc_count + 1)."""
    counts = np.asarray(word_document_counts, dtype=np.int64)
    if doc_count < 1:
        raise ValidationError(f"doc_count must be >= 1, got {doc_count}")
    if np.any(counts < 0) or np.any(counts > doc_count):
        raise ValidationError("word document counts must lie in [0, doc_count]")
    weights = np.full(counts.shape, math.log(doc_count + 1), dtype=np.float64)
    seen = counts >= 1
    weights[seen] = np.log(doc_count / counts[seen])
    return IdfTable(weights=weights, doc_count=doc_count)


@dataclass(frozen=True)
class BowVector:
    """Sparse unit-norm vector over visual words, sorted by word id."""

    word_ids: np.ndarray  # int64, strictly increasing
    weights: np.ndarray  # float64, > 0

    def __post_init__(self):
        word_ids = np.asarray(self.word_ids, dtype=np.int64)
        weights = np.asarray(self.weights, dtype=np.float64)
        if word_ids.shape != weights.shape or word_ids.ndim != 1:
            raise ValidationError("word_ids and weights must be 1-D and equal length")
        if word_ids.size and np.any(np.diff(word_ids) <= 0):
            raise ValidationError("word ids must be strictly increasing")
        if np.any(weights <= 0):
            raise ValidationError("sparse weights must be positive")
        object.__setattr__(self, "word_ids", word_ids)
        object.__setattr__(self, "weights", weights)

    @property
    def is_empty(self) -> bool:
        return self.word_ids.size == 0

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.weights))

    def to_dense(self, word_count: int) -> np.ndarray:
        dense = np.zeros(word_count, dtype=np.float64)
        dense[self.word_ids] = self.weights
        return dense


def encode_bow(
    features: list[LocalFeature],
    vocabulary: Vocabulary,
    idf: IdfTable | None = None,
) -> BowVector:
    """Quantize features, weight the word histogram by idf, and L2-normalize.

    Words with idf 0 are dropped from the sparse form; if every occupied word
    has idf 0 the result is the (degenerate) empty vector. With idf=None the
    raw histogram is normalized unweighted -- the form build_index expects,
    since it re-applies its own idf (L2 normalization makes the two-step
    weighting exact).
    """
    if not features:
        raise EmptyImageError("cannot encode an image with no features")
    descriptors = np.stack([f.descriptor for f in features]).astype(np.float64)
    words = quantize_batch(vocabulary, descriptors)
    word_ids, counts = np.unique(words, return_counts=True)
    if idf is None:
        weights = counts.astype(np.float64)
    else:
        if idf.word_count != vocabulary.word_count:
            raise ValidationError(
                f"idf table has {idf.word_count} words, vocabulary has {vocabulary.word_count}"
            )
        weights = counts * idf.weights[word_ids]
        keep = weights > 0
        word_ids, weights = word_ids[keep], weights[keep]
    if word_ids.size == 0:
        return BowVector(word_ids=np.zeros(0, dtype=np.int64), weights=np.zeros(0))
    return BowVector(word_ids=word_ids, weights=weights / np.linalg.norm(weights))


@dataclass(frozen=True)
class RankedList:
    """Retrieval result: (image id, cosine similarity) in non-increasing order."""

    query_id: str
    items: list[tuple[str, float]]

    def ids(self) -> list[str]:
        return [image_id for image_id, _ in self.items]


class InvertedIndex:
    """Immutable posting-list index over idf-weighted unit BOW vectors."""

    def __init__(
        self,
        word_count: int,
        image_ids: list[str],
        elevations: np.ndarray,
        idf: IdfTable,
        postings: list[list[tuple[int, float]]],
    ):
        self.word_count = word_count
        self.image_ids = list(image_ids)
        self.elevations = np.asarray(elevations, dtype=np.float64)
        self.idf = idf
        self.postings = postings
        self._ordinal = {image_id: i for i, image_id in enumerate(image_ids)}

    @property
    def image_count(self) -> int:
        return len(self.image_ids)

    def elevation_of(self, image_id: str) -> float:
        return float(self.elevations[self._ordinal[image_id]])


def build_index(
    images: list[tuple[str, BowVector, float]],
    word_count: int,
    idf: IdfTable | None = None,
) -> InvertedIndex:
    """Build an inverted index from (id, unit-histogram vector, elevation) triples.

    Document frequencies are taken from the vectors' sparsity patterns and
    the idf is recomputed from this corpus unless an explicit table is given
    (useful to freeze weights across incremental corpora); each vector is
    re-weighted by that idf and renormalized.
    """
    seen: set[str] = set()
    for image_id, _, elevation in images:
        if image_id in seen:
            raise ValidationError(f"image {image_id!r} indexed twice")
        seen.add(image_id)
        if elevation is None or not math.isfinite(elevation):
            raise ValidationError(f"image {image_id!r} has no finite elevation")

    doc_counts = np.zeros(word_count, dtype=np.int64)
    for _, vector, _ in images:
        if vector.word_ids.size and vector.word_ids[-1] >= word_count:
            raise ValidationError(f"word id {int(vector.word_ids[-1])} outside vocabulary of {word_count}")
        doc_counts[vector.word_ids] += 1
    if idf is None:
        idf = compute_idf(doc_counts, max(len(images), 1))
    elif idf.word_count != word_count:
        raise ValidationError(f"idf table has {idf.word_count} words, expected {word_count}")

    postings: list[list[tuple[int, float]]] = [[] for _ in range(word_count)]
    image_ids: list[str] = []
    elevations = np.zeros(len(images), dtype=np.float64)
    degenerate = 0
    for ordinal, (image_id, vector, elevation) in enumerate(images):
        image_ids.append(image_id)
        elevations[ordinal] = elevation
        weights = vector.weights * idf.weights[vector.word_ids]
        keep = weights > 0
        word_ids, weights = vector.word_ids[keep], weights[keep]
        norm = np.linalg.norm(weights)
        if norm == 0:
            degenerate += 1
            continue
        weights = weights / norm
        for word_id, weight in zip(word_ids.tolist(), weights.tolist()):
            postings[word_id].append((ordinal, weight))
    if degenerate:
        logger.warning("build_index: %d image(s) became empty after idf weighting", degenerate)
    return InvertedIndex(
        word_count=word_count,
        image_ids=image_ids,
        elevations=elevations,
        idf=idf,
        postings=postings,
    )


def query(index: InvertedIndex, q: BowVector, top_n: int, query_id: str = "") -> RankedList:
    """Rank indexed images sharing at least one word with the query by cosine.

    Ties break lexicographically on image id; scores are clamped to [0, 1]
    against floating-point overshoot on self-matches.
    """
    if top_n < 1:
        raise ValidationError(f"top_n must be >= 1, got {top_n}")
    scores: dict[int, float] = {}
    for word_id, q_weight in zip(q.word_ids.tolist(), q.weights.tolist()):
        if word_id >= index.word_count:
            raise ValidationError(f"query word id {word_id} outside vocabulary of {index.word_count}")
        for ordinal, weight in index.postings[word_id]:
            scores[ordinal] = scores.get(ordinal, 0.0) + q_weight * weight
    ranked = sorted(
        ((index.image_ids[ordinal], min(1.0, score)) for ordinal, score in scores.items()),
        key=lambda item: (-item[1], item[0]),
    )
    return RankedList(query_id=query_id, items=ranked[:top_n])


# ---------------------------------------------------------------------------
# Index file I/O
# ---------------------------------------------------------------------------


def save_index(path: str | Path, index: InvertedIndex) -> None:
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<III", _VERSION, index.word_count, index.image_count))
        fh.write(index.idf.weights.astype("<f4").tobytes())
        for image_id, elevation in zip(index.image_ids, index.elevations):
            encoded = image_id.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<f", elevation))
        for posting in index.postings:
            fh.write(struct.pack("<I", len(posting)))
            for ordinal, weight in posting:
                fh.write(struct.pack("<If", ordinal, weight))


def load_index(path: str | Path) -> InvertedIndex:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 4 or data[:4] != _MAGIC:
        raise FeatureFileError(f"{path}: bad magic, not an index file")
    version, word_count, image_count = struct.unpack_from("<III", data, 4)
    if version != _VERSION:
        raise FeatureFileError(f"{path}: unsupported version {version}")
    offset = 16
    idf_weights = np.frombuffer(data, dtype="<f4", count=word_count, offset=offset).astype(np.float64)
    offset += 4 * word_count
    image_ids: list[str] = []
    elevations = np.zeros(image_count, dtype=np.float64)
    try:
        for i in range(image_count):
            (id_len,) = struct.unpack_from("<H", data, offset)
            offset += 2
            image_ids.append(data[offset : offset + id_len].decode("utf-8"))
            offset += id_len
            (elevations[i],) = struct.unpack_from("<f", data, offset)
            offset += 4
        postings: list[list[tuple[int, float]]] = []
        for _ in range(word_count):
            (length,) = struct.unpack_from("<I", data, offset)
            offset += 4
            entries = []
            for _ in range(length):
                ordinal, weight = struct.unpack_from("<If", data, offset)
                offset += 8
                entries.append((ordinal, float(weight)))
            postings.append(entries)
    except struct.error as exc:
        raise FeatureFileError(f"{path}: truncated index file") from exc
    if offset != len(data):
        raise FeatureFileError(f"{path}: {len(data) - offset} trailing bytes")
    idf = IdfTable(weights=idf_weights, doc_count=image_count)
    return InvertedIndex(
        word_count=word_count,
        image_ids=image_ids,
        elevations=elevations,
        idf=idf,
        postings=postings,
    )
