"""Multi-vocabulary short-vector embedding and nearest-neighbor search.

Several small vocabularies -- built over different measurement regions and
power-law normalizations -- each produce an idf-weighted unit BOW block.
The concatenated blocks are centered and projected onto their principal
components, yielding a compact unit-norm descriptor per image.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FeatureFileError, ValidationError
from .features import (
    POWER_LAW_BETAS,
    REGION_MULTIPLIERS,
    FeatureSet,
    NormalizationConfig,
    normalized_descriptor_matrix,
)
from .bowindex import IdfTable, compute_idf
from .vocab import Vocabulary, train_kmeans, quantize_batch

logger = logging.getLogger(__name__)

_MAGIC = b"ELMV"
_VERSION = 1

#: Default output dimensionality of the reduced descriptor.
DEFAULT_SHORT_VECTOR_DIMS = 128


@dataclass(frozen=True)
class VocabBankConfig:
    """The (region multiplier, power-law beta) pairs backing the vocabulary bank."""

    pairs: tuple[tuple[float, float], ...]
    words_per_vocab: int = 8192

    def __post_init__(self):
        if len(set(self.pairs)) != len(self.pairs):
            raise ValidationError("vocabulary bank pairs must be distinct")
        if not self.pairs:
            raise ValidationError("vocabulary bank needs at least one (multiplier, beta) pair")
        if self.words_per_vocab < 1:
            raise ValidationError(f"words_per_vocab must be >= 1, got {self.words_per_vocab}")

    @property
    def vocab_count(self) -> int:
        return len(self.pairs)


def default_bank(words_per_vocab: int = 8192) -> VocabBankConfig:
    """The standard eight-vocabulary bank: two region sizes x four power laws."""
    pairs = tuple((m, b) for m in REGION_MULTIPLIERS for b in POWER_LAW_BETAS)
    return VocabBankConfig(pairs=pairs, words_per_vocab=words_per_vocab)


@dataclass(frozen=True)
class ShortVector:
    """Unit-norm reduced descriptor of one image."""

    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        norm = np.linalg.norm(values)
        if not np.isfinite(norm) or abs(norm - 1.0) > 1e-6:
            raise ValidationError(f"short vector must have unit norm, got {norm}")
        object.__setattr__(self, "values", values)


class ShortVectorModel:
    """Trained embedding: vocabulary bank, per-vocabulary idf, mean, projection.

    component_scale, when set, rescales the projected components (whitening);
    the projection itself always keeps orthonormal rows.
    """

    def __init__(
        self,
        config: VocabBankConfig,
        vocabularies: list[Vocabulary],
        idf_tables: list[IdfTable],
        mean: np.ndarray,
        projection: np.ndarray,
        component_scale: np.ndarray | None = None,
    ):
        if len(vocabularies) != config.vocab_count or len(idf_tables) != config.vocab_count:
            raise ValidationError("model needs one vocabulary and one idf table per bank pair")
        self.config = config
        self.vocabularies = vocabularies
        self.idf_tables = idf_tables
        self.mean = np.asarray(mean, dtype=np.float64)
        self.projection = np.asarray(projection, dtype=np.float64)
        self.component_scale = None if component_scale is None else np.asarray(component_scale, np.float64)
        gram = self.projection @ self.projection.T
        if np.abs(gram - np.eye(self.projection.shape[0])).max() > 1e-6:
            raise ValidationError("projection rows must be orthonormal")

    @property
    def output_dims(self) -> int:
        return self.projection.shape[0]

    @property
    def concat_dims(self) -> int:
        return self.projection.shape[1]


# ---------------------------------------------------------------------------
# Encoding
# ---------------------------------------------------------------------------


def _block_encode(
    feature_set: FeatureSet,
    multiplier: float,
    beta: float,
    vocabulary: Vocabulary,
    idf: IdfTable | None,
) -> np.ndarray:
    """One vocabulary's dense unit BOW block for one image."""
    features = feature_set.variant(multiplier)
    block = np.zeros(vocabulary.word_count, dtype=np.float64)
    if not features:
        return block
    descriptors = normalized_descriptor_matrix(features, NormalizationConfig(beta=beta))
    words = quantize_batch(vocabulary, descriptors)
    np.add.at(block, words, 1.0)
    if idf is not None:
        block *= idf.weights
    norm = np.linalg.norm(block)
    if norm > 0:
        block /= norm
    return block


def concat_encode(model: ShortVectorModel, feature_set: FeatureSet) -> np.ndarray:
    """Concatenated per-vocabulary blocks (the pre-projection representation)."""
    blocks = [
        _block_encode(feature_set, multiplier, beta, vocabulary, idf)
        for (multiplier, beta), vocabulary, idf in zip(
            model.config.pairs, model.vocabularies, model.idf_tables
        )
    ]
    return np.concatenate(blocks)


def embed(model: ShortVectorModel, feature_set: FeatureSet) -> ShortVector:
    """Project an image's concatenated encoding into the reduced space."""
    concat = concat_encode(model, feature_set)
    reduced = model.projection @ (concat - model.mean)
    if model.component_scale is not None:
        reduced = reduced * model.component_scale
    norm = np.linalg.norm(reduced)
    if norm == 0:
        raise ValidationError(f"image {feature_set.image_id!r} embeds to the zero vector")
    return ShortVector(values=reduced / norm)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def fit_projection(data: np.ndarray, dims: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Principal-component projection of row-vector data.

    Returns (mean, projection, variances): projection rows are the top
    principal directions (orthonormal; deterministic sign convention), and
    variances are the per-component sample variances they capture.
    """
    data = np.asarray(data, dtype=np.float64)
    n = data.shape[0]
    if n < dims:
        raise ValidationError(f"need at least dims={dims} samples, got {n}")
    mean = data.mean(axis=0)
    centered = data - mean
    _, singular, vt = np.linalg.svd(centered, full_matrices=False)
    if vt.shape[0] < dims:
        raise ValidationError(f"dims={dims} exceeds the data dimensionality {vt.shape[0]}")
    projection = vt[:dims].copy()
    # deterministic sign: largest-magnitude component of each row positive
    for row in projection:
        pivot = int(np.argmax(np.abs(row)))
        if row[pivot] < 0:
            row *= -1.0
    variances = (singular[:dims] ** 2) / max(n - 1, 1)
    return mean, projection, variances


def train_reduction(
    corpus: list[FeatureSet],
    config: VocabBankConfig,
    dims: int,
    seed: int,
    whiten: bool = False,
) -> ShortVectorModel:
    """Train the vocabulary bank and the joint reduction on a corpus.

    Per (multiplier, beta) pair: normalize the matching region variant's
    descriptors, train a vocabulary (seed derived per pair), compute its idf
    over the corpus, and encode every image. The concatenated encodings are
    centered and reduced to `dims` principal components.
    """
    if len(corpus) < dims:
        raise ValidationError(f"corpus of {len(corpus)} images is smaller than dims={dims}")
    seeds = np.random.SeedSequence(seed).generate_state(config.vocab_count)
    vocabularies: list[Vocabulary] = []
    idf_tables: list[IdfTable] = []
    all_blocks: list[np.ndarray] = []
    for pair_index, (multiplier, beta) in enumerate(config.pairs):
        norm_cfg = NormalizationConfig(beta=beta)
        per_image = [
            normalized_descriptor_matrix(fs.variant(multiplier), norm_cfg) for fs in corpus
        ]
        stacked = np.concatenate([m for m in per_image if m.size], axis=0)
        vocabulary = train_kmeans(
            stacked,
            k=config.words_per_vocab,
            seed=int(seeds[pair_index]),
            trained_on=f"bank[{pair_index}] m={multiplier} beta={beta}",
        )
        words_per_image = [quantize_batch(vocabulary, m) if m.size else np.zeros(0, np.int64) for m in per_image]
        doc_counts = np.zeros(config.words_per_vocab, dtype=np.int64)
        for words in words_per_image:
            doc_counts[np.unique(words)] += 1
        idf = compute_idf(doc_counts, len(corpus))
        blocks = np.zeros((len(corpus), config.words_per_vocab), dtype=np.float64)
        for row, words in enumerate(words_per_image):
            np.add.at(blocks[row], words, 1.0)
            blocks[row] *= idf.weights
            norm = np.linalg.norm(blocks[row])
            if norm > 0:
                blocks[row] /= norm
        vocabularies.append(vocabulary)
        idf_tables.append(idf)
        all_blocks.append(blocks)
        logger.debug("trained bank vocabulary %d/%d", pair_index + 1, config.vocab_count)
    concatenated = np.concatenate(all_blocks, axis=1)
    mean, projection, _ = fit_projection(concatenated, dims, whiten=whiten)
    return ShortVectorModel(
        config=config,
        vocabularies=vocabularies,
        idf_tables=idf_tables,
        mean=mean,
        projection=projection,
    )


# ---------------------------------------------------------------------------
# Search
# ---------------------------------------------------------------------------


def knn_search(
    database: list[tuple[str, ShortVector, float]],
    q: ShortVector,
    k: int,
) -> list[tuple[str, float, float]]:
    """k nearest database entries by Euclidean distance in the reduced space.

    Returns (id, dissimilarity, elevation), ascending distance with ties
    broken by id; exactly min(k, len(database)) entries.
    """
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    if not database:
        raise ValidationError("knn_search over an empty database")
    matrix = np.stack([vec.values for _, vec, _ in database])
    distances = np.linalg.norm(matrix - q.values, axis=1)
    order = sorted(range(len(database)), key=lambda i: (distances[i], database[i][0]))
    return [(database[i][0], float(distances[i]), float(database[i][2])) for i in order[:k]]


# ---------------------------------------------------------------------------
# Model file I/O
# ---------------------------------------------------------------------------


def save_model(path: str | Path, model: ShortVectorModel) -> None:
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, model.config.vocab_count))
        for (multiplier, beta), vocabulary, idf in zip(
            model.config.pairs, model.vocabularies, model.idf_tables
        ):
            tag = vocabulary.trained_on.encode("utf-8")
            fh.write(struct.pack("<II", vocabulary.word_count, vocabulary.dim))
            fh.write(vocabulary.centroids.astype("<f4").tobytes())
            fh.write(struct.pack("<H", len(tag)))
            fh.write(tag)
            fh.write(struct.pack("<I", idf.doc_count))
            fh.write(idf.weights.astype("<f4").tobytes())
            fh.write(struct.pack("<ff", multiplier, beta))
        fh.write(struct.pack("<II", model.output_dims, model.concat_dims))
        fh.write(model.mean.astype("<f4").tobytes())
        fh.write(model.projection.astype("<f4").tobytes())


def load_model(path: str | Path) -> ShortVectorModel:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 4 or data[:4] != _MAGIC:
        raise FeatureFileError(f"{path}: bad magic, not a short-vector model file")
    version, vocab_count = struct.unpack_from("<II", data, 4)
    if version != _VERSION:
        raise FeatureFileError(f"{path}: unsupported version {version}")
    offset = 12
    pairs: list[tuple[float, float]] = []
    vocabularies: list[Vocabulary] = []
    idf_tables: list[IdfTable] = []
    words_per_vocab = 0
    try:
        for _ in range(vocab_count):
            k, dim = struct.unpack_from("<II", data, offset)
            offset += 8
            centroids = np.frombuffer(data, dtype="<f4", count=k * dim, offset=offset).reshape(k, dim)
            offset += 4 * k * dim
            (tag_len,) = struct.unpack_from("<H", data, offset)
            offset += 2
            tag = data[offset : offset + tag_len].decode("utf-8")
            offset += tag_len
            (doc_count,) = struct.unpack_from("<I", data, offset)
            offset += 4
            idf_weights = np.frombuffer(data, dtype="<f4", count=k, offset=offset).astype(np.float64)
            offset += 4 * k
            multiplier, beta = struct.unpack_from("<ff", data, offset)
            offset += 8
            words_per_vocab = k
            pairs.append((round(float(multiplier), 6), round(float(beta), 6)))
            vocabularies.append(Vocabulary(centroids=centroids.astype(np.float64), trained_on=tag))
            idf_tables.append(IdfTable(weights=idf_weights, doc_count=doc_count))
        output_dims, concat_dims = struct.unpack_from("<II", data, offset)
        offset += 8
        mean = np.frombuffer(data, dtype="<f4", count=concat_dims, offset=offset).astype(np.float64)
        offset += 4 * concat_dims
        projection = np.frombuffer(
            data, dtype="<f4", count=output_dims * concat_dims, offset=offset
        ).astype(np.float64).reshape(output_dims, concat_dims)
        offset += 4 * output_dims * concat_dims
    except (struct.error, ValueError) as exc:
        raise FeatureFileError(f"{path}: truncated model file") from exc
    if offset != len(data):
        raise FeatureFileError(f"{path}: {len(data) - offset} trailing bytes")
    config = VocabBankConfig(pairs=tuple(pairs), words_per_vocab=words_per_vocab)
    # f32 storage perturbs orthonormality; re-orthonormalize the rows.
    q, _ = np.linalg.qr(projection.T)
    projection = q.T * np.sign(np.sum(q.T * projection, axis=1))[:, None]
    return ShortVectorModel(
        config=config,
        vocabularies=vocabularies,
        idf_tables=idf_tables,
        mean=mean,
        projection=projection,
    )
