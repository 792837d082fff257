"""Spatial verification of retrieved images and shortlist re-ranking.

Word-matched features between a query and a database image propose
similarity transforms (one hypothesis per correspondence, read directly off
the feature geometries); the hypothesis explaining the most correspondences
wins. Enumeration is exhaustive and ordered, so results are deterministic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ValidationError
from .features import LocalFeature

#: Cross-pair cap per word, bounding the O(n^2) blowup on burst words.
MAX_PAIRS_PER_WORD = 5


@dataclass(frozen=True)
class Correspondence:
    """A tentative match: query feature and database feature on one word."""

    query_index: int
    db_index: int
    word_id: int


@dataclass(frozen=True)
class SimilarityTransform:
    """Maps query positions to database positions: p' = scale * R(rotation) * p + t."""

    scale: float
    rotation: float
    tx: float
    ty: float

    def apply(self, xy: np.ndarray) -> np.ndarray:
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        rot = np.array([[c, -s], [s, c]])
        return self.scale * xy @ rot.T + np.array([self.tx, self.ty])


@dataclass(frozen=True)
class VerificationResult:
    inlier_count: int
    transform: SimilarityTransform | None
    verified: bool


@dataclass(frozen=True)
class VerifyParams:
    """Knobs for spatial verification.

    A pair verifies when strictly more than inlier_threshold correspondences
    agree with one transform. reproj_tol is the inlier radius as a fraction
    of the database image diagonal; with no image dimensions on record the
    diagonal is taken from the database features' bounding box.
    """

    inlier_threshold: int = 8
    reproj_tol: float = 0.05
    shortlist: int = 50
    image_diagonal: float | None = None

    def __post_init__(self):
        if self.inlier_threshold < 1:
            raise ValidationError(f"inlier_threshold must be >= 1, got {self.inlier_threshold}")
        if self.reproj_tol <= 0:
            raise ValidationError(f"reproj_tol must be positive, got {self.reproj_tol}")
        if self.shortlist < 1:
            raise ValidationError(f"shortlist must be >= 1, got {self.shortlist}")


def tentative_correspondences(
    query: list[tuple[LocalFeature, int]],
    db: list[tuple[LocalFeature, int]],
) -> list[Correspondence]:
    """All cross pairs of equal-word features, capped per word at 5x5 pairs."""
    by_word_query: dict[int, list[int]] = {}
    for i, (_, word_id) in enumerate(query):
        by_word_query.setdefault(word_id, []).append(i)
    by_word_db: dict[int, list[int]] = {}
    for j, (_, word_id) in enumerate(db):
        by_word_db.setdefault(word_id, []).append(j)
    out: list[Correspondence] = []
    for word_id in sorted(by_word_query.keys() & by_word_db.keys()):
        for qi in by_word_query[word_id][:MAX_PAIRS_PER_WORD]:
            for dj in by_word_db[word_id][:MAX_PAIRS_PER_WORD]:
                out.append(Correspondence(query_index=qi, db_index=dj, word_id=word_id))
    return out


def _bbox_diagonal(features: list[LocalFeature]) -> float:
    xs = [f.x for f in features]
    ys = [f.y for f in features]
    diag = math.hypot(max(xs) - min(xs), max(ys) - min(ys))
    return max(diag, 1.0)


def _hypothesis(qf: LocalFeature, df: LocalFeature) -> SimilarityTransform:
    scale = df.scale / qf.scale
    rotation = df.orientation - qf.orientation
    c, s = math.cos(rotation), math.sin(rotation)
    tx = df.x - scale * (c * qf.x - s * qf.y)
    ty = df.y - scale * (s * qf.x + c * qf.y)
    return SimilarityTransform(scale=scale, rotation=rotation, tx=tx, ty=ty)


def verify(
    correspondences: list[Correspondence],
    query_features: list[LocalFeature],
    db_features: list[LocalFeature],
    params: VerifyParams,
) -> VerificationResult:
    """Count the largest set of correspondences consistent with one transform.

    Each correspondence proposes the similarity transform mapping its query
    feature frame onto its database feature frame; hypotheses are scored in
    correspondence order and replaced only on strict improvement.
    """
    if not correspondences:
        return VerificationResult(inlier_count=0, transform=None, verified=False)
    q_xy = np.array([(query_features[c.query_index].x, query_features[c.query_index].y) for c in correspondences])
    d_xy = np.array([(db_features[c.db_index].x, db_features[c.db_index].y) for c in correspondences])
    diagonal = params.image_diagonal if params.image_diagonal is not None else _bbox_diagonal(db_features)
    tol = params.reproj_tol * diagonal

    best_count = 0
    best_transform: SimilarityTransform | None = None
    for corr in correspondences:
        transform = _hypothesis(query_features[corr.query_index], db_features[corr.db_index])
        residual = np.linalg.norm(transform.apply(q_xy) - d_xy, axis=1)
        inliers = int(np.count_nonzero(residual <= tol))
        if inliers > best_count:
            best_count = inliers
            best_transform = transform
    return VerificationResult(
        inlier_count=best_count,
        transform=best_transform,
        verified=best_count > params.inlier_threshold,
    )


def rerank(
    ranked: list[tuple[str, float]],
    query_words: list[tuple[LocalFeature, int]],
    db_words_of: Callable[[str], list[tuple[LocalFeature, int]]],
    params: VerifyParams,
) -> list[tuple[str, float, VerificationResult | None]]:
    """Verify the top of a ranked list and move verified images to the front.

    Verified images are ordered by decreasing inlier count (stable on ties);
    unverified and unexamined images follow in their original similarity
    order. db_words_of maps an image id to its (feature, word id) list.
    """
    query_features = [feat for feat, _ in query_words]
    results: list[tuple[str, float, VerificationResult | None]] = []
    for rank, (image_id, score) in enumerate(ranked):
        if rank < params.shortlist:
            db_words = db_words_of(image_id)
            corrs = tentative_correspondences(query_words, db_words)
            outcome = verify(corrs, query_features, [feat for feat, _ in db_words], params)
            results.append((image_id, score, outcome))
        else:
            results.append((image_id, score, None))
    verified = [r for r in results if r[2] is not None and r[2].verified]
    rest = [r for r in results if r[2] is None or not r[2].verified]
    verified.sort(key=lambda r: -r[2].inlier_count)
    return verified + rest
