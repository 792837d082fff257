"""Local-feature ingestion and descriptor power-law normalization.

Feature files carry, per image, one geometry (position, scale, orientation)
and one descriptor per measurement-region variant. Descriptors are stored
raw; normalization is applied when a pipeline consumes them.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DegenerateDescriptorError, FeatureFileError, ValidationError

#: Production descriptor dimensionality; desk-scale corpora may use fewer.
DEFAULT_DESCRIPTOR_DIM = 128

#: Standard relative scale change between a detected region and its
#: measurement region.
MEASUREMENT_SCALE_FACTOR = 3.0 * math.sqrt(3.0)

#: Measurement-region multipliers used by the multi-vocabulary pipeline.
REGION_MULTIPLIERS = (1.0, 1.5)

#: Power-law exponents used by the multi-vocabulary pipeline. beta=1 keeps
#: descriptors as-is (up to L2 norm); beta=0.5 is the square-root variant.
POWER_LAW_BETAS = (0.4, 0.5, 0.6, 1.0)

_MAGIC = b"ELFV"
_VERSION = 1


@dataclass(frozen=True)
class LocalFeature:
    """An affine-covariant local feature: geometry plus one descriptor."""

    x: float
    y: float
    scale: float
    orientation: float
    descriptor: np.ndarray

    def __post_init__(self):
        if self.scale <= 0 or not math.isfinite(self.scale):
            raise ValidationError(f"feature scale must be positive, got {self.scale}")
        if not (-math.pi <= self.orientation < math.pi):
            raise ValidationError(f"orientation {self.orientation} outside [-pi, pi)")
        descriptor = np.asarray(self.descriptor, dtype=np.float32)
        if descriptor.ndim != 1 or descriptor.size == 0:
            raise ValidationError("descriptor must be a non-empty 1-D vector")
        object.__setattr__(self, "descriptor", descriptor)


@dataclass(frozen=True)
class RegionScaleConfig:
    """Measurement-region size as a multiple of the detection scale."""

    multiplier: float
    base_factor: float = MEASUREMENT_SCALE_FACTOR

    def region_radius(self, scale: float) -> float:
        return self.multiplier * self.base_factor * scale


@dataclass(frozen=True)
class NormalizationConfig:
    """Power-law exponent applied componentwise before L2 normalization."""

    beta: float

    def __post_init__(self):
        if not (0.0 < self.beta <= 1.0):
            raise ValidationError(f"beta must lie in (0, 1], got {self.beta}")


@dataclass(frozen=True)
class FeatureSet:
    """All measurement-region variants of one image's local features.

    Every variant shares the detection geometry; only descriptors differ.
    """

    image_id: str
    variants: dict[float, list[LocalFeature]]  # keyed by region multiplier

    def __post_init__(self):
        if not self.variants:
            raise ValidationError(f"feature set {self.image_id!r} has no variants")
        reference = None
        for multiplier, feats in self.variants.items():
            geometry = [(f.x, f.y, f.scale, f.orientation) for f in feats]
            if reference is None:
                reference = geometry
            elif geometry != reference:
                raise ValidationError(
                    f"feature set {self.image_id!r}: variant {multiplier} geometry "
                    "differs from the first variant"
                )
        dims = {f.descriptor.size for feats in self.variants.values() for f in feats}
        if len(dims) > 1:
            raise ValidationError(f"feature set {self.image_id!r} mixes descriptor dims {sorted(dims)}")

    def variant(self, multiplier: float) -> list[LocalFeature]:
        try:
            return self.variants[multiplier]
        except KeyError:
            raise ValidationError(
                f"feature set {self.image_id!r} has no region multiplier {multiplier} "
                f"(available: {sorted(self.variants)})"
            ) from None

    @property
    def feature_count(self) -> int:
        return len(next(iter(self.variants.values())))


# ---------------------------------------------------------------------------
# Binary feature file I/O
# ---------------------------------------------------------------------------


def save_features(path: str | Path, feature_set: FeatureSet) -> None:
    """Write a feature set in the little-endian binary feature format."""
    multipliers = sorted(feature_set.variants)
    n_features = feature_set.feature_count
    dim = 0
    if n_features:
        dim = next(iter(feature_set.variants.values()))[0].descriptor.size
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<III", _VERSION, len(multipliers), n_features))
        fh.write(struct.pack("<I", dim))
        for multiplier in multipliers:
            fh.write(struct.pack("<f", multiplier))
            for feat in feature_set.variants[multiplier]:
                fh.write(struct.pack("<ffff", feat.x, feat.y, feat.scale, feat.orientation))
                fh.write(feat.descriptor.astype("<f4").tobytes())


def load_features(path: str | Path, image_id: str | None = None) -> FeatureSet:
    """Read a binary feature file; the image id defaults to the file stem."""
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 4 or data[:4] != _MAGIC:
        raise FeatureFileError(f"{path}: bad magic, not a feature file")
    if len(data) < 20:
        raise FeatureFileError(f"{path}: truncated header")
    version, variant_count, feature_count, dim = struct.unpack_from("<IIII", data, 4)
    if version != _VERSION:
        raise FeatureFileError(f"{path}: unsupported version {version}")
    offset = 20
    record_size = 4 * (4 + dim)
    variants: dict[float, list[LocalFeature]] = {}
    for _ in range(variant_count):
        if offset + 4 > len(data):
            raise FeatureFileError(f"{path}: truncated variant header")
        (multiplier,) = struct.unpack_from("<f", data, offset)
        offset += 4
        end = offset + feature_count * record_size
        if end > len(data):
            raise FeatureFileError(f"{path}: truncated payload in variant {multiplier}")
        raw = np.frombuffer(data, dtype="<f4", count=feature_count * (4 + dim), offset=offset)
        raw = raw.reshape(feature_count, 4 + dim)
        feats = [
            LocalFeature(
                x=float(row[0]),
                y=float(row[1]),
                scale=float(row[2]),
                orientation=float(row[3]),
                descriptor=row[4:].copy(),
            )
            for row in raw
        ]
        variants[float(multiplier)] = feats
        offset = end
    if offset != len(data):
        raise FeatureFileError(f"{path}: {len(data) - offset} trailing bytes")
    try:
        return FeatureSet(image_id=image_id or path.stem, variants=variants)
    except ValidationError as exc:
        raise FeatureFileError(f"{path}: {exc}") from exc


# ---------------------------------------------------------------------------
# Descriptor normalization
# ---------------------------------------------------------------------------


def power_normalize(descriptor: np.ndarray, cfg: NormalizationConfig) -> np.ndarray:
    """Apply a power law to a non-negative descriptor and L2-normalize.

    beta=0.5 first L1-normalizes, then takes componentwise square roots (the
    square-root descriptor variant); any other beta L2-pre-normalizes, raises
    components to the beta power, and renormalizes.
    """
    v = np.asarray(descriptor, dtype=np.float64)
    if np.any(v < 0):
        raise ValidationError("descriptor components must be non-negative")
    if not np.any(v > 0):
        raise DegenerateDescriptorError("all-zero descriptor cannot be normalized")
    if cfg.beta == 0.5:
        v = np.sqrt(v / v.sum())
    elif cfg.beta != 1.0:
        v = (v / np.linalg.norm(v)) ** cfg.beta
    return v / np.linalg.norm(v)


def normalized_descriptor_matrix(features: list[LocalFeature], cfg: NormalizationConfig) -> np.ndarray:
    """Stack power-normalized descriptors into an (n, d) float64 matrix."""
    if not features:
        dim = 0
        return np.zeros((0, dim), dtype=np.float64)
    return np.stack([power_normalize(f.descriptor, cfg) for f in features])
