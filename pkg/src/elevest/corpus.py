"""Dataset manifests, train/test splits, DEM elevation lookup, and EXIF-derived quantities.

A corpus is described by a line-delimited JSON manifest (one image record per
line). Ground-truth camera elevations come from a gridded digital elevation
model sampled at the image's GPS position.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, replace
from datetime import datetime
from pathlib import Path

import numpy as np

from .errors import ManifestError, MissingDataError, OutOfBoundsError, ValidationError

logger = logging.getLogger(__name__)

#: Plausible camera elevations in meters above sea level.
ELEVATION_RANGE_M = (-500.0, 9000.0)

#: Missing-data sentinel used in DEM grids (common DEM convention).
DEM_NODATA = -32768.0


@dataclass(frozen=True)
class GeoPoint:
    """WGS84 coordinate in decimal degrees."""

    lat: float
    lon: float

    def __post_init__(self):
        if not (math.isfinite(self.lat) and -90.0 <= self.lat <= 90.0):
            raise ValidationError(f"latitude out of range: {self.lat!r}")
        if not (math.isfinite(self.lon) and -180.0 <= self.lon <= 180.0):
            raise ValidationError(f"longitude out of range: {self.lon!r}")


@dataclass(frozen=True)
class ExifRecord:
    """Camera metadata relevant to elevation estimation.

    Every field is independently optional; numeric fields must be positive
    and finite when present.
    """

    timestamp: datetime | None = None
    aperture_n: float | None = None
    exposure_s: float | None = None
    iso: float | None = None
    focal_mm: float | None = None
    sensor_mm: float | None = None

    def __post_init__(self):
        for name in ("aperture_n", "exposure_s", "iso", "focal_mm", "sensor_mm"):
            value = getattr(self, name)
            if value is None:
                continue
            if not (math.isfinite(value) and value > 0):
                raise ValidationError(f"EXIF field {name} must be positive and finite, got {value!r}")


@dataclass(frozen=True)
class ImageRecord:
    """One photograph's identity, position, ground truth, and file references."""

    id: str
    geo: GeoPoint | None = None
    elevation_m: float | None = None
    feature_path: str | None = None
    exif: ExifRecord | None = None
    scene_score: float | None = None

    def __post_init__(self):
        if not self.id:
            raise ValidationError("image id must be non-empty")
        if self.elevation_m is not None:
            lo, hi = ELEVATION_RANGE_M
            if not (math.isfinite(self.elevation_m) and lo <= self.elevation_m <= hi):
                raise ValidationError(
                    f"elevation {self.elevation_m!r} of image {self.id!r} outside [{lo}, {hi}]"
                )
        if self.scene_score is not None and not (0.0 <= self.scene_score <= 1.0):
            raise ValidationError(f"scene_score {self.scene_score!r} of image {self.id!r} outside [0, 1]")


@dataclass(frozen=True)
class DatasetSplit:
    """Disjoint train/test partition of a manifest's image ids."""

    train_ids: frozenset[str]
    test_ids: frozenset[str]
    seed: int

    def __post_init__(self):
        overlap = self.train_ids & self.test_ids
        if overlap:
            raise ValidationError(f"train/test overlap: {sorted(overlap)[:5]}")


# ---------------------------------------------------------------------------
# Manifest I/O (UTF-8, one JSON object per line; unknown fields ignored)
# ---------------------------------------------------------------------------

_EXIF_NUMERIC_FIELDS = ("aperture_n", "exposure_s", "iso", "focal_mm", "sensor_mm")


def _parse_exif(obj: dict, line_no: int) -> ExifRecord:
    if not isinstance(obj, dict):
        raise ManifestError(f"exif must be an object, got {type(obj).__name__}", line_no)
    kwargs: dict = {}
    ts = obj.get("timestamp")
    if ts is not None:
        try:
            kwargs["timestamp"] = datetime.fromisoformat(ts)
        except (TypeError, ValueError) as exc:
            raise ManifestError(f"bad exif timestamp {ts!r}: {exc}", line_no) from exc
    for name in _EXIF_NUMERIC_FIELDS:
        if obj.get(name) is not None:
            kwargs[name] = float(obj[name])
    try:
        return ExifRecord(**kwargs)
    except ValidationError as exc:
        raise ManifestError(str(exc), line_no) from exc


def _parse_record(line: str, line_no: int) -> ImageRecord:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"invalid JSON: {exc.msg}", line_no) from exc
    if not isinstance(obj, dict):
        raise ManifestError("manifest line is not a JSON object", line_no)
    image_id = obj.get("id")
    if not isinstance(image_id, str) or not image_id:
        raise ManifestError("missing or empty 'id'", line_no)

    lat, lon = obj.get("lat"), obj.get("lon")
    if (lat is None) != (lon is None):
        raise ManifestError(f"image {image_id!r} has only one of lat/lon", line_no)
    geo = None
    if lat is not None:
        try:
            geo = GeoPoint(float(lat), float(lon))
        except ValidationError as exc:
            raise ManifestError(str(exc), line_no) from exc

    exif = _parse_exif(obj["exif"], line_no) if obj.get("exif") is not None else None
    elevation = obj.get("elevation_m")
    scene_score = obj.get("scene_score")
    try:
        return ImageRecord(
            id=image_id,
            geo=geo,
            elevation_m=float(elevation) if elevation is not None else None,
            feature_path=obj.get("feature_path"),
            exif=exif,
            scene_score=float(scene_score) if scene_score is not None else None,
        )
    except ValidationError as exc:
        raise ManifestError(str(exc), line_no) from exc


def load_manifest(path: str | Path) -> list[ImageRecord]:
    """Read a line-delimited JSON manifest into image records, in file order.

    Raises ManifestError for malformed lines (with the line number) and
    ValidationError for duplicate ids.
    """
    records: list[ImageRecord] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            record = _parse_record(line, line_no)
            if record.id in seen:
                raise ValidationError(f"duplicate image id {record.id!r} in manifest {path}")
            seen.add(record.id)
            records.append(record)
    return records


def record_to_json(record: ImageRecord) -> str:
    """Serialize one record to its manifest line (stable key order)."""
    obj: dict = {"id": record.id}
    if record.geo is not None:
        obj["lat"] = record.geo.lat
        obj["lon"] = record.geo.lon
    if record.elevation_m is not None:
        obj["elevation_m"] = record.elevation_m
    if record.feature_path is not None:
        obj["feature_path"] = record.feature_path
    if record.exif is not None:
        exif: dict = {}
        if record.exif.timestamp is not None:
            exif["timestamp"] = record.exif.timestamp.isoformat()
        for name in _EXIF_NUMERIC_FIELDS:
            value = getattr(record.exif, name)
            if value is not None:
                exif[name] = value
        obj["exif"] = exif
    if record.scene_score is not None:
        obj["scene_score"] = record.scene_score
    return json.dumps(obj, sort_keys=True)


def save_manifest(path: str | Path, records: list[ImageRecord]) -> None:
    """Write records as a line-delimited JSON manifest (round-trips with load_manifest)."""
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise ValidationError("duplicate ids in records to save")
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(record_to_json(record) + "\n")


# ---------------------------------------------------------------------------
# Dataset splitting
# ---------------------------------------------------------------------------


def split_dataset(records: list[ImageRecord], test_fraction: float, seed: int) -> DatasetSplit:
    """Partition records into train/test by a seeded shuffle and prefix cut.

    |test| = round(test_fraction * N). Every record must carry an elevation;
    the split is deterministic for a fixed seed.
    """
    if not records:
        raise ValidationError("cannot split an empty record list")
    if not (0.0 < test_fraction < 1.0):
        raise ValidationError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    for record in records:
        if record.elevation_m is None:
            raise ValidationError(f"record {record.id!r} has no elevation; annotate before splitting")
    ids = [r.id for r in records]
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ids))
    n_test = int(round(test_fraction * len(ids)))
    test_ids = frozenset(ids[i] for i in order[:n_test])
    train_ids = frozenset(ids[i] for i in order[n_test:])
    return DatasetSplit(train_ids=train_ids, test_ids=test_ids, seed=seed)


# ---------------------------------------------------------------------------
# DEM grid and bilinear lookup
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DemGrid:
    """Regular elevation grid; row 0 is the southernmost (lower-left origin).

    samples[r, c] is the elevation at (origin.lat + r*spacing_deg,
    origin.lon + c*spacing_deg). DEM_NODATA marks missing samples.
    """

    origin: GeoPoint
    spacing_deg: float
    samples: np.ndarray  # shape (rows, cols), float64

    def __post_init__(self):
        if self.spacing_deg <= 0:
            raise ValidationError(f"spacing_deg must be positive, got {self.spacing_deg}")
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 2 or samples.shape[0] < 2 or samples.shape[1] < 2:
            raise ValidationError(f"DEM needs at least 2x2 samples, got shape {samples.shape}")
        object.__setattr__(self, "samples", samples)

    @property
    def rows(self) -> int:
        return self.samples.shape[0]

    @property
    def cols(self) -> int:
        return self.samples.shape[1]


def dem_lookup(grid: DemGrid, p: GeoPoint) -> float:
    """Bilinearly interpolate the grid at a point inside its bounding box.

    Raises OutOfBoundsError outside the grid and MissingDataError if any of
    the four surrounding samples is the missing-data sentinel.
    """
    fx = (p.lon - grid.origin.lon) / grid.spacing_deg
    fy = (p.lat - grid.origin.lat) / grid.spacing_deg
    eps = 1e-9
    if fx < -eps or fx > grid.cols - 1 + eps or fy < -eps or fy > grid.rows - 1 + eps:
        raise OutOfBoundsError(
            f"point ({p.lat}, {p.lon}) outside DEM extent "
            f"[{grid.origin.lat}, {grid.origin.lat + (grid.rows - 1) * grid.spacing_deg}] x "
            f"[{grid.origin.lon}, {grid.origin.lon + (grid.cols - 1) * grid.spacing_deg}]"
        )
    c0 = min(int(math.floor(max(fx, 0.0))), grid.cols - 2)
    r0 = min(int(math.floor(max(fy, 0.0))), grid.rows - 2)
    u = min(max(fx - c0, 0.0), 1.0)
    v = min(max(fy - r0, 0.0), 1.0)
    corners = grid.samples[r0 : r0 + 2, c0 : c0 + 2]
    if np.any(corners == DEM_NODATA):
        raise MissingDataError(f"missing DEM data around point ({p.lat}, {p.lon})")
    z00, z01 = corners[0, 0], corners[0, 1]
    z10, z11 = corners[1, 0], corners[1, 1]
    return float((1 - v) * ((1 - u) * z00 + u * z01) + v * ((1 - u) * z10 + u * z11))


def read_esri_ascii(path: str | Path) -> DemGrid:
    """Read an ESRI ASCII grid (north row first in the file).

    The corner coordinates from the header are taken as the coordinates of
    the lower-left sample (grid registration).
    """
    header: dict[str, float] = {}
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    idx = 0
    header_keys = {"ncols", "nrows", "xllcorner", "yllcorner", "cellsize", "nodata_value"}
    while idx < len(lines):
        parts = lines[idx].split()
        if len(parts) == 2 and parts[0].lower() in header_keys:
            header[parts[0].lower()] = float(parts[1])
            idx += 1
        else:
            break
    for key in ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize"):
        if key not in header:
            raise ValidationError(f"ESRI ASCII grid {path} missing header field {key!r}")
    rows, cols = int(header["nrows"]), int(header["ncols"])
    values = np.array(" ".join(lines[idx:]).split(), dtype=np.float64)
    if values.size != rows * cols:
        raise ValidationError(f"ESRI ASCII grid {path} has {values.size} samples, expected {rows * cols}")
    if "nodata_value" in header:
        values[values == header["nodata_value"]] = DEM_NODATA
    samples = values.reshape(rows, cols)[::-1].copy()  # file is north row first
    return DemGrid(
        origin=GeoPoint(lat=header["yllcorner"], lon=header["xllcorner"]),
        spacing_deg=header["cellsize"],
        samples=samples,
    )


def write_esri_ascii(path: str | Path, grid: DemGrid) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"ncols {grid.cols}\n")
        fh.write(f"nrows {grid.rows}\n")
        fh.write(f"xllcorner {grid.origin.lon!r}\n")
        fh.write(f"yllcorner {grid.origin.lat!r}\n")
        fh.write(f"cellsize {grid.spacing_deg!r}\n")
        fh.write(f"NODATA_value {DEM_NODATA!r}\n")
        for row in grid.samples[::-1]:
            fh.write(" ".join(repr(float(z)) for z in row) + "\n")


def annotate_elevations(records: list[ImageRecord], grid: DemGrid) -> tuple[list[ImageRecord], int]:
    """Fill each record's elevation from the DEM at its GPS position.

    Records without a position pass through unchanged; the count of such
    records is returned alongside. Lookup failures name the offending image.
    """
    out: list[ImageRecord] = []
    skipped = 0
    for record in records:
        if record.geo is None:
            skipped += 1
            out.append(record)
            continue
        try:
            elevation = dem_lookup(grid, record.geo)
        except (OutOfBoundsError, MissingDataError) as exc:
            raise type(exc)(f"image {record.id!r}: {exc}") from exc
        out.append(replace(record, elevation_m=elevation))
    if skipped:
        logger.warning("annotate_elevations: %d record(s) without GPS position left unannotated", skipped)
    return out, skipped


# ---------------------------------------------------------------------------
# EXIF-derived quantities
# ---------------------------------------------------------------------------


def compute_ec(exif: ExifRecord | None) -> float | None:
    """Exposure coefficient in stops: log2(N^2) - log2(t * ISO / 100).

    High values mean the camera compensated for low light. Returns None when
    any required field is absent (0 is a legal value, so absence is distinct).
    """
    if exif is None or exif.aperture_n is None or exif.exposure_s is None or exif.iso is None:
        return None
    return math.log2(exif.aperture_n**2) - math.log2(exif.exposure_s * exif.iso / 100.0)


def compute_fov(exif: ExifRecord | None) -> float | None:
    """Half-angle field of view in radians: arctan(0.5 * sensor / focal)."""
    if exif is None or exif.focal_mm is None or exif.sensor_mm is None:
        return None
    return math.atan(0.5 * exif.sensor_mm / exif.focal_mm)
