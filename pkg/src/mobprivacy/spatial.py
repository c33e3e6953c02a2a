"""Spatial transforms: bounding boxes, min-max scaling, geohash and grid
discretization, location/user vocabularies, one-hot features and padding."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, Iterable, Optional, Sequence

import numpy as np

from .errors import ArtifactMismatchError, ConfigError, DataError
from .utils import stable_hash

if TYPE_CHECKING:
    from .dataio import LocationRecord, SequenceExample, TrajectoryDataset

log = logging.getLogger(__name__)

NUM_DAYS = 7
NUM_HOURS = 24
VOCAB_FORMAT_VERSION = 1


@dataclass(frozen=True)
class BoundingBox:
    lat_min: float
    lat_max: float
    lon_min: float
    lon_max: float

    def __post_init__(self):
        for name in ("lat_min", "lat_max", "lon_min", "lon_max"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if not (self.lat_min < self.lat_max and self.lon_min < self.lon_max):
            raise ConfigError(f"degenerate bounding box: {self}")
        if not (-90 <= self.lat_min and self.lat_max <= 90 and -180 <= self.lon_min and self.lon_max <= 180):
            raise ConfigError(f"bounding box outside valid coordinate ranges: {self}")

    def contains(self, lat: float, lon: float) -> bool:
        return self.lat_min <= lat <= self.lat_max and self.lon_min <= lon <= self.lon_max

    def to_dict(self) -> dict:
        return {"lat_min": self.lat_min, "lat_max": self.lat_max, "lon_min": self.lon_min, "lon_max": self.lon_max}

    @classmethod
    def from_dict(cls, d: dict) -> "BoundingBox":
        return cls(float(d["lat_min"]), float(d["lat_max"]), float(d["lon_min"]), float(d["lon_max"]))


def filter_bbox(records: Iterable["LocationRecord"], bbox: BoundingBox) -> list["LocationRecord"]:
    """Keep records inside ``bbox`` (boundary inclusive), preserving order."""
    records = list(records)
    kept = [r for r in records if bbox.contains(r.latitude, r.longitude)]
    if len(kept) < len(records):
        log.info("filter_bbox dropped %d of %d records", len(records) - len(kept), len(records))
    if not kept and records:
        log.warning("filter_bbox: no records inside %s", bbox)
    return kept


# --------------------------------------------------------------------------- min-max


@dataclass(frozen=True)
class ScalerParams:
    centroid_lat: float
    centroid_lon: float
    half_range_lat: float
    half_range_lon: float

    def __post_init__(self):
        if not (self.half_range_lat > 0 and self.half_range_lon > 0):
            raise ConfigError("min-max half ranges must be strictly positive")


def fit_minmax(latitudes: Sequence[float], longitudes: Sequence[float]) -> ScalerParams:
    """Centroid is the arithmetic mean; half range is the largest absolute deviation."""
    lat = np.asarray(latitudes, dtype=np.float64)
    lon = np.asarray(longitudes, dtype=np.float64)
    if lat.size == 0:
        raise DataError("cannot fit min-max scaler on zero points")
    c_lat, c_lon = float(lat.mean()), float(lon.mean())
    h_lat, h_lon = float(np.abs(lat - c_lat).max()), float(np.abs(lon - c_lon).max())
    if h_lat == 0.0 or h_lon == 0.0:
        axis = "latitude" if h_lat == 0.0 else "longitude"
        raise DataError(f"degenerate {axis} axis: all values equal")
    return ScalerParams(c_lat, c_lon, h_lat, h_lon)


def apply_minmax(lat, lon, params: ScalerParams):
    """Map coordinates into [-1, 1]^2; points beyond the fitted range are clamped."""
    x = (np.asarray(lat, dtype=np.float64) - params.centroid_lat) / params.half_range_lat
    y = (np.asarray(lon, dtype=np.float64) - params.centroid_lon) / params.half_range_lon
    n_clamped = int(np.count_nonzero((np.abs(x) > 1) | (np.abs(y) > 1)))
    if n_clamped:
        log.warning("apply_minmax clamped %d point(s) outside the fitted range", n_clamped)
        x, y = np.clip(x, -1.0, 1.0), np.clip(y, -1.0, 1.0)
    if x.ndim == 0:
        return float(x), float(y)
    return x, y


def invert_minmax(x, y, params: ScalerParams):
    lat = np.asarray(x, dtype=np.float64) * params.half_range_lat + params.centroid_lat
    lon = np.asarray(y, dtype=np.float64) * params.half_range_lon + params.centroid_lon
    if lat.ndim == 0:
        return float(lat), float(lon)
    return lat, lon


# --------------------------------------------------------------------------- geohash

GEOHASH_ALPHABET = "0123456789bcdefghjkmnpqrstuvwxyz"
_GEOHASH_INDEX = {c: i for i, c in enumerate(GEOHASH_ALPHABET)}


def geohash_encode(lat: float, lon: float, precision: int = 12) -> str:
    if not 1 <= precision <= 12:
        raise ValueError(f"geohash precision must be in [1, 12], got {precision}")
    if not (-90 <= lat <= 90 and -180 <= lon <= 180):
        raise ValueError(f"invalid coordinate ({lat}, {lon})")
    lat_lo, lat_hi = -90.0, 90.0
    lon_lo, lon_hi = -180.0, 180.0
    chars = []
    even = True  # even bit positions refine longitude
    bit = 0
    ch = 0
    while len(chars) < precision:
        if even:
            mid = (lon_lo + lon_hi) / 2
            if lon >= mid:
                ch = (ch << 1) | 1
                lon_lo = mid
            else:
                ch <<= 1
                lon_hi = mid
        else:
            mid = (lat_lo + lat_hi) / 2
            if lat >= mid:
                ch = (ch << 1) | 1
                lat_lo = mid
            else:
                ch <<= 1
                lat_hi = mid
        even = not even
        bit += 1
        if bit == 5:
            chars.append(GEOHASH_ALPHABET[ch])
            bit = ch = 0
    return "".join(chars)


def geohash_decode(code: str) -> tuple[float, float, float, float]:
    """Return ``(lat_center, lon_center, lat_half_width, lon_half_width)``."""
    if not code:
        raise ValueError("empty geohash")
    lat_lo, lat_hi = -90.0, 90.0
    lon_lo, lon_hi = -180.0, 180.0
    even = True
    for c in code:
        try:
            value = _GEOHASH_INDEX[c]
        except KeyError:
            raise ValueError(f"invalid geohash character {c!r} in {code!r}") from None
        for shift in range(4, -1, -1):
            b = (value >> shift) & 1
            if even:
                mid = (lon_lo + lon_hi) / 2
                if b:
                    lon_lo = mid
                else:
                    lon_hi = mid
            else:
                mid = (lat_lo + lat_hi) / 2
                if b:
                    lat_lo = mid
                else:
                    lat_hi = mid
            even = not even
    return (lat_lo + lat_hi) / 2, (lon_lo + lon_hi) / 2, (lat_hi - lat_lo) / 2, (lon_hi - lon_lo) / 2


# --------------------------------------------------------------------------- grid


class OutsideGridError(ValueError):
    """Point lies outside the grid; ``axis`` is ``"lat"``, ``"lon"`` or ``"both"``."""

    def __init__(self, axis: str, lat: float, lon: float):
        super().__init__(f"point ({lat}, {lon}) outside grid on axis {axis}")
        self.axis = axis


def _cell_count(extent: float, size: float) -> int:
    # round first so float noise like 200.0000000001 does not add a sliver cell
    return max(1, math.ceil(round(extent / size, 9)))


@dataclass(frozen=True)
class GridSpec:
    bbox: BoundingBox
    cell_height_deg: float
    cell_width_deg: float

    def __post_init__(self):
        object.__setattr__(self, "cell_height_deg", float(self.cell_height_deg))
        object.__setattr__(self, "cell_width_deg", float(self.cell_width_deg))
        if not (self.cell_height_deg > 0 and self.cell_width_deg > 0):
            raise ConfigError("grid cell sizes must be positive")

    @property
    def rows(self) -> int:
        return _cell_count(self.bbox.lat_max - self.bbox.lat_min, self.cell_height_deg)

    @property
    def cols(self) -> int:
        return _cell_count(self.bbox.lon_max - self.bbox.lon_min, self.cell_width_deg)

    @classmethod
    def with_cells(cls, bbox: BoundingBox, rows: int, cols: Optional[int] = None) -> "GridSpec":
        cols = rows if cols is None else cols
        return cls(bbox, (bbox.lat_max - bbox.lat_min) / rows, (bbox.lon_max - bbox.lon_min) / cols)


def grid_encode(lat: float, lon: float, grid: GridSpec) -> tuple[int, int]:
    """Cell ``(row, col)`` of a point; the top/right edges belong to the last row/column."""
    b = grid.bbox
    bad_lat = not (b.lat_min <= lat <= b.lat_max)
    bad_lon = not (b.lon_min <= lon <= b.lon_max)
    if bad_lat or bad_lon:
        raise OutsideGridError("both" if bad_lat and bad_lon else ("lat" if bad_lat else "lon"), lat, lon)
    row = min(int(math.floor((lat - b.lat_min) / grid.cell_height_deg)), grid.rows - 1)
    col = min(int(math.floor((lon - b.lon_min) / grid.cell_width_deg)), grid.cols - 1)
    return row, col


def grid_decode(cell: tuple[int, int], grid: GridSpec) -> tuple[float, float]:
    row, col = cell
    if not (0 <= row < grid.rows and 0 <= col < grid.cols):
        raise ValueError(f"cell {cell} outside a {grid.rows}x{grid.cols} grid")
    return (
        grid.bbox.lat_min + (row + 0.5) * grid.cell_height_deg,
        grid.bbox.lon_min + (col + 0.5) * grid.cell_width_deg,
    )


# --------------------------------------------------------------------------- discretizers


class GridDiscretizer:
    kind = "grid"

    def __init__(self, grid: GridSpec):
        self.grid = grid

    def cell_id(self, lat: float, lon: float) -> Optional[str]:
        try:
            row, col = grid_encode(lat, lon, self.grid)
        except OutsideGridError:
            return None
        return f"{row:05d}:{col:05d}"

    def cell_center(self, cell_id: str) -> tuple[float, float]:
        row, col = (int(p) for p in cell_id.split(":"))
        return grid_decode((row, col), self.grid)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "bbox": self.grid.bbox.to_dict(),
            "cell_height_deg": self.grid.cell_height_deg,
            "cell_width_deg": self.grid.cell_width_deg,
        }


class GeohashDiscretizer:
    kind = "geohash"

    def __init__(self, precision: int = 7):
        if not 1 <= precision <= 12:
            raise ConfigError(f"geohash precision must be in [1, 12], got {precision}")
        self.precision = precision

    def cell_id(self, lat: float, lon: float) -> Optional[str]:
        return geohash_encode(lat, lon, self.precision)

    def cell_center(self, cell_id: str) -> tuple[float, float]:
        lat, lon, _, _ = geohash_decode(cell_id)
        return lat, lon

    def to_dict(self) -> dict:
        return {"kind": self.kind, "precision": self.precision}


def discretizer_from_dict(d: dict):
    kind = d.get("kind")
    if kind == "grid":
        return GridDiscretizer(GridSpec(BoundingBox.from_dict(d["bbox"]), float(d["cell_height_deg"]), float(d["cell_width_deg"])))
    if kind == "geohash":
        return GeohashDiscretizer(int(d["precision"]))
    raise ConfigError(f"unknown discretizer kind {kind!r}")


def make_discretizer(spec: dict, bbox: Optional[BoundingBox]):
    """Build a discretizer from a config spec such as ``{"kind": "grid", "cells_per_axis": 200}``."""
    kind = spec.get("kind", "grid")
    if kind == "geohash":
        return GeohashDiscretizer(int(spec.get("precision", 7)))
    if kind == "grid":
        if bbox is None:
            raise ConfigError("grid discretizer requires preprocessing.bbox")
        if "cell_height_deg" in spec:
            return GridDiscretizer(GridSpec(bbox, float(spec["cell_height_deg"]), float(spec["cell_width_deg"])))
        return GridDiscretizer(GridSpec.with_cells(bbox, int(spec.get("cells_per_axis", 200))))
    raise ConfigError(f"unknown discretizer kind {kind!r}")


# --------------------------------------------------------------------------- vocabulary


@dataclass(frozen=True)
class Vocab:
    """Closed vocabularies fitted on the training split.

    Location indices ``0..Y-1`` follow the sorted cell ids; ``pad_index == Y``.
    """

    location_cells: tuple[str, ...]
    users: tuple[str, ...]
    discretizer: Any = field(compare=False)
    _loc_index: dict = field(init=False, repr=False, compare=False)
    _user_index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "_loc_index", {c: i for i, c in enumerate(self.location_cells)})
        object.__setattr__(self, "_user_index", {u: i for i, u in enumerate(self.users)})

    @property
    def num_locations(self) -> int:
        return len(self.location_cells)

    @property
    def num_users(self) -> int:
        return len(self.users)

    @property
    def pad_index(self) -> int:
        return len(self.location_cells)

    @property
    def feature_dim(self) -> int:
        return self.num_locations + 1 + NUM_DAYS + NUM_HOURS

    def location_index(self, cell_id: Optional[str]) -> Optional[int]:
        return self._loc_index.get(cell_id)

    def user_index(self, user_id: str) -> Optional[int]:
        return self._user_index.get(user_id)

    def locate(self, lat: float, lon: float) -> Optional[int]:
        return self._loc_index.get(self.discretizer.cell_id(lat, lon))

    def to_dict(self) -> dict:
        return {
            "format_version": VOCAB_FORMAT_VERSION,
            "location_cells": list(self.location_cells),
            "users": list(self.users),
            "pad_index": self.pad_index,
            "discretizer": self.discretizer.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @property
    def hash(self) -> str:
        return stable_hash(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "Vocab":
        if d.get("format_version") != VOCAB_FORMAT_VERSION:
            raise ArtifactMismatchError(f"unsupported vocab format {d.get('format_version')!r}")
        vocab = cls(tuple(d["location_cells"]), tuple(d["users"]), discretizer_from_dict(d["discretizer"]))
        if vocab.pad_index != d["pad_index"]:
            raise ArtifactMismatchError("vocab pad_index inconsistent with its location list")
        return vocab

    @classmethod
    def from_json(cls, text: str) -> "Vocab":
        return cls.from_dict(json.loads(text))


def build_vocab(train: "TrajectoryDataset", discretizer) -> Vocab:
    cells: set[str] = set()
    for traj in train.trajectories:
        for p in traj.points:
            cell = discretizer.cell_id(p.latitude, p.longitude)
            if cell is not None:
                cells.add(cell)
    if not cells:
        raise DataError("cannot build a vocabulary from an empty training set")
    users = sorted({t.user_id for t in train.trajectories})
    return Vocab(tuple(sorted(cells)), tuple(users), discretizer)


# --------------------------------------------------------------------------- features


def pad_truncate(sequence: Sequence, sl: int, pad_element: Any) -> tuple[list, tuple[int, ...]]:
    """Keep the most recent ``sl`` elements, left-padding short sequences.

    Returns the fixed-length sequence and a 0/1 mask of real positions.
    """
    if sl < 1:
        raise ValueError("sequence length must be >= 1")
    seq = list(sequence)[-sl:]
    n_pad = sl - len(seq)
    return [pad_element] * n_pad + seq, (0,) * n_pad + (1,) * len(seq)


def pad_record(vocab: Vocab) -> tuple[int, int, int]:
    return (vocab.pad_index, -1, -1)


def one_hot_encode(example: "SequenceExample", vocab: Vocab) -> np.ndarray:
    """Feature matrix ``SL x (Y + 1 + 7 + 24)`` for a single example."""
    X, _ = encode_contexts([example.context], vocab)
    return X[0]


def encode_contexts(contexts: Sequence[Sequence[tuple[int, int, int]]], vocab: Vocab, dtype=np.float64):
    """Vectorised one-hot encoding of ``(location, day, hour)`` contexts.

    Padded steps (location == pad_index) get a single one in the pad slot.
    Returns ``(X, mask)`` with shapes ``(B, SL, D)`` and ``(B, SL)``.
    """
    ctx = np.asarray(contexts, dtype=np.int64)
    if ctx.ndim != 3 or ctx.shape[-1] != 3:
        raise ValueError(f"contexts must have shape (B, SL, 3), got {ctx.shape}")
    Y = vocab.num_locations
    loc, day, hour = ctx[..., 0], ctx[..., 1], ctx[..., 2]
    real = loc != vocab.pad_index
    if (loc < 0).any() or (loc > Y).any():
        raise IndexError("location index out of range")
    if ((day[real] < 0) | (day[real] >= NUM_DAYS)).any() or ((hour[real] < 0) | (hour[real] >= NUM_HOURS)).any():
        raise IndexError("day/hour index out of range")
    B, SL = loc.shape
    X = np.zeros((B, SL, vocab.feature_dim), dtype=dtype)
    bi, ti = np.indices((B, SL))
    X[bi, ti, loc] = 1.0
    X[bi[real], ti[real], Y + 1 + day[real]] = 1.0
    X[bi[real], ti[real], Y + 1 + NUM_DAYS + hour[real]] = 1.0
    return X, real


def decode_features(row: np.ndarray, vocab: Vocab) -> Optional[tuple[int, int, int]]:
    """Invert one real feature row back to ``(location, day, hour)``; None for pads."""
    Y = vocab.num_locations
    loc = int(np.argmax(row[: Y + 1]))
    if loc == vocab.pad_index:
        return None
    day = int(np.argmax(row[Y + 1 : Y + 1 + NUM_DAYS]))
    hour = int(np.argmax(row[Y + 1 + NUM_DAYS :]))
    return loc, day, hour


__all__ = [
    "BoundingBox",
    "ScalerParams",
    "GridSpec",
    "OutsideGridError",
    "GridDiscretizer",
    "GeohashDiscretizer",
    "Vocab",
    "filter_bbox",
    "fit_minmax",
    "apply_minmax",
    "invert_minmax",
    "geohash_encode",
    "geohash_decode",
    "grid_encode",
    "grid_decode",
    "build_vocab",
    "pad_truncate",
    "one_hot_encode",
    "encode_contexts",
]
