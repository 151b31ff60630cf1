"""Geo-anchored sampling of a 64-channel embedding field.

A SAR scene is described by its lon/lat extent and imaging year. We lay a
regular anchor grid over that extent, look up the embedding vector under each
node in a file-backed raster store, and map every node to normalized image
coordinates (north-up, so ``py`` grows southward).

Latitude is treated as a plain affine axis. No spherical correction is applied,
which is adequate for the small boxes a single scene covers.
"""

import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateBox,
    DimensionMismatch,
    FormatError,
    GridTooSmall,
    OutOfBounds,
    OutOfBox,
    YearUnavailable,
)

EMBED_DIMS = 64


@dataclass(frozen=True)
class SpatioTemporalBox:
    lon_min: float
    lat_min: float
    lon_max: float
    lat_max: float
    year: int

    def __post_init__(self):
        vals = (self.lon_min, self.lat_min, self.lon_max, self.lat_max)
        if not all(math.isfinite(v) for v in vals):
            raise DegenerateBox(f"non-finite box coordinates {vals}")
        if not (self.lon_min < self.lon_max and self.lat_min < self.lat_max):
            raise DegenerateBox(
                f"box needs lon_min < lon_max and lat_min < lat_max, got {vals}"
            )

    @property
    def width(self):
        return self.lon_max - self.lon_min

    @property
    def height(self):
        return self.lat_max - self.lat_min

    def contains(self, lon, lat):
        return self.lon_min <= lon <= self.lon_max and self.lat_min <= lat <= self.lat_max

    def contains_box(self, other):
        return (
            self.lon_min <= other.lon_min
            and other.lon_max <= self.lon_max
            and self.lat_min <= other.lat_min
            and other.lat_max <= self.lat_max
        )

    def as_list(self):
        return [self.lon_min, self.lat_min, self.lon_max, self.lat_max, self.year]

    @classmethod
    def from_list(cls, values):
        lon_min, lat_min, lon_max, lat_max, year = values
        if int(year) != year:
            raise ValueError(f"year must be an integer, got {year!r}")
        return cls(float(lon_min), float(lat_min), float(lon_max), float(lat_max), int(year))


@dataclass(frozen=True)
class AnchorGrid:
    n_lon: int
    n_lat: int
    step_lon: float
    step_lat: float
    lons: np.ndarray = field(repr=False)
    lats: np.ndarray = field(repr=False)

    @property
    def nodes(self):
        """(n_lat * n_lon, 2) array of (lon, lat), latitude-major."""
        lon, lat = np.meshgrid(self.lons, self.lats)
        return np.stack([lon.ravel(), lat.ravel()], axis=1)

    def __len__(self):
        return self.n_lon * self.n_lat


def _axis(lo, hi, n):
    step = (hi - lo) / (n - 1)
    vals = lo + np.arange(n, dtype=np.float64) * step
    vals[-1] = hi  # endpoint exact to the last ulp
    return step, vals


def make_anchor_grid(box, n_lon, n_lat):
    if not (box.lon_min < box.lon_max and box.lat_min < box.lat_max):
        raise DegenerateBox(f"degenerate box {box}")
    if int(n_lon) < 2 or int(n_lat) < 2:
        raise GridTooSmall(f"anchor grid needs at least 2 nodes per axis, got {n_lon}x{n_lat}")
    step_lon, lons = _axis(box.lon_min, box.lon_max, int(n_lon))
    step_lat, lats = _axis(box.lat_min, box.lat_max, int(n_lat))
    return AnchorGrid(int(n_lon), int(n_lat), step_lon, step_lat, lons, lats)


def geo_to_pixel(box, lon, lat):
    """Map a geographic point inside ``box`` to normalized image coordinates.

    The top-left pixel is the north-west corner, so ``py = 0`` at ``lat_max``.
    """
    if not box.contains(lon, lat):
        raise OutOfBox(f"point ({lon}, {lat}) lies outside {box}")
    px = (lon - box.lon_min) / (box.lon_max - box.lon_min)
    py = (box.lat_max - lat) / (box.lat_max - box.lat_min)
    return px, py


def pixel_to_geo(box, px, py):
    lon = box.lon_min + px * (box.lon_max - box.lon_min)
    lat = box.lat_max - py * (box.lat_max - box.lat_min)
    return lon, lat


@dataclass
class YearRaster:
    """One year of the embedding field: a north-row-first raster of vectors."""

    box: SpatioTemporalBox
    data: np.ndarray  # (cells_y, cells_x, 64) float32

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 3 or self.data.shape[2] != EMBED_DIMS:
            raise DimensionMismatch(
                f"raster must be (cells_y, cells_x, {EMBED_DIMS}), got {self.data.shape}"
            )
        if self.data.shape[0] < 1 or self.data.shape[1] < 1:
            raise DimensionMismatch("raster needs at least one cell")

    @property
    def cells_x(self):
        return self.data.shape[1]

    @property
    def cells_y(self):
        return self.data.shape[0]

    @property
    def resolution(self):
        """Cells per degree along (lon, lat)."""
        return self.cells_x / self.box.width, self.cells_y / self.box.height

    def cell_index(self, lon, lat):
        b = self.box
        col = math.floor((lon - b.lon_min) / (b.lon_max - b.lon_min) * self.cells_x)
        row = math.floor((b.lat_max - lat) / (b.lat_max - b.lat_min) * self.cells_y)
        return min(max(row, 0), self.cells_y - 1), min(max(col, 0), self.cells_x - 1)

    def cell_center(self, row, col):
        b = self.box
        lon = b.lon_min + (col + 0.5) * (b.width / self.cells_x)
        lat = b.lat_max - (row + 0.5) * (b.height / self.cells_y)
        return lon, lat


class EmbeddingFieldStore:
    """Read-only, per-year collection of embedding rasters."""

    def __init__(self, rasters=()):
        self._rasters = {}
        for r in rasters:
            if r.box.year in self._rasters:
                raise ValueError(f"duplicate raster for year {r.box.year}")
            self._rasters[r.box.year] = r

    @property
    def years(self):
        return sorted(self._rasters)

    def raster(self, year):
        try:
            return self._rasters[year]
        except KeyError:
            raise YearUnavailable(f"no embedding raster for year {year}; have {self.years}") from None

    def bounds(self, year):
        return self.raster(year).box

    def query(self, lon, lat, year):
        r = self.raster(year)
        if not r.box.contains(lon, lat):
            raise OutOfBounds(f"({lon}, {lat}) outside store bounds {r.box}")
        row, col = r.cell_index(lon, lat)
        return r.data[row, col].astype(np.float64)

    @classmethod
    def load(cls, paths):
        if isinstance(paths, (str, os.PathLike)):
            paths = [paths]
        return cls(read_aefs(p) for p in paths)

    @classmethod
    def load_dir(cls, directory):
        names = sorted(n for n in os.listdir(directory) if n.endswith(".aefs"))
        return cls.load(os.path.join(directory, n) for n in names)


def query_embedding(store, lon, lat, year):
    return store.query(lon, lat, year)


# --- AEFS file format -------------------------------------------------------

AEFS_MAGIC = b"AEFS"
AEFS_VERSION = 1
_AEFS_HEADER = struct.Struct("<i4d3I")


def encode_aefs(raster):
    b = raster.box
    head = AEFS_MAGIC + bytes([AEFS_VERSION])
    head += _AEFS_HEADER.pack(
        b.year, b.lon_min, b.lat_min, b.lon_max, b.lat_max,
        raster.cells_x, raster.cells_y, EMBED_DIMS,
    )
    return head + raster.data.astype("<f4").tobytes(order="C")


def decode_aefs(blob):
    blob = bytes(blob)
    start = len(AEFS_MAGIC) + 1
    if blob[:4] != AEFS_MAGIC:
        raise FormatError("not an AEFS store (bad magic)")
    if len(blob) < start + _AEFS_HEADER.size:
        raise FormatError("truncated AEFS header")
    if blob[4] != AEFS_VERSION:
        raise FormatError(f"unsupported AEFS version {blob[4]}")
    year, lon_min, lat_min, lon_max, lat_max, cx, cy, dims = _AEFS_HEADER.unpack_from(blob, start)
    if dims != EMBED_DIMS:
        raise FormatError(f"AEFS dims must be {EMBED_DIMS}, got {dims}")
    off = start + _AEFS_HEADER.size
    count = cy * cx * dims
    if len(blob) != off + 4 * count:
        raise FormatError(f"AEFS payload size mismatch: {len(blob) - off} != {4 * count}")
    data = np.frombuffer(blob, dtype="<f4", offset=off, count=count).reshape(cy, cx, dims)
    box = SpatioTemporalBox(lon_min, lat_min, lon_max, lat_max, year)
    return YearRaster(box, data.astype(np.float32))


def write_aefs(path, raster):
    with open(os.fspath(path), "wb") as fh:
        fh.write(encode_aefs(raster))


def read_aefs(path):
    with open(os.fspath(path), "rb") as fh:
        return decode_aefs(fh.read())


# --- anchor feature sets ----------------------------------------------------

@dataclass
class AnchorFeatureSet:
    """Aligned (lon, lat, px, py, embedding) records, latitude-major."""

    lon: np.ndarray
    lat: np.ndarray
    px: np.ndarray
    py: np.ndarray
    embeddings: np.ndarray
    source_box: SpatioTemporalBox = None

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        n = self.embeddings.shape[0]
        for name in ("lon", "lat", "px", "py"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != (n,):
                raise DimensionMismatch(f"{name} has shape {arr.shape}, expected ({n},)")
            setattr(self, name, arr)
        if self.embeddings.ndim != 2 or self.embeddings.shape[1] != EMBED_DIMS:
            raise DimensionMismatch(
                f"embeddings must be (S, {EMBED_DIMS}), got {self.embeddings.shape}"
            )
        for name in ("px", "py"):
            arr = getattr(self, name)
            if np.any(~np.isfinite(arr)) or np.any(arr < 0.0) or np.any(arr > 1.0):
                raise OutOfBox(f"{name} outside [0, 1]")

    def __len__(self):
        return self.embeddings.shape[0]

    @property
    def positions(self):
        """(S, 2) array of (y, x) normalized positions, as TLM expects."""
        return np.stack([self.py, self.px], axis=1)

    def to_array(self):
        """S x (4 + 64) table: lon, lat, px, py, embedding."""
        return np.column_stack([self.lon, self.lat, self.px, self.py, self.embeddings])

    @classmethod
    def from_array(cls, table, source_box=None):
        table = np.asarray(table, dtype=np.float64)
        if table.ndim != 2 or table.shape[1] != 4 + EMBED_DIMS:
            raise DimensionMismatch(
                f"anchor table must be (S, {4 + EMBED_DIMS}), got {table.shape}"
            )
        return cls(table[:, 0], table[:, 1], table[:, 2], table[:, 3], table[:, 4:], source_box)


def build_feature_set(box, n_lon, n_lat, store):
    grid = make_anchor_grid(box, n_lon, n_lat)
    bounds = store.bounds(box.year)
    if not bounds.contains_box(box):
        raise OutOfBounds(f"box {box} exceeds store bounds {bounds}")
    nodes = grid.nodes
    emb = np.empty((len(nodes), EMBED_DIMS))
    pix = np.empty((len(nodes), 2))
    for k, (lon, lat) in enumerate(nodes):
        emb[k] = store.query(lon, lat, box.year)
        pix[k] = geo_to_pixel(box, lon, lat)
    return AnchorFeatureSet(nodes[:, 0], nodes[:, 1], pix[:, 0], pix[:, 1], emb, box)
