"""Planar hexagonal tokenization of geographic coordinates.

Cells are flat-top hexagons in axial ``(q, r)`` coordinates laid over an
equirectangular projection around ``GridConfig.origin``::

    x_east  = R * dlon * cos(ref_lat)
    y_north = R * dlat
    center(q, r) = (1.5 * a * q,  sqrt(3) * a * (r + q / 2))

with ``a`` the hexagon edge length at the configured resolution.  A cell id
packs ``(resolution, q, r)`` into one unsigned 64-bit integer: 4 bits of
resolution, then 30 bits each of two's-complement ``q`` and ``r``.  Any
other 64-bit id (for example a real H3 index) can be passed through the
rest of the pipeline untouched; only ``cell_of``/``centroid_of`` need the
planar layout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, RangeError

EARTH_RADIUS_M = 6_371_008.8

RES_BITS = 4
AXIAL_BITS = 30
AXIAL_MASK = (1 << AXIAL_BITS) - 1
AXIAL_MIN = -(1 << (AXIAL_BITS - 1))
AXIAL_MAX = (1 << (AXIAL_BITS - 1)) - 1
MAX_RESOLUTION = (1 << RES_BITS) - 1

# Mean H3 level-6 cell area; the default grid is calibrated against it.
LEVEL6_AREA_KM2 = 36.13
LEVEL6_RESOLUTION = 6
HEX_AREA_FACTOR = 1.5 * math.sqrt(3.0)
LEVEL6_EDGE_M = math.sqrt(LEVEL6_AREA_KM2 * 1e6 / HEX_AREA_FACTOR)

# Axial offsets in canonical order E, NE, NW, W, SW, SE.
NEIGHBOR_OFFSETS = ((1, 0), (1, -1), (0, -1), (-1, 0), (-1, 1), (0, 1))

_SQRT3 = math.sqrt(3.0)
_HALF_SNAP = 1e-9


@dataclass(frozen=True)
class GeoCoord:
    lat: float
    lon: float

    def __post_init__(self):
        check_coord(self.lat, self.lon)


def check_coord(lat, lon):
    lat = np.asarray(lat, dtype=np.float64)
    lon = np.asarray(lon, dtype=np.float64)
    if not (np.all(np.isfinite(lat)) and np.all(np.isfinite(lon))):
        raise RangeError("coordinates must be finite")
    if np.any(np.abs(lat) > 90.0):
        raise RangeError(f"latitude outside [-90, 90]: {lat[np.abs(lat) > 90.0].ravel()[:3]}")
    if np.any(np.abs(lon) > 180.0):
        raise RangeError(f"longitude outside [-180, 180]: {lon[np.abs(lon) > 180.0].ravel()[:3]}")


@dataclass(frozen=True)
class GridConfig:
    """Hex grid geometry.

    ``edge_length_m`` is the edge at resolution 0; it halves with every
    resolution step.  ``ref_lat`` defaults to the origin latitude.
    """

    resolution: int = LEVEL6_RESOLUTION
    edge_length_m: float = LEVEL6_EDGE_M * 2**LEVEL6_RESOLUTION
    origin: GeoCoord = field(default_factory=lambda: GeoCoord(32.0, 119.0))
    ref_lat: float | None = None

    def __post_init__(self):
        if not (0 <= int(self.resolution) <= MAX_RESOLUTION):
            raise ConfigError(f"resolution must be in [0, {MAX_RESOLUTION}], got {self.resolution}")
        if not (self.edge_length_m > 0 and math.isfinite(self.edge_length_m)):
            raise ConfigError(f"edge_length_m must be positive, got {self.edge_length_m}")
        if self.ref_lat is None:
            object.__setattr__(self, "ref_lat", self.origin.lat)
        if not abs(self.ref_lat) < 90.0:
            raise ConfigError(f"ref_lat must be strictly inside (-90, 90), got {self.ref_lat}")

    @property
    def edge(self) -> float:
        """Edge length in meters at the configured resolution."""
        return self.edge_length_m / 2**self.resolution

    @property
    def cell_area_km2(self) -> float:
        return HEX_AREA_FACTOR * self.edge**2 / 1e6

    @property
    def _lon_scale(self) -> float:
        return EARTH_RADIUS_M * math.cos(math.radians(self.ref_lat))

    def to_dict(self) -> dict:
        return {
            "resolution": int(self.resolution),
            "edge_length_m": float(self.edge_length_m),
            "origin_lat": float(self.origin.lat),
            "origin_lon": float(self.origin.lon),
            "ref_lat": float(self.ref_lat),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridConfig":
        return cls(
            resolution=int(d.get("resolution", LEVEL6_RESOLUTION)),
            edge_length_m=float(d.get("edge_length_m", LEVEL6_EDGE_M * 2**LEVEL6_RESOLUTION)),
            origin=GeoCoord(float(d.get("origin_lat", 32.0)), float(d.get("origin_lon", 119.0))),
            ref_lat=d.get("ref_lat"),
        )


@dataclass(frozen=True, order=True)
class CellId:
    resolution: int
    q: int
    r: int

    def __post_init__(self):
        if not (0 <= self.resolution <= MAX_RESOLUTION):
            raise RangeError(f"resolution {self.resolution} does not fit in {RES_BITS} bits")
        for name, v in (("q", self.q), ("r", self.r)):
            if not (AXIAL_MIN <= v <= AXIAL_MAX):
                raise RangeError(f"axial {name}={v} does not fit in {AXIAL_BITS} signed bits")

    @property
    def packed(self) -> int:
        return pack(self.resolution, self.q, self.r)

    @classmethod
    def from_packed(cls, value: int) -> "CellId":
        return cls(*unpack(value))

    def __str__(self):
        return str(self.packed)


def pack(resolution: int, q: int, r: int) -> int:
    if not (0 <= resolution <= MAX_RESOLUTION):
        raise RangeError(f"resolution {resolution} does not fit in {RES_BITS} bits")
    if not (AXIAL_MIN <= q <= AXIAL_MAX and AXIAL_MIN <= r <= AXIAL_MAX):
        raise RangeError(f"axial ({q}, {r}) does not fit in {AXIAL_BITS} signed bits")
    return (resolution << (2 * AXIAL_BITS)) | ((q & AXIAL_MASK) << AXIAL_BITS) | (r & AXIAL_MASK)


def _sign_extend(v: int) -> int:
    return v - (1 << AXIAL_BITS) if v & (1 << (AXIAL_BITS - 1)) else v


def unpack(value: int) -> tuple[int, int, int]:
    value = int(value)
    if not (0 <= value < 1 << 64):
        raise RangeError(f"cell id {value} is not an unsigned 64-bit value")
    resolution = value >> (2 * AXIAL_BITS)
    q = _sign_extend((value >> AXIAL_BITS) & AXIAL_MASK)
    r = _sign_extend(value & AXIAL_MASK)
    return resolution, q, r


def pack_array(resolution, q, r) -> np.ndarray:
    """Vectorized :func:`pack`; returns ``uint64``."""
    q = np.asarray(q, dtype=np.int64)
    r = np.asarray(r, dtype=np.int64)
    if np.any((q < AXIAL_MIN) | (q > AXIAL_MAX) | (r < AXIAL_MIN) | (r > AXIAL_MAX)):
        raise RangeError(f"axial coordinates do not fit in {AXIAL_BITS} signed bits")
    res = np.broadcast_to(np.asarray(resolution, dtype=np.uint64), q.shape)
    if np.any(res > MAX_RESOLUTION):
        raise RangeError(f"resolution does not fit in {RES_BITS} bits")
    mask = np.uint64(AXIAL_MASK)
    return (
        (res << np.uint64(2 * AXIAL_BITS))
        | ((q.astype(np.uint64) & mask) << np.uint64(AXIAL_BITS))
        | (r.astype(np.uint64) & mask)
    )


def unpack_array(values) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    values = np.asarray(values, dtype=np.uint64)
    mask = np.uint64(AXIAL_MASK)
    res = (values >> np.uint64(2 * AXIAL_BITS)).astype(np.int64)
    q = ((values >> np.uint64(AXIAL_BITS)) & mask).astype(np.int64)
    r = (values & mask).astype(np.int64)
    half = 1 << (AXIAL_BITS - 1)
    q = np.where(q >= half, q - (1 << AXIAL_BITS), q)
    r = np.where(r >= half, r - (1 << AXIAL_BITS), r)
    return res, q, r


def project(lat, lon, cfg: GridConfig) -> tuple[np.ndarray, np.ndarray]:
    """Equirectangular projection to meters east/north of the origin."""
    lat = np.asarray(lat, dtype=np.float64)
    lon = np.asarray(lon, dtype=np.float64)
    x = np.radians(lon - cfg.origin.lon) * cfg._lon_scale
    y = np.radians(lat - cfg.origin.lat) * EARTH_RADIUS_M
    return x, y


def unproject(x, y, cfg: GridConfig) -> tuple[np.ndarray, np.ndarray]:
    lon = cfg.origin.lon + np.degrees(np.asarray(x, dtype=np.float64) / cfg._lon_scale)
    lat = cfg.origin.lat + np.degrees(np.asarray(y, dtype=np.float64) / EARTH_RADIUS_M)
    return lat, lon


def axial_center(q, r, edge: float) -> tuple[np.ndarray, np.ndarray]:
    q = np.asarray(q, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    return 1.5 * edge * q, _SQRT3 * edge * (r + 0.5 * q)


def _round_half_away(v: np.ndarray) -> np.ndarray:
    # Snap float noise onto exact half-integers so boundary points always
    # take the same branch of the tie-break.
    fl = np.floor(v)
    v = np.where(np.abs(v - fl - 0.5) < _HALF_SNAP, fl + 0.5, v)
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


def cube_round(qf, rf) -> tuple[np.ndarray, np.ndarray]:
    """Round fractional axial coordinates to the containing hexagon.

    Each cube coordinate is rounded (half away from zero) and the one with
    the largest rounding error is recomputed from the other two.
    """
    x = np.asarray(qf, dtype=np.float64)
    z = np.asarray(rf, dtype=np.float64)
    y = -x - z
    rx, ry, rz = _round_half_away(x), _round_half_away(y), _round_half_away(z)
    dx, dy, dz = np.abs(rx - x), np.abs(ry - y), np.abs(rz - z)
    fix_x = (dx > dy) & (dx > dz)
    fix_y = ~fix_x & (dy > dz)
    fix_z = ~fix_x & ~fix_y
    rx = np.where(fix_x, -ry - rz, rx)
    rz = np.where(fix_z, -rx - ry, rz)
    return rx.astype(np.int64), rz.astype(np.int64)


def axial_of_xy(x, y, edge: float) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    qf = (2.0 / 3.0) * x / edge
    rf = (-x / 3.0 + (_SQRT3 / 3.0) * y) / edge
    return cube_round(qf, rf)


def cells_of(lat, lon, cfg: GridConfig) -> np.ndarray:
    """Vectorized :func:`cell_of`; returns packed ``uint64`` ids."""
    check_coord(lat, lon)
    x, y = project(lat, lon, cfg)
    q, r = axial_of_xy(x, y, cfg.edge)
    return pack_array(cfg.resolution, q, r)


def cell_of(coord: GeoCoord, cfg: GridConfig) -> CellId:
    x, y = project(coord.lat, coord.lon, cfg)
    q, r = axial_of_xy(x, y, cfg.edge)
    return CellId(cfg.resolution, int(q), int(r))


def centroids_of(cells, cfg: GridConfig) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized :func:`centroid_of` over packed ids; returns ``(lat, lon)``."""
    res, q, r = unpack_array(cells)
    if np.any(res != cfg.resolution):
        bad = np.asarray(cells, dtype=np.uint64)[res != cfg.resolution][:3]
        raise ConfigError(f"cells {bad.tolist()} are not at grid resolution {cfg.resolution}")
    x, y = axial_center(q, r, cfg.edge)
    lat, lon = unproject(x, y, cfg)
    check_coord(lat, lon)
    return lat, lon


def centroid_of(cell: CellId, cfg: GridConfig) -> GeoCoord:
    if cell.resolution != cfg.resolution:
        raise ConfigError(f"cell resolution {cell.resolution} != grid resolution {cfg.resolution}")
    x, y = axial_center(cell.q, cell.r, cfg.edge)
    lat, lon = unproject(x, y, cfg)
    return GeoCoord(float(lat), float(lon))


def neighbors(cell: CellId) -> list[CellId]:
    """The six adjacent cells in canonical order E, NE, NW, W, SW, SE."""
    return [CellId(cell.resolution, cell.q + dq, cell.r + dr) for dq, dr in NEIGHBOR_OFFSETS]


def hex_distance(a: CellId, b: CellId) -> int:
    dq, dr = a.q - b.q, a.r - b.r
    return (abs(dq) + abs(dr) + abs(dq + dr)) // 2
