"""Geodesic primitives, the hexagonal grid, station buffers and stratum zones."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

EARTH_RADIUS_M = 6_371_000.0
MAX_GRID_RADIUS_M = 100_000.0
SQRT3 = math.sqrt(3.0)


class GeoDomainError(ValueError):
    """A point lies outside the domain where the local projection is trusted."""


@dataclass(frozen=True)
class GeoPoint:
    lat: float
    lon: float

    def __post_init__(self):
        lat, lon = float(self.lat), float(self.lon)
        if math.isnan(lat) or math.isnan(lon):
            raise ValueError("GeoPoint coordinates must not be NaN")
        if not -90.0 <= lat <= 90.0:
            raise ValueError(f"lat out of range: {lat}")
        if not -180.0 <= lon <= 180.0:
            raise ValueError(f"lon out of range: {lon}")
        object.__setattr__(self, "lat", lat)
        object.__setattr__(self, "lon", lon)


def haversine(lat1, lon1, lat2, lon2):
    """Great-circle distance in meters on a sphere of radius 6,371 km.

    Broadcasts over numpy arrays.
    """
    p1 = np.radians(lat1)
    p2 = np.radians(lat2)
    dphi = p2 - p1
    dlmb = np.radians(np.asarray(lon2) - np.asarray(lon1))
    h = np.sin(dphi / 2.0) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dlmb / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_M * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))


def geodesic_distance(a: GeoPoint, b: GeoPoint) -> float:
    return float(haversine(a.lat, a.lon, b.lat, b.lon))


# --------------------------------------------------------------------------
# local azimuthal-equidistant projection


class LocalProjection:
    """Spherical azimuthal-equidistant projection centred on ``origin``.

    Distances and bearings from the origin are preserved exactly; points
    farther than ``max_radius_m`` are refused.
    """

    def __init__(self, origin: GeoPoint, max_radius_m: float = MAX_GRID_RADIUS_M):
        self.origin = origin
        self.max_radius_m = max_radius_m
        self._phi0 = math.radians(origin.lat)
        self._lmb0 = math.radians(origin.lon)

    def forward(self, lat, lon, check: bool = True):
        lat = np.asarray(lat, dtype=float)
        lon = np.asarray(lon, dtype=float)
        phi = np.radians(lat)
        dl = np.radians(lon) - self._lmb0
        dist = haversine(self.origin.lat, self.origin.lon, lat, lon)
        if check and np.any(dist > self.max_radius_m):
            worst = float(np.max(dist))
            raise GeoDomainError(
                f"point {worst:.0f} m from grid origin exceeds {self.max_radius_m:.0f} m")
        c = dist / EARTH_RADIUS_M
        with np.errstate(invalid="ignore", divide="ignore"):
            k = np.where(c > 1e-12, c / np.sin(c), 1.0)
        x = EARTH_RADIUS_M * k * np.cos(phi) * np.sin(dl)
        y = EARTH_RADIUS_M * k * (math.cos(self._phi0) * np.sin(phi)
                                  - math.sin(self._phi0) * np.cos(phi) * np.cos(dl))
        return x, y

    def inverse(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        rho = np.hypot(x, y)
        c = rho / EARTH_RADIUS_M
        sin_c, cos_c = np.sin(c), np.cos(c)
        with np.errstate(invalid="ignore", divide="ignore"):
            ratio = np.where(rho > 0, y * sin_c / np.where(rho > 0, rho, 1.0), 0.0)
        phi = np.arcsin(np.clip(cos_c * math.sin(self._phi0) + ratio * math.cos(self._phi0), -1, 1))
        lmb = self._lmb0 + np.arctan2(
            x * sin_c,
            rho * math.cos(self._phi0) * cos_c - y * math.sin(self._phi0) * sin_c)
        lon = (np.degrees(lmb) + 180.0) % 360.0 - 180.0
        return np.degrees(phi), lon


# --------------------------------------------------------------------------
# hexagonal grid


@dataclass(frozen=True)
class GridSpec:
    origin_lat: float
    origin_lon: float
    side_m: float = 100.0

    def __post_init__(self):
        GeoPoint(self.origin_lat, self.origin_lon)
        if not self.side_m > 0:
            raise ValueError("side_m must be positive")


@dataclass(frozen=True)
class HexCell:
    cell_id: str
    center: GeoPoint
    side_m: float = 100.0


def _cube_round(q, r):
    s = -q - r
    rq, rr, rs = np.round(q), np.round(r), np.round(s)
    dq, dr, ds = np.abs(rq - q), np.abs(rr - r), np.abs(rs - s)
    fix_q = (dq > dr) & (dq > ds)
    fix_r = ~fix_q & (dr > ds)
    rq = np.where(fix_q, -rr - rs, rq)
    rr = np.where(fix_r, -rq - rs, rr)
    return rq.astype(np.int64), rr.astype(np.int64)


class HexGrid:
    """Flat-top hexagonal tiling laid out in a local projection.

    Cells are addressed by axial coordinates ``(q, r)``; ``cell_id`` is the
    string ``"q:r"``, so identifiers are stable for a fixed origin and side.
    """

    def __init__(self, spec: GridSpec):
        self.spec = spec
        self.side_m = float(spec.side_m)
        self.projection = LocalProjection(GeoPoint(spec.origin_lat, spec.origin_lon))

    @classmethod
    def from_origin(cls, lat: float, lon: float, side_m: float = 100.0) -> "HexGrid":
        return cls(GridSpec(lat, lon, side_m))

    def axial_from_xy(self, x, y):
        s = self.side_m
        q = (2.0 / 3.0) * np.asarray(x, dtype=float) / s
        r = (-1.0 / 3.0 * np.asarray(x, dtype=float) + SQRT3 / 3.0 * np.asarray(y, dtype=float)) / s
        return _cube_round(q, r)

    def center_xy(self, q, r):
        q = np.asarray(q, dtype=float)
        r = np.asarray(r, dtype=float)
        return self.side_m * 1.5 * q, self.side_m * SQRT3 * (r + q / 2.0)

    def axial(self, lat, lon):
        x, y = self.projection.forward(lat, lon)
        return self.axial_from_xy(x, y)

    def cell_ids(self, lat, lon) -> np.ndarray:
        q, r = self.axial(lat, lon)
        return axial_ids(q, r)

    def cell(self, q: int, r: int) -> HexCell:
        x, y = self.center_xy(q, r)
        lat, lon = self.projection.inverse(x, y)
        return HexCell(f"{int(q)}:{int(r)}", GeoPoint(float(lat), float(lon)), self.side_m)

    def cell_from_id(self, cell_id: str) -> HexCell:
        q, r = (int(v) for v in cell_id.split(":"))
        return self.cell(q, r)

    def assign(self, p: GeoPoint) -> HexCell:
        q, r = self.axial(p.lat, p.lon)
        return self.cell(int(q), int(r))

    def vertices_xy(self, q: int, r: int) -> np.ndarray:
        cx, cy = self.center_xy(q, r)
        ang = np.radians(np.arange(6) * 60.0)
        return np.column_stack([cx + self.side_m * np.cos(ang), cy + self.side_m * np.sin(ang)])


def axial_ids(q, r) -> np.ndarray:
    """``"q:r"`` labels for arrays of axial coordinates."""
    q = np.asarray(q, dtype=np.int64)
    r = np.asarray(r, dtype=np.int64)
    if q.size == 0:
        return np.empty(0, dtype=object)
    # pack both coordinates into one key; |q|, |r| stay far below 2**30
    key = (q.ravel() << 32) + (r.ravel() + (1 << 31))
    uniq, inv = np.unique(key, return_inverse=True)
    uq = uniq >> 32
    ur = (uniq & 0xFFFFFFFF) - (1 << 31)
    labels = np.array([f"{a}:{b}" for a, b in zip(uq.tolist(), ur.tolist())], dtype=object)
    return labels[inv.ravel()].reshape(q.shape)


def hex_assign(p: GeoPoint, grid: GridSpec | HexGrid) -> HexCell:
    if isinstance(grid, GridSpec):
        grid = HexGrid(grid)
    return grid.assign(p)


# --------------------------------------------------------------------------
# stations


@dataclass(frozen=True)
class Station:
    station_id: str
    location: GeoPoint
    line: str
    buffer_m: float = 500.0

    def __post_init__(self):
        if self.line not in ("treatment", "control"):
            raise ValueError(f"station line must be 'treatment' or 'control', got {self.line!r}")
        if not self.buffer_m > 0:
            raise ValueError("buffer_m must be positive")


def nearest_station_index(lat, lon, stations: Sequence[Station]) -> np.ndarray:
    """Index into ``stations`` of the nearest station whose buffer contains
    each point, or -1.

    Exact distance ties go to the smaller ``station_id``.
    """
    if not stations:
        raise ValueError("station list must not be empty")
    lat = np.atleast_1d(np.asarray(lat, dtype=float))
    lon = np.atleast_1d(np.asarray(lon, dtype=float))
    order = sorted(range(len(stations)), key=lambda i: stations[i].station_id)
    best = np.full(lat.shape, -1, dtype=np.int64)
    best_d = np.full(lat.shape, np.inf)
    for i in order:
        st = stations[i]
        d = haversine(st.location.lat, st.location.lon, lat, lon)
        better = (d <= st.buffer_m) & (d < best_d)
        best[better] = i
        best_d[better] = d[better]
    return best


def in_buffer(p: GeoPoint, stations: Sequence[Station]) -> Optional[Station]:
    idx = int(nearest_station_index(p.lat, p.lon, stations)[0])
    return stations[idx] if idx >= 0 else None


def read_stations(path, default_buffer_m: float = 500.0) -> list[Station]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            buf = row.get("buffer_m") or ""
            out.append(Station(
                station_id=row["station_id"].strip(),
                location=GeoPoint(float(row["lat"]), float(row["lon"])),
                line=row["line"].strip(),
                buffer_m=float(buf) if buf.strip() else default_buffer_m,
            ))
    ids = [s.station_id for s in out]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate station_id in stations file")
    return out


def write_stations(path, stations: Iterable[Station]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["station_id", "lat", "lon", "line", "buffer_m"])
        for s in stations:
            w.writerow([s.station_id, repr(s.location.lat), repr(s.location.lon), s.line, repr(float(s.buffer_m))])


# --------------------------------------------------------------------------
# polygons: stratum zones and regions


def _segments_cross(p1, p2, p3, p4) -> bool:
    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    d1, d2 = orient(p3, p4, p1), orient(p3, p4, p2)
    d3, d4 = orient(p1, p2, p3), orient(p1, p2, p4)
    return ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0)) and 0 not in (d1, d2, d3, d4)


def ring_is_simple(ring: np.ndarray) -> bool:
    """True when no two non-adjacent edges of the closed ring cross."""
    n = len(ring) - 1
    for i in range(n):
        for j in range(i + 2, n):
            if i == 0 and j == n - 1:
                continue
            if _segments_cross(ring[i], ring[i + 1], ring[j], ring[j + 1]):
                return False
    return True


@dataclass(frozen=True, eq=False)
class Zone:
    """Polygon (outer ring plus optional holes) in lon/lat order, with an attribute."""

    zone_id: str
    rings: tuple = field(repr=False)

    @staticmethod
    def _prepare(rings) -> tuple:
        out = []
        for ring in rings:
            arr = np.asarray(ring, dtype=float)
            if arr.ndim != 2 or arr.shape[1] < 2 or len(arr) < 4:
                raise ValueError("polygon ring needs at least 4 positions")
            arr = arr[:, :2]
            if not np.array_equal(arr[0], arr[-1]):
                raise ValueError("polygon ring is not closed")
            if not ring_is_simple(arr):
                raise ValueError("polygon ring self-intersects")
            out.append(arr)
        return tuple(out)

    def contains(self, lat, lon) -> np.ndarray:
        """Even-odd ray casting over every ring."""
        x = np.atleast_1d(np.asarray(lon, dtype=float))
        y = np.atleast_1d(np.asarray(lat, dtype=float))
        inside = np.zeros(x.shape, dtype=bool)
        for ring in self.rings:
            xs, ys = ring[:-1, 0], ring[:-1, 1]
            xe, ye = ring[1:, 0], ring[1:, 1]
            for x1, y1, x2, y2 in zip(xs, ys, xe, ye):
                if y1 == y2:
                    continue
                crosses = (y1 > y) != (y2 > y)
                xint = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
                inside ^= crosses & (x < xint)
        return inside

    def centroid(self) -> GeoPoint:
        ring = self.rings[0]
        x, y = ring[:, 0], ring[:, 1]
        cross = x[:-1] * y[1:] - x[1:] * y[:-1]
        a = cross.sum() / 2.0
        cx = ((x[:-1] + x[1:]) * cross).sum() / (6.0 * a)
        cy = ((y[:-1] + y[1:]) * cross).sum() / (6.0 * a)
        return GeoPoint(cy, cx)


@dataclass(frozen=True, eq=False)
class StratumZone(Zone):
    stratum: int = 1

    def __post_init__(self):
        if int(self.stratum) not in range(1, 7):
            raise ValueError(f"stratum must be in 1..6, got {self.stratum}")
        object.__setattr__(self, "rings", Zone._prepare(self.rings))


@dataclass(frozen=True, eq=False)
class Region(Zone):
    def __post_init__(self):
        object.__setattr__(self, "rings", Zone._prepare(self.rings))


def lookup_zone_index(lat, lon, zones: Sequence[Zone]) -> np.ndarray:
    """Index of the first zone (in order) containing each point, else -1."""
    lat = np.atleast_1d(np.asarray(lat, dtype=float))
    lon = np.atleast_1d(np.asarray(lon, dtype=float))
    out = np.full(lat.shape, -1, dtype=np.int64)
    for i, z in enumerate(zones):
        todo = out < 0
        if not todo.any():
            break
        bounds = np.vstack(z.rings)
        cand = todo & (lon >= bounds[:, 0].min()) & (lon <= bounds[:, 0].max()) \
            & (lat >= bounds[:, 1].min()) & (lat <= bounds[:, 1].max())
        if cand.any():
            idx = np.flatnonzero(cand)
            hit = z.contains(lat[idx], lon[idx])
            out[idx[hit]] = i
    return out


def stratum_lookup(p: GeoPoint, zones: Sequence[StratumZone]) -> Optional[int]:
    idx = int(lookup_zone_index(p.lat, p.lon, zones)[0])
    return zones[idx].stratum if idx >= 0 else None


def strata_for(lat, lon, zones: Sequence[StratumZone]) -> np.ndarray:
    """Vectorised stratum lookup; 0 marks points outside every zone."""
    idx = lookup_zone_index(lat, lon, zones)
    table = np.array([0] + [z.stratum for z in zones], dtype=np.int64)
    return table[idx + 1]


def _feature_rings(geom: dict) -> list:
    if geom["type"] == "Polygon":
        return list(geom["coordinates"])
    if geom["type"] == "MultiPolygon":
        return [ring for poly in geom["coordinates"] for ring in poly]
    raise ValueError(f"unsupported geometry type {geom['type']!r}")


def read_stratum_zones(path) -> list[StratumZone]:
    data = json.loads(Path(path).read_text())
    zones = []
    for i, feat in enumerate(data["features"]):
        props = feat.get("properties") or {}
        if "stratum" not in props:
            raise ValueError(f"feature {i} lacks the 'stratum' property")
        zid = str(props.get("zone_id", i))
        zones.append(StratumZone(zid, tuple(_feature_rings(feat["geometry"])), int(props["stratum"])))
    return zones


def read_regions(path) -> list[Region]:
    data = json.loads(Path(path).read_text())
    regions = []
    for i, feat in enumerate(data["features"]):
        props = feat.get("properties") or {}
        if "region_id" not in props:
            raise ValueError(f"feature {i} lacks the 'region_id' property")
        regions.append(Region(str(props["region_id"]), tuple(_feature_rings(feat["geometry"]))))
    return regions


def zones_to_geojson(zones: Sequence[Zone]) -> dict:
    feats = []
    for z in zones:
        props = {"zone_id": z.zone_id}
        if isinstance(z, StratumZone):
            props["stratum"] = int(z.stratum)
        else:
            props = {"region_id": z.zone_id}
        feats.append({
            "type": "Feature",
            "properties": props,
            "geometry": {"type": "Polygon",
                         "coordinates": [[[float(a), float(b)] for a, b in ring] for ring in z.rings]},
        })
    return {"type": "FeatureCollection", "features": feats}
