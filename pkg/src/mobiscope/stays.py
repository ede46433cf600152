"""Stay detection, home inference, trips outside the home and POI matching."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import pandas as pd
from numba import njit
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import geo
from ._validation import check_columns, check_ping_frame, check_positive
from .timeutil import DEFAULT_TZ, local_calendar, local_month_labels, month_labels, parse_clock

STAY_COLUMNS = ["device_id", "start", "end", "lat", "lon", "ping_count"]
HOME_COLUMNS = ["device_id", "month", "lat", "lon", "night_pings"]

_R = geo.EARTH_RADIUS_M
_DEG = math.pi / 180.0


@njit(cache=True, nogil=True)
def _hav(lat1, lon1, lat2, lon2):
    p1 = lat1 * _DEG
    p2 = lat2 * _DEG
    s1 = math.sin((p2 - p1) / 2.0)
    s2 = math.sin((lon2 - lon1) * _DEG / 2.0)
    h = s1 * s1 + math.cos(p1) * math.cos(p2) * s2 * s2
    if h > 1.0:
        h = 1.0
    return 2.0 * _R * math.asin(math.sqrt(h))


@njit(cache=True, nogil=True)
def _stay_kernel(bounds, t, lat, lon, radius, min_dur, max_dur, first, last):
    """Greedy centroid clustering over contiguous per-device segments.

    ``bounds[k]:bounds[k+1]`` is the k-th device's time-ordered slice.
    Writes member index ranges of emitted stays into ``first``/``last`` and
    returns their number.
    """
    n_out = 0
    slack = 1e-6
    for seg in range(len(bounds) - 1):
        i = bounds[seg]
        end = bounds[seg + 1]
        while i < end:
            slat = lat[i]
            slon = lon[i]
            k = 1
            bound = 0.0
            j = i + 1
            while j < end:
                if t[j] - t[i] > max_dur:
                    break
                clat = slat / k
                clon = slon / k
                if _hav(lat[j], lon[j], clat, clon) > radius:
                    break
                nlat = (slat + lat[j]) / (k + 1)
                nlon = (slon + lon[j]) / (k + 1)
                nb = bound + _hav(clat, clon, nlat, nlon)
                dj = _hav(lat[j], lon[j], nlat, nlon)
                if dj > nb:
                    nb = dj
                if nb > radius - slack:
                    # the cheap bound is inconclusive; measure every member
                    nb = 0.0
                    for m in range(i, j + 1):
                        d = _hav(lat[m], lon[m], nlat, nlon)
                        if d > nb:
                            nb = d
                    if nb > radius:
                        break
                slat += lat[j]
                slon += lon[j]
                k += 1
                bound = nb
                j += 1
            dur = t[j - 1] - t[i]
            if dur >= min_dur and dur <= max_dur:
                first[n_out] = i
                last[n_out] = j - 1
                n_out += 1
            i = j
    return n_out


def _segment_bounds(codes: np.ndarray) -> np.ndarray:
    change = np.flatnonzero(np.diff(codes)) + 1
    return np.concatenate([[0], change, [len(codes)]]).astype(np.int64)


def _split_bounds(bounds: np.ndarray, n_chunks: int) -> list[np.ndarray]:
    """Cut the device boundary list into ``n_chunks`` slices of similar ping mass."""
    if n_chunks <= 1 or len(bounds) <= 2:
        return [bounds]
    total = bounds[-1]
    targets = np.linspace(0, total, n_chunks + 1)[1:-1]
    cuts = np.unique(np.searchsorted(bounds, targets))
    cuts = cuts[(cuts > 0) & (cuts < len(bounds) - 1)]
    edges = np.concatenate([[0], cuts, [len(bounds) - 1]])
    return [bounds[a:b + 1] for a, b in zip(edges[:-1], edges[1:]) if b > a]


def _run_stay_kernel(bounds, t, lat, lon, radius, min_dur, max_dur, n_jobs):
    def work(b):
        lo, hi = b[0], b[-1]
        first = np.empty(max(hi - lo, 1), dtype=np.int64)
        last = np.empty_like(first)
        n = _stay_kernel(b, t, lat, lon, radius, min_dur, max_dur, first, last)
        return first[:n], last[:n]

    chunks = _split_bounds(bounds, n_jobs)
    if len(chunks) == 1:
        results = [work(chunks[0])]
    else:
        with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
            results = list(pool.map(work, chunks))
    first = np.concatenate([r[0] for r in results]) if results else np.empty(0, np.int64)
    last = np.concatenate([r[1] for r in results]) if results else np.empty(0, np.int64)
    return first, last


def sort_pings(pings: pd.DataFrame) -> tuple[pd.DataFrame, np.ndarray]:
    """Stable sort by ``(device_id, t)``; returns the frame and int device codes."""
    codes, _ = pd.factorize(pings["device_id"], sort=True)
    order = np.lexsort((pings["t"].to_numpy(), codes))
    if np.all(order[1:] > order[:-1]):
        return pings.reset_index(drop=True), codes
    return pings.iloc[order].reset_index(drop=True), codes[order]


class StayDetector(TransformerMixin, BaseEstimator):
    """Detect dwell episodes in ping streams.

    Pings are clustered greedily in time order: a ping joins the current
    cluster while it lies within ``radius_m`` of the running centroid and
    every member stays within ``radius_m`` of the updated centroid. A broken
    cluster becomes a stay when it lasts between ``min_duration_s`` and
    ``max_duration_s``; a cluster reaching ``max_duration_s`` is cut there and
    the next ping starts a fresh cluster.

    Parameters
    ----------
    radius_m : float, default=100
    min_duration_s : int, default=300
    max_duration_s : int, default=86400
    n_jobs : int, default=1
        Worker threads; devices are partitioned between them and the output
        does not depend on this value.
    """

    def __init__(self, radius_m=100.0, min_duration_s=300, max_duration_s=86400, n_jobs=1):
        self.radius_m = radius_m
        self.min_duration_s = min_duration_s
        self.max_duration_s = max_duration_s
        self.n_jobs = n_jobs

    def fit(self, X=None, y=None):
        check_positive(radius_m=self.radius_m, min_duration_s=self.min_duration_s,
                       max_duration_s=self.max_duration_s)
        if self.max_duration_s < self.min_duration_s:
            raise ValueError("max_duration_s must be >= min_duration_s")
        self.fitted_ = True
        return self

    def transform(self, X, return_members=False):
        """Return one row per stay, ordered by ``(device_id, start)``.

        With ``return_members`` the sorted ping frame and the ``first``/``last``
        member positions of each stay are returned as well.
        """
        if not hasattr(self, "fitted_"):
            self.fit()
        pings = check_ping_frame(X)
        pings, codes = sort_pings(pings)
        t = pings["t"].to_numpy(dtype=np.int64)
        lat = pings["lat"].to_numpy(dtype=np.float64)
        lon = pings["lon"].to_numpy(dtype=np.float64)
        bounds = _segment_bounds(codes)
        first, last = _run_stay_kernel(bounds, t, lat, lon, float(self.radius_m),
                                       int(self.min_duration_s), int(self.max_duration_s),
                                       max(int(self.n_jobs or 1), 1))
        stays = _assemble_stays(pings["device_id"].to_numpy(), t, lat, lon, first, last)
        if return_members:
            return stays, pings, first, last
        return stays


@njit(cache=True, nogil=True)
def _member_means(lat, lon, first, last, out_lat, out_lon):
    for s in range(len(first)):
        a = 0.0
        b = 0.0
        for m in range(first[s], last[s] + 1):
            a += lat[m]
            b += lon[m]
        k = last[s] - first[s] + 1
        out_lat[s] = a / k
        out_lon[s] = b / k


def _assemble_stays(device_ids, t, lat, lon, first, last) -> pd.DataFrame:
    clat = np.empty(len(first))
    clon = np.empty(len(first))
    _member_means(lat, lon, first, last, clat, clon)
    return pd.DataFrame({
        "device_id": device_ids[first] if len(first) else np.empty(0, dtype=object),
        "start": t[first],
        "end": t[last],
        "lat": clat,
        "lon": clon,
        "ping_count": (last - first + 1).astype(np.int64),
    })


def detect_stays(pings: pd.DataFrame, radius_m=100.0, min_duration_s=300,
                 max_duration_s=86400) -> pd.DataFrame:
    """Stays of a single device whose pings are already in time order."""
    pings = check_ping_frame(pings)
    if pings["device_id"].nunique() > 1:
        raise ValueError("detect_stays expects the pings of a single device")
    t = pings["t"].to_numpy(dtype=np.int64)
    if np.any(np.diff(t) < 0):
        raise ValueError("pings are not sorted by timestamp")
    det = StayDetector(radius_m, min_duration_s, max_duration_s).fit()
    return det.transform(pings)


# --------------------------------------------------------------------------
# homes


@njit(cache=True, nogil=True)
def _home_kernel(bounds, lat, lon, t, radius, min_count, out_group, out_lat, out_lon, out_n):
    """Leader clustering of night pings per (device, month) group.

    A ping joins the nearest existing cluster whose running centroid lies
    within ``radius``; otherwise it opens a new cluster. The home is the
    cluster with most pings, ties going to the cluster opened first.
    """
    n_out = 0
    for g in range(len(bounds) - 1):
        a = bounds[g]
        b = bounds[g + 1]
        size = b - a
        slat = np.zeros(size)
        slon = np.zeros(size)
        cnt = np.zeros(size, dtype=np.int64)
        nc = 0
        for p in range(a, b):
            best = -1
            best_d = 0.0
            for c in range(nc):
                d = _hav(lat[p], lon[p], slat[c] / cnt[c], slon[c] / cnt[c])
                if d <= radius and (best < 0 or d < best_d):
                    best = c
                    best_d = d
            if best < 0:
                best = nc
                nc += 1
            slat[best] += lat[p]
            slon[best] += lon[p]
            cnt[best] += 1
        top = 0
        for c in range(1, nc):
            if cnt[c] > cnt[top]:
                top = c
        if nc > 0 and cnt[top] >= min_count:
            out_group[n_out] = g
            out_lat[n_out] = slat[top] / cnt[top]
            out_lon[n_out] = slon[top] / cnt[top]
            out_n[n_out] = cnt[top]
            n_out += 1
    return n_out


def night_anchor_month(t, tz: str = DEFAULT_TZ, night_start="22:30", night_end="05:30"):
    """Flag night pings and the month of the night each belongs to.

    The window ``[night_start, night_end)`` may wrap midnight; a night is
    attributed to the calendar month of its evening start.
    """
    cal = local_calendar(t, tz)
    lo, hi = parse_clock(night_start), parse_clock(night_end)
    minute = cal["minute"]
    if lo > hi:
        night = (minute >= lo) | (minute < hi)
        morning = minute < hi
    else:
        night = (minute >= lo) & (minute < hi)
        morning = np.zeros(len(minute), dtype=bool)
    anchor_day = cal["day"] - morning.astype(np.int64)
    anchor = pd.to_datetime(anchor_day, unit="D")
    month_idx = np.asarray(anchor.year, dtype=np.int64) * 12 + np.asarray(anchor.month, dtype=np.int64) - 1
    return night, month_idx


class HomeLocator(TransformerMixin, BaseEstimator):
    """Monthly home location from night-time pings.

    Night pings (local ``[night_start, night_end)``) of each device-month are
    grouped into ``radius_m`` clusters; the home is the busiest cluster and
    is reported only when it holds at least ``min_night_pings`` pings.
    """

    def __init__(self, radius_m=100.0, min_night_pings=5, night_start="22:30", night_end="05:30",
                 timezone=DEFAULT_TZ):
        self.radius_m = radius_m
        self.min_night_pings = min_night_pings
        self.night_start = night_start
        self.night_end = night_end
        self.timezone = timezone

    def fit(self, X=None, y=None):
        check_positive(radius_m=self.radius_m, min_night_pings=self.min_night_pings)
        parse_clock(self.night_start)
        parse_clock(self.night_end)
        self.fitted_ = True
        return self

    def transform(self, X):
        if not hasattr(self, "fitted_"):
            self.fit()
        pings = check_ping_frame(X)
        t = pings["t"].to_numpy(dtype=np.int64)
        night, month_idx = night_anchor_month(t, self.timezone, self.night_start, self.night_end)
        sel = np.flatnonzero(night)
        codes, devices = pd.factorize(pings["device_id"].to_numpy()[sel], sort=True)
        m = month_idx[sel]
        order = np.lexsort((t[sel], m, codes))
        codes, m, sel = codes[order], m[order], sel[order]
        key = codes.astype(np.int64) * 100_000 + (m - (m.min() if len(m) else 0))
        bounds = _segment_bounds(key) if len(key) else np.zeros(1, dtype=np.int64)
        n_groups = len(bounds) - 1
        out_group = np.empty(n_groups, dtype=np.int64)
        out_lat = np.empty(n_groups)
        out_lon = np.empty(n_groups)
        out_n = np.empty(n_groups, dtype=np.int64)
        lat = pings["lat"].to_numpy(dtype=float)[sel]
        lon = pings["lon"].to_numpy(dtype=float)[sel]
        n = _home_kernel(bounds, lat, lon, t[sel], float(self.radius_m), int(self.min_night_pings),
                         out_group, out_lat, out_lon, out_n)
        starts = bounds[out_group[:n]]
        return pd.DataFrame({
            "device_id": np.asarray(devices, dtype=object)[codes[starts]] if n else np.empty(0, dtype=object),
            "month": month_labels(m[starts]),
            "lat": out_lat[:n],
            "lon": out_lon[:n],
            "night_pings": out_n[:n],
        })


def infer_homes(pings: pd.DataFrame, radius_m=100.0, min_night_pings=5, tz: str = DEFAULT_TZ,
                night_start="22:30", night_end="05:30") -> pd.DataFrame:
    return HomeLocator(radius_m, min_night_pings, night_start, night_end, tz).fit().transform(pings)


# --------------------------------------------------------------------------
# trips and annotation


def stay_months(stays: pd.DataFrame, tz: str = DEFAULT_TZ) -> np.ndarray:
    return local_month_labels(stays["start"].to_numpy(dtype=np.int64), tz)


def annotate_stays(stays: pd.DataFrame, grid: geo.HexGrid | None = None, zones=None,
                   regions=None) -> pd.DataFrame:
    """Add ``hex_id``, ``stratum`` (0 = none) and ``region_id`` columns."""
    out = stays.copy()
    lat = out["lat"].to_numpy(dtype=float)
    lon = out["lon"].to_numpy(dtype=float)
    if grid is not None:
        x, y = grid.projection.forward(lat, lon, check=False)
        q, r = grid.axial_from_xy(x, y)
        far = geo.haversine(grid.spec.origin_lat, grid.spec.origin_lon, lat, lon) > grid.projection.max_radius_m
        ids = geo.axial_ids(q, r)
        ids[far] = ""
        out["hex_id"] = ids
    if zones is not None:
        out["stratum"] = geo.strata_for(lat, lon, zones) if zones else np.zeros(len(out), dtype=np.int64)
    if regions is not None:
        idx = geo.lookup_zone_index(lat, lon, regions) if regions else np.full(len(out), -1)
        names = np.array([""] + [r.zone_id for r in regions], dtype=object)
        out["region_id"] = names[idx + 1]
    return out


def trips_outside_home(stays: pd.DataFrame, homes: pd.DataFrame, radius_m=100.0,
                       tz: str = DEFAULT_TZ, grid=None, zones=None, regions=None) -> pd.DataFrame:
    """Stays farther than ``radius_m`` from the device's home that month.

    Device-months without a home contribute nothing.
    """
    check_columns(stays, STAY_COLUMNS, "stays")
    check_columns(homes, ["device_id", "month", "lat", "lon"], "homes")
    s = stays.copy()
    s["month"] = stay_months(s, tz)
    h = homes[["device_id", "month", "lat", "lon"]].rename(columns={"lat": "home_lat", "lon": "home_lon"})
    j = s.merge(h, on=["device_id", "month"], how="inner", validate="many_to_one")
    d = geo.haversine(j["lat"].to_numpy(), j["lon"].to_numpy(), j["home_lat"].to_numpy(), j["home_lon"].to_numpy())
    j = j[d > radius_m].drop(columns=["home_lat", "home_lon"])
    j = j.sort_values(["device_id", "start"], kind="stable").reset_index(drop=True)
    if grid is not None or zones is not None or regions is not None:
        j = annotate_stays(j, grid, zones, regions)
    return j


# --------------------------------------------------------------------------
# POI matching


@dataclass(frozen=True)
class POI:
    poi_id: str
    loc: geo.GeoPoint
    category: str = ""


def read_pois(path) -> pd.DataFrame:
    pois = pd.read_csv(path, dtype={"poi_id": str, "category": str}, keep_default_na=False)
    check_columns(pois, ["poi_id", "lat", "lon"], "pois")
    if pois["poi_id"].duplicated().any():
        raise ValueError("duplicate poi_id in POI file")
    return pois


class PoiMatcher(BaseEstimator):
    """Nearest point of interest within ``radius_m``; exact ties go to the
    smaller ``poi_id``.

    ``fit`` indexes POIs in a local plane; ``predict`` refines the planar
    candidates with great-circle distances.
    """

    def __init__(self, radius_m=50.0, k_candidates=16):
        self.radius_m = radius_m
        self.k_candidates = k_candidates

    def fit(self, X, y=None):
        check_positive(radius_m=self.radius_m)
        pois = check_columns(X, ["poi_id", "lat", "lon"], "pois")
        ids = pois["poi_id"].astype(str).to_numpy(dtype=object)
        if len(set(ids)) != len(ids):
            raise ValueError("poi_id must be unique")
        order = np.argsort(ids, kind="stable")
        self.poi_ids_ = ids[order]
        self.lat_ = pois["lat"].to_numpy(dtype=float)[order]
        self.lon_ = pois["lon"].to_numpy(dtype=float)[order]
        if len(ids):
            origin = geo.GeoPoint(float(np.mean(self.lat_)), float(np.mean(self.lon_)))
        else:
            origin = geo.GeoPoint(0.0, 0.0)
        self.projection_ = geo.LocalProjection(origin, max_radius_m=np.inf)
        x, y_ = self.projection_.forward(self.lat_, self.lon_, check=False)
        self.tree_ = cKDTree(np.column_stack([x, y_])) if len(ids) else None
        return self

    def _search_radius(self) -> float:
        # planar distances off the projection centre can shrink slightly
        return self.radius_m * 1.01 + 1.0

    def predict_index(self, lat, lon) -> np.ndarray:
        """Position of the matched POI in ``poi_ids_``, or -1."""
        check_is_fitted(self, "poi_ids_")
        lat = np.atleast_1d(np.asarray(lat, dtype=float))
        lon = np.atleast_1d(np.asarray(lon, dtype=float))
        out = np.full(len(lat), -1, dtype=np.int64)
        if self.tree_ is None or len(lat) == 0:
            return out
        x, y = self.projection_.forward(lat, lon, check=False)
        pts = np.column_stack([x, y])
        k = min(int(self.k_candidates), len(self.poi_ids_))
        _, cand = self.tree_.query(pts, k=k, distance_upper_bound=self._search_radius())
        cand = np.asarray(cand).reshape(len(lat), k)
        valid = cand < len(self.poi_ids_)
        safe = np.where(valid, cand, 0)
        d = geo.haversine(lat[:, None], lon[:, None], self.lat_[safe], self.lon_[safe])
        d = np.where(valid & (d <= self.radius_m), d, np.inf)
        # candidate indices are positions in the id-sorted arrays, so the
        # smallest index among equal distances is the smallest poi_id
        dmin = d.min(axis=1)
        tie_rank = np.where(d == dmin[:, None], safe, np.iinfo(np.int64).max)
        best = tie_rank.min(axis=1)
        out = np.where(np.isfinite(dmin), best, -1)
        saturated = np.flatnonzero(valid[:, -1]) if k == self.k_candidates else np.empty(0, np.int64)
        for i in saturated:
            near = self.tree_.query_ball_point(pts[i], self._search_radius())
            near = np.asarray(near, dtype=np.int64)
            dd = geo.haversine(lat[i], lon[i], self.lat_[near], self.lon_[near])
            ok = dd <= self.radius_m
            if ok.any():
                near, dd = near[ok], dd[ok]
                out[i] = near[dd == dd.min()].min()
            else:
                out[i] = -1
        return out

    def predict(self, X) -> np.ndarray:
        """Matched ``poi_id`` per row of a frame with ``lat``/``lon`` ('' if none)."""
        X = check_columns(X, ["lat", "lon"], "stays")
        idx = self.predict_index(X["lat"].to_numpy(), X["lon"].to_numpy())
        ids = np.concatenate([self.poi_ids_, np.array([""], dtype=object)])
        return ids[np.where(idx >= 0, idx, len(self.poi_ids_))]


def match_poi(stay, pois) -> str | None:
    """Single-stay convenience wrapper around :class:`PoiMatcher`."""
    matcher = pois if isinstance(pois, PoiMatcher) else PoiMatcher().fit(pois)
    lat = stay["lat"] if not hasattr(stay, "lat") else stay.lat
    lon = stay["lon"] if not hasattr(stay, "lon") else stay.lon
    idx = int(matcher.predict_index(lat, lon)[0])
    return None if idx < 0 else str(matcher.poi_ids_[idx])
