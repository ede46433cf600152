"""Synthetic two-arm city with a known injected treatment effect.

Devices live near treatment or control stations (plus a city-wide
background population that gives POIs a mixed visitor base). Every trip is
emitted as a tight ping cluster that the stay detector must recover, and
every night carries pings at home, so the full pipeline can be checked
against the generating ground truth.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from . import geo
from ._io import write_csv
from .timeutil import month_range

CATEGORIES = ("shop", "restaurant", "park", "school", "health", "worship", "museum", "office")

DAY_START_MIN = 7 * 60
DAY_END_MIN = 21 * 60 + 30
NIGHT_START_MIN = 22 * 60 + 30
NIGHT_LENGTH_MIN = 7 * 60


class InfeasibleScenarioError(ValueError):
    pass


@dataclass
class ScenarioConfig:
    """Knobs of the synthetic city. Rates are per device per month."""

    seed: int = 0
    n_devices_per_arm: int = 500
    n_background_devices: int = 300
    start_month: str = "2018-07"
    end_month: str = "2019-06"
    opening: str = "2018-12"
    base_period: str = "2018-11"
    base_trip_rate: float = 100.0
    effect_trips: float = 6.5
    dispersion: float = 2.0
    device_rate_sd: float = 0.1
    seasonal_amplitude: float = 4.0
    background_trip_rate: float = 30.0
    pings_per_stay_min: int = 2
    pings_per_stay_extra: float = 0.5
    stay_minutes_min: float = 10.0
    stay_minutes_max: float = 45.0
    night_ping_rate: float = 1.5
    jitter_sigma_m: float = 15.2
    jitter_cap_m: float = 45.6
    poi_spacing_m: float = 400.0
    poi_share: float = 0.4
    local_share: float = 0.5
    local_radius_m: float = 3000.0
    city_half_width_m: float = 10_000.0
    city_half_height_m: float = 12_000.0
    origin_lat: float = 4.60
    origin_lon: float = -74.10
    timezone: str = "America/Bogota"
    buffer_m: float = 500.0
    home_margin_m: float = 60.0
    hex_side_m: float = 100.0
    hex_margin_m: float = 15.0
    stations_per_line: int = 4
    station_spacing_m: float = 650.0
    pretrend_slope: float = 0.0
    attrition_hazard: float = 0.0
    sparse_fraction: float = 0.0
    sparse_trip_rate: float = 8.0
    sparse_night_share: float = 0.3

    def __post_init__(self):
        positive = ("n_devices_per_arm", "base_trip_rate", "dispersion", "night_ping_rate",
                    "jitter_sigma_m", "jitter_cap_m", "poi_spacing_m", "buffer_m",
                    "stay_minutes_min", "stay_minutes_max", "sparse_trip_rate", "background_trip_rate")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.n_background_devices < 0:
            raise ValueError("n_background_devices must be non-negative")
        months = self.months
        if len(months) < 2:
            raise ValueError("window must span at least two months")
        if self.opening not in months or self.base_period not in months:
            raise ValueError("opening and base period must lie inside the window")
        if self.pings_per_stay_min < 2:
            raise ValueError("a stay needs at least two pings")
        if not 0 <= self.hex_margin_m < self.hex_side_m * math.sqrt(3.0) / 2.0:
            raise ValueError("hex_margin_m must lie in [0, hex apothem)")
        if self.night_ping_rate < 1:
            raise ValueError("night_ping_rate must be at least 1 per night")
        for name in ("attrition_hazard", "sparse_fraction", "poi_share", "local_share", "sparse_night_share"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")

    @property
    def months(self) -> list[str]:
        return month_range(self.start_month, self.end_month)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def perturb(config: ScenarioConfig, knob: str, strength: float | None = None) -> ScenarioConfig:
    """Copy of ``config`` with one pathology switched on.

    ``pretrend_violation`` adds a linear treated-only trend (default
    1 trip/month per month); ``attrition`` a monthly dropout hazard (default
    0.05); ``sparse_devices`` a share of devices below the activity
    thresholds (default 0.2).
    """
    if knob == "pretrend_violation":
        return dataclasses.replace(config, pretrend_slope=1.0 if strength is None else strength)
    if knob == "attrition":
        return dataclasses.replace(config, attrition_hazard=0.05 if strength is None else strength)
    if knob == "sparse_devices":
        return dataclasses.replace(config, sparse_fraction=0.2 if strength is None else strength)
    raise ValueError(f"unknown knob {knob!r}")


# --------------------------------------------------------------------------
# layout


@dataclass
class CityLayout:
    projection: geo.LocalProjection
    stations: list
    station_xy: np.ndarray
    zones: list
    regions: list
    poi_ids: np.ndarray
    poi_xy: np.ndarray
    poi_category: np.ndarray
    spacing: float
    poi_offset: np.ndarray = field(repr=False, default=None)

    def to_latlon(self, x, y):
        return self.projection.inverse(x, y)


def _band_y(cfg, s):
    h = 2 * cfg.city_half_height_m / 6
    return -cfg.city_half_height_m + h * (s - 1), -cfg.city_half_height_m + h * s


def _rect(proj, x0, x1, y0, y1, steps=8):
    """Rectangle in the plane as a lon/lat ring (edges densified)."""
    xs = np.concatenate([np.linspace(x0, x1, steps, endpoint=False), np.full(steps, x1),
                         np.linspace(x1, x0, steps, endpoint=False), np.full(steps, x0)])
    ys = np.concatenate([np.full(steps, y0), np.linspace(y0, y1, steps, endpoint=False),
                         np.full(steps, y1), np.linspace(y1, y0, steps, endpoint=False)])
    lat, lon = proj.inverse(xs, ys)
    ring = [(float(a), float(b)) for a, b in zip(lon, lat)]
    ring.append(ring[0])
    return ring


def build_layout(cfg: ScenarioConfig) -> CityLayout:
    proj = geo.LocalProjection(geo.GeoPoint(cfg.origin_lat, cfg.origin_lon))
    W, H = cfg.city_half_width_m, cfg.city_half_height_m
    if cfg.buffer_m - cfg.home_margin_m <= 0:
        raise InfeasibleScenarioError("station buffer too small to place homes")

    zones = []
    for s in range(1, 7):
        y0, y1 = _band_y(cfg, s)
        zones.append(geo.StratumZone(f"band{s}", (_rect(proj, -W, W, y0, y1),), s))
    split = H / 3
    regions = [
        geo.Region("Southwest", (_rect(proj, -W, 0, -H, -split),)),
        geo.Region("Southeast", (_rect(proj, 0, W, -H, -split),)),
        geo.Region("Center", (_rect(proj, -W, W, -split, split),)),
        geo.Region("Northwest", (_rect(proj, -W, 0, split, H),)),
        geo.Region("Northeast", (_rect(proj, 0, W, split, H),)),
    ]

    y_lo, y_hi = _band_y(cfg, 1)
    y0 = y_lo + cfg.buffer_m + 100
    stations, sxy = [], []
    for line, sign in (("treatment", 1.0), ("control", -1.0)):
        for k in range(cfg.stations_per_line):
            x = sign * (W / 2 + k * cfg.station_spacing_m * 0.9)
            y = y0 + k * cfg.station_spacing_m * 0.3
            lat, lon = proj.inverse(x, y)
            sid = f"{line[0].upper()}{k + 1}"
            stations.append(geo.Station(sid, geo.GeoPoint(float(lat), float(lon)), line, cfg.buffer_m))
            sxy.append((x, y))
    sxy = np.array(sxy)
    if sxy[:, 1].max() + cfg.buffer_m > y_hi:
        raise InfeasibleScenarioError("station buffers leave the lowest stratum band")

    sp = cfg.poi_spacing_m
    if sp < 4 * cfg.jitter_cap_m + 100:
        raise InfeasibleScenarioError("POI spacing too tight for unambiguous matching")
    gx = np.arange(-W + sp / 2, W, sp)
    gy = np.arange(-H + sp / 2, H, sp)
    X, Y = np.meshgrid(gx, gy, indexing="xy")
    rng = np.random.Generator(np.random.Philox(key=[cfg.seed, 0xC17]))
    off = rng.uniform(-0.1 * sp, 0.1 * sp, size=(X.size, 2))
    poi_xy = np.column_stack([X.ravel(), Y.ravel()]) + off
    poi_ids = np.array([f"poi{i:05d}" for i in range(len(poi_xy))], dtype=object)
    cats = np.array(CATEGORIES, dtype=object)[rng.integers(0, len(CATEGORIES), len(poi_xy))]
    return CityLayout(proj, stations, sxy, zones, regions, poi_ids, poi_xy, cats, sp,
                      poi_offset=np.array([gx[0], gy[0]]))


# --------------------------------------------------------------------------
# sampling helpers


def _device_rng(seed: int, device: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=[int(seed) & (2**64 - 1), int(device)]))


def _truncated_jitter(rng, n, sigma, cap):
    off = rng.normal(0.0, sigma, size=(n, 2))
    bad = np.hypot(off[:, 0], off[:, 1]) > cap
    while bad.any():
        off[bad] = rng.normal(0.0, sigma, size=(int(bad.sum()), 2))
        bad = np.hypot(off[:, 0], off[:, 1]) > cap
    return off


def _nearest_grid(layout, xy):
    sp = layout.spacing
    n_x = int(round((-2 * layout.poi_offset[0]) / sp)) + 1
    i = np.clip(np.round((xy[:, 0] - layout.poi_offset[0]) / sp), 0, n_x - 1).astype(np.int64)
    n_y = len(layout.poi_xy) // n_x
    j = np.clip(np.round((xy[:, 1] - layout.poi_offset[1]) / sp), 0, n_y - 1).astype(np.int64)
    return j * n_x + i


def _sample_destinations(rng, cfg, layout, home_xy, day, n):
    """Trip destinations ``(xy, poi_index)`` obeying the separation rules.

    Non-POI destinations keep clear of every POI so their stays never match
    one, every destination is away from home, and consecutive trips on one
    day are far enough apart to be told apart.
    """
    W, H = cfg.city_half_width_m, cfg.city_half_height_m
    min_home = 250.0
    min_consec = 200.0
    min_poi_gap = 2 * cfg.jitter_cap_m + 30.0
    xy = np.empty((n, 2))
    poi = np.full(n, -1, dtype=np.int64)
    idx = np.arange(n)
    same_day = np.r_[False, day[1:] == day[:-1]] if n else np.empty(0, dtype=bool)
    for _ in range(500):
        m = len(idx)
        if m == 0:
            return xy, poi
        local = rng.random(m) < cfg.local_share
        r = np.sqrt(rng.uniform(300.0 ** 2, cfg.local_radius_m ** 2, m))
        a = rng.uniform(0, 2 * math.pi, m)
        cand = np.empty((m, 2))
        cand[:, 0] = np.where(local, home_xy[0] + r * np.cos(a), rng.uniform(-W, W, m))
        cand[:, 1] = np.where(local, home_xy[1] + r * np.sin(a), rng.uniform(-H, H, m))
        np.clip(cand[:, 0], -W + 50, W - 50, out=cand[:, 0])
        np.clip(cand[:, 1], -H + 50, H - 50, out=cand[:, 1])
        to_poi = rng.random(m) < cfg.poi_share
        near = _nearest_grid(layout, cand)
        pxy = layout.poi_xy[near]
        gap = np.hypot(cand[:, 0] - pxy[:, 0], cand[:, 1] - pxy[:, 1])
        cand[to_poi] = pxy[to_poi]
        xy[idx] = cand
        poi[idx] = np.where(to_poi, near, -1)
        ok = (to_poi | (gap >= min_poi_gap)) & (np.hypot(cand[:, 0] - home_xy[0], cand[:, 1] - home_xy[1]) >= min_home)
        bad = np.zeros(n, dtype=bool)
        bad[idx[~ok]] = True
        close = np.r_[False, np.hypot(xy[1:, 0] - xy[:-1, 0], xy[1:, 1] - xy[:-1, 1]) < min_consec] & same_day
        bad |= close
        idx = np.flatnonzero(bad)
    raise InfeasibleScenarioError("could not place trip destinations under the separation rules")


def _trip_counts(rng, mean, dispersion):
    mean = np.maximum(mean, 0.0)
    if dispersion <= 1.0:
        return rng.poisson(mean)
    n = mean / (dispersion - 1.0)
    out = np.zeros(len(mean), dtype=np.int64)
    pos = n > 0
    out[pos] = rng.negative_binomial(n[pos], 1.0 / dispersion)
    return out


# --------------------------------------------------------------------------
# generation


@dataclass
class Scenario:
    config: ScenarioConfig
    layout: CityLayout
    pings: pd.DataFrame
    pois: pd.DataFrame
    devices: pd.DataFrame
    trips: pd.DataFrame
    truth: pd.DataFrame

    @property
    def stations(self):
        return self.layout.stations

    @property
    def zones(self):
        return self.layout.zones

    @property
    def regions(self):
        return self.layout.regions


def _local_day_offsets(months, tz):
    """Local minus UTC offset (seconds) of each local day, keyed by day number."""
    first = pd.Timestamp(f"{months[0]}-01")
    last = pd.Timestamp(f"{months[-1]}-01") + pd.offsets.MonthBegin(1) + pd.Timedelta(days=1)
    days = pd.date_range(first, last, freq="D") + pd.Timedelta(hours=12)
    loc = days.tz_localize(tz, nonexistent="shift_forward", ambiguous=False)
    offset = (days.asi8 - loc.tz_convert("UTC").tz_localize(None).asi8) // 10**9
    day0 = int(first.value // 10**9 // 86400)
    return day0, offset.astype(np.int64)


def _hex_edge_distance(x, y, side):
    """Distance from a planar point to the edge of its flat-top hex cell.

    Keeping homes clear of cell edges means the noisy home estimate falls
    in the same cell as the true home.
    """
    q = (2.0 / 3.0) * x / side
    r = (-x / 3.0 + math.sqrt(3.0) / 3.0 * y) / side
    qi, ri = geo._cube_round(np.array([q]), np.array([r]))
    cx = side * 1.5 * qi[0]
    cy = side * math.sqrt(3.0) * (ri[0] + qi[0] / 2.0)
    dx, dy = x - cx, y - cy
    c30 = math.sqrt(3.0) / 2.0
    reach = max(abs(dy), abs(c30 * dx + 0.5 * dy), abs(-c30 * dx + 0.5 * dy))
    return side * c30 - reach


def _place_devices(cfg, layout):
    n_arm = cfg.n_devices_per_arm
    n_bg = cfg.n_background_devices
    rows = []
    lines = {"treatment": [i for i, s in enumerate(layout.stations) if s.line == "treatment"],
             "control": [i for i, s in enumerate(layout.stations) if s.line == "control"]}
    inner = cfg.buffer_m - cfg.home_margin_m
    idx = 0
    for arm in ("treatment", "control"):
        for _ in range(n_arm):
            rng = _device_rng(cfg.seed, idx)
            st = lines[arm][int(rng.integers(len(lines[arm])))]
            while True:
                r = inner * math.sqrt(rng.random())
                a = rng.uniform(0, 2 * math.pi)
                x, y = layout.station_xy[st] + (r * math.cos(a), r * math.sin(a))
                if _hex_edge_distance(x, y, cfg.hex_side_m) >= cfg.hex_margin_m:
                    break
            rows.append((idx, arm, layout.stations[st].station_id, x, y))
            idx += 1
    W, H = cfg.city_half_width_m, cfg.city_half_height_m
    for _ in range(n_bg):
        rng = _device_rng(cfg.seed, idx)
        while True:
            x, y = rng.uniform(-W + 300, W - 300), rng.uniform(-H + 300, H - 300)
            d = np.hypot(layout.station_xy[:, 0] - x, layout.station_xy[:, 1] - y)
            if d.min() > cfg.buffer_m + 200:
                break
        rows.append((idx, "background", "", x, y))
        idx += 1
    dev = pd.DataFrame(rows, columns=["idx", "arm", "station_id", "home_x", "home_y"])
    dev["device_id"] = [f"d{i:06d}" for i in dev["idx"]]
    sparse_rng = np.random.Generator(np.random.Philox(key=[cfg.seed, 0x5A5E]))
    dev["sparse"] = sparse_rng.random(len(dev)) < cfg.sparse_fraction
    att_rng = np.random.Generator(np.random.Philox(key=[cfg.seed, 0xA771]))
    n_months = len(cfg.months)
    if cfg.attrition_hazard > 0:
        dev["active_months"] = np.minimum(att_rng.geometric(cfg.attrition_hazard, len(dev)), n_months)
    else:
        dev["active_months"] = n_months
    mult_rng = np.random.Generator(np.random.Philox(key=[cfg.seed, 0x3017]))
    dev["rate_mult"] = np.exp(mult_rng.normal(0.0, cfg.device_rate_sd, len(dev))
                              - cfg.device_rate_sd ** 2 / 2)
    lat, lon = layout.to_latlon(dev["home_x"].to_numpy(), dev["home_y"].to_numpy())
    dev["home_lat"], dev["home_lon"] = lat, lon
    dev["home_stratum"] = geo.strata_for(lat, lon, layout.zones)
    return dev


def expected_trips(cfg: ScenarioConfig, arm: str, month_pos, rate_mult=1.0):
    """Mean monthly trip count for an arm in the given month positions."""
    months = cfg.months
    pos = np.asarray(month_pos)
    open_pos = months.index(cfg.opening)
    base_pos = months.index(cfg.base_period)
    if arm == "background":
        return cfg.background_trip_rate * rate_mult + 0.0 * pos
    season = cfg.seasonal_amplitude * np.sin(2 * math.pi * pos / 12.0)
    mu = cfg.base_trip_rate * rate_mult + season
    if arm == "treatment":
        mu = mu + cfg.effect_trips * (pos >= open_pos) + cfg.pretrend_slope * (pos - base_pos)
    return mu


def _draw_counts(rng, cfg, dev_row, pos):
    # always the first draws of the device stream, so counts can be drawn alone
    if dev_row.sparse:
        return rng.poisson(cfg.sparse_trip_rate, len(pos))
    mu = expected_trips(cfg, dev_row.arm, pos, dev_row.rate_mult)
    return _trip_counts(rng, mu, cfg.dispersion)


def _generate_device(cfg, layout, dev_row, day0, offsets, month_days):
    rng = _device_rng(cfg.seed, int(dev_row.idx) + (1 << 32))
    n_active = int(dev_row.active_months)
    home = np.array([dev_row.home_x, dev_row.home_y])
    pos = np.arange(n_active)

    counts = _draw_counts(rng, cfg, dev_row, pos)
    if dev_row.sparse:
        ppm_min, ppm_extra = 2, 0.0
    else:
        ppm_min, ppm_extra = cfg.pings_per_stay_min, cfg.pings_per_stay_extra

    # trips: day within month, then slots within the day
    month_first_day = np.array([month_days[m][0] for m in range(n_active)], dtype=np.int64)
    month_len = np.array([month_days[m][1] for m in range(n_active)], dtype=np.int64)
    trip_month = np.repeat(pos, counts)
    n_trips = len(trip_month)
    day = month_first_day[trip_month] + (rng.random(n_trips) * month_len[trip_month]).astype(np.int64)
    day.sort(kind="stable")
    trip_month = np.searchsorted(month_first_day, day, side="right") - 1
    if n_trips:
        first_of_day = np.r_[True, day[1:] != day[:-1]]
        grp = np.cumsum(first_of_day) - 1
        rank = np.arange(n_trips) - np.flatnonzero(first_of_day)[grp]
        per_day = np.bincount(grp)[grp]
    else:
        rank = per_day = np.empty(0, dtype=np.int64)
    slot = (DAY_END_MIN - DAY_START_MIN) / np.maximum(per_day, 1)
    dur_hi = np.minimum(cfg.stay_minutes_max, 0.6 * slot)
    dur_lo = np.minimum(cfg.stay_minutes_min, dur_hi)
    start_min = DAY_START_MIN + rank * slot + rng.random(n_trips) * 0.2 * slot
    dur_min = dur_lo + rng.random(n_trips) * (dur_hi - dur_lo)
    xy, poi = _sample_destinations(rng, cfg, layout, home, day, n_trips)

    n_p = ppm_min + rng.poisson(ppm_extra, n_trips) if ppm_extra > 0 else np.full(n_trips, ppm_min)
    trip_of_ping = np.repeat(np.arange(n_trips), n_p)
    first_ping = np.r_[0, np.cumsum(n_p)[:-1]] if n_trips else np.empty(0, np.int64)
    k_in_trip = np.arange(len(trip_of_ping)) - np.repeat(first_ping, n_p)
    frac = rng.random(len(trip_of_ping))
    frac[k_in_trip == 0] = 0.0
    frac[k_in_trip == np.repeat(n_p - 1, n_p)] = 1.0
    local_s = (day[trip_of_ping] * 86400
               + np.round((start_min[trip_of_ping] + frac * dur_min[trip_of_ping]) * 60).astype(np.int64))
    ping_xy = xy[trip_of_ping] + _truncated_jitter(rng, len(trip_of_ping), cfg.jitter_sigma_m, cfg.jitter_cap_m)

    # nights anchored on each active day
    nights = np.concatenate([np.arange(month_days[m][0], month_days[m][0] + month_days[m][1])
                             for m in range(n_active)]) if n_active else np.empty(0, np.int64)
    if dev_row.sparse:
        n_night = (rng.random(len(nights)) < cfg.sparse_night_share).astype(np.int64)
    else:
        n_night = 1 + rng.poisson(cfg.night_ping_rate - 1.0, len(nights))
    night_day = np.repeat(nights, n_night)
    night_s = night_day * 86400 + NIGHT_START_MIN * 60 + (rng.random(len(night_day)) * NIGHT_LENGTH_MIN * 60).astype(np.int64)
    night_xy = home + _truncated_jitter(rng, len(night_day), cfg.jitter_sigma_m, cfg.jitter_cap_m)

    local_all = np.concatenate([local_s, night_s])
    xy_all = np.vstack([ping_xy, night_xy])
    day_all = local_all // 86400
    utc = local_all - offsets[np.clip(day_all - day0, 0, len(offsets) - 1)]
    order = np.argsort(utc, kind="stable")

    trips = (trip_month, xy, poi, n_p)
    return utc[order], xy_all[order], trips, counts


def generate(config: ScenarioConfig) -> Scenario:
    """Simulate pings, POIs, zones, stations and the ground truth."""
    cfg = config
    layout = build_layout(cfg)
    devices = _place_devices(cfg, layout)
    months = cfg.months
    day0, offsets = _local_day_offsets(months, cfg.timezone)
    month_days = []
    for m in months:
        first = pd.Timestamp(f"{m}-01")
        month_days.append((int(first.value // 10**9 // 86400), int(first.days_in_month)))
    lo_utc = month_days[0][0] * 86400 - offsets[0]
    hi_day = month_days[-1][0] + month_days[-1][1]
    hi_utc = hi_day * 86400 - offsets[min(hi_day - day0, len(offsets) - 1)]

    ping_parts, trip_parts, truth_rows = [], [], []
    for row in devices.itertuples(index=False):
        t, xy, trips, counts = _generate_device(cfg, layout, row, day0, offsets, month_days)
        keep = (t >= lo_utc) & (t < hi_utc)
        ping_parts.append((row.idx, t[keep], xy[keep]))
        trip_parts.append((row.idx,) + trips)
        for m, c in enumerate(counts):
            truth_rows.append((row.idx, months[m], int(c)))

    idx = np.concatenate([np.full(len(p[1]), p[0], dtype=np.int64) for p in ping_parts])
    t = np.concatenate([p[1] for p in ping_parts])
    xy = np.vstack([p[2] for p in ping_parts])
    lat, lon = layout.to_latlon(xy[:, 0], xy[:, 1])
    dev_ids = devices["device_id"].to_numpy(dtype=object)
    pings = pd.DataFrame({
        "device_id": dev_ids[idx],
        "t": t.astype(np.int64),
        "lat": np.round(lat, 7),
        "lon": np.round(lon, 7),
        "accuracy_m": np.full(len(t), cfg.jitter_sigma_m),
    })

    tidx = np.concatenate([np.full(len(p[1]), p[0], dtype=np.int64) for p in trip_parts])
    tmonth = np.concatenate([p[1] for p in trip_parts])
    txy = np.vstack([p[2] for p in trip_parts])
    tpoi = np.concatenate([p[3] for p in trip_parts])
    tpings = np.concatenate([p[4] for p in trip_parts])
    tlat, tlon = layout.to_latlon(txy[:, 0], txy[:, 1])
    trips = pd.DataFrame({
        "device_id": dev_ids[tidx],
        "month": np.array(months, dtype=object)[tmonth],
        "lat": tlat,
        "lon": tlon,
        "stratum": geo.strata_for(tlat, tlon, layout.zones),
        "poi_id": np.where(tpoi >= 0, layout.poi_ids[np.maximum(tpoi, 0)], ""),
        "n_pings": tpings,
    })
    truth = pd.DataFrame(truth_rows, columns=["idx", "month", "trips"])
    truth.insert(0, "device_id", dev_ids[truth.pop("idx").to_numpy()])

    plat, plon = layout.to_latlon(layout.poi_xy[:, 0], layout.poi_xy[:, 1])
    pois = pd.DataFrame({"poi_id": layout.poi_ids, "lat": np.round(plat, 7), "lon": np.round(plon, 7),
                         "category": layout.poi_category})
    return Scenario(cfg, layout, pings, pois, devices, trips, truth)


def device_month_counts(config: ScenarioConfig) -> tuple[pd.DataFrame, pd.DataFrame]:
    """True ``(devices, truth)`` of a scenario without realizing any pings.

    Identical to ``generate(config).devices`` and ``.truth``; a cheap path
    for Monte Carlo work on the counting layer.
    """
    cfg = config
    layout = build_layout(cfg)
    devices = _place_devices(cfg, layout)
    months = cfg.months
    rows = []
    for row in devices.itertuples(index=False):
        rng = _device_rng(cfg.seed, int(row.idx) + (1 << 32))
        counts = _draw_counts(rng, cfg, row, np.arange(int(row.active_months)))
        rows.extend((row.device_id, months[m], int(c)) for m, c in enumerate(counts))
    truth = pd.DataFrame(rows, columns=["device_id", "month", "trips"])
    return devices, truth


def true_exposure(scn: Scenario, high_income_strata=(4, 5, 6)) -> pd.DataFrame:
    """Exposure per device-month computed from the true POI visits and homes."""
    from .segregation import VisitorMixProfiler

    homes = scn.devices[["device_id", "home_stratum"]].rename(columns={"home_stratum": "stratum"})
    visits = scn.trips[scn.trips["poi_id"] != ""][["device_id", "month", "poi_id"]]
    visits = visits.merge(homes, on="device_id", how="inner")
    visits = visits[(visits["stratum"] >= 1) & (visits["stratum"] <= 6)]
    prof = VisitorMixProfiler(high_income_strata).fit(visits)
    return prof.transform(visits)


# --------------------------------------------------------------------------
# files


def write_scenario(scn: Scenario, paths: dict) -> dict:
    """Write the scenario in the ingest/geo file formats.

    ``paths`` maps ``pings, pois, zones, stations, truth`` and optionally
    ``regions`` to file paths; returns the same mapping.
    """
    from .ingest import write_pings

    for p in paths.values():
        if p:
            Path(p).parent.mkdir(parents=True, exist_ok=True)
    write_pings(scn.pings, paths["pings"])
    write_csv(scn.pois, paths["pois"])
    Path(paths["zones"]).write_text(json.dumps(geo.zones_to_geojson(scn.zones)))
    if paths.get("regions"):
        Path(paths["regions"]).write_text(json.dumps(geo.zones_to_geojson(scn.regions)))
    geo.write_stations(paths["stations"], scn.stations)
    truth_dir = Path(paths["truth"])
    truth_dir.mkdir(parents=True, exist_ok=True)
    devices = scn.devices[["device_id", "arm", "station_id", "home_lat", "home_lon", "home_stratum",
                           "sparse", "active_months"]]
    write_csv(devices, truth_dir / "devices.csv")
    write_csv(scn.truth, truth_dir / "device_months.csv")
    write_csv(scn.trips, truth_dir / "trips.csv.gz")
    (truth_dir / "scenario.json").write_text(json.dumps(scn.config.to_dict(), indent=2, sort_keys=True))
    return paths
