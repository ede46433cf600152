"""Independent reference implementations used as test oracles."""

import math

import numpy as np
import pandas as pd
import statsmodels.api as sm

from mobiscope import geo

R = 6_371_000.0
ORIGIN = (4.60, -74.10)
MONTHS = [f"2018-{m:02d}" for m in range(7, 13)] + [f"2019-{m:02d}" for m in range(1, 7)]
BASE, OPENING = "2018-11", "2018-12"


def hav(lat1, lon1, lat2, lon2):
    d = math.pi / 180.0
    s1 = math.sin((lat2 - lat1) * d / 2.0)
    s2 = math.sin((lon2 - lon1) * d / 2.0)
    h = min(s1 * s1 + math.cos(lat1 * d) * math.cos(lat2 * d) * s2 * s2, 1.0)
    return 2.0 * R * math.asin(math.sqrt(h))


def reference_stays(t, lat, lon, radius=100.0, min_dur=300, max_dur=86400):
    """Quadratic reference: every candidate is checked against all members."""
    out = []
    n = len(t)
    i = 0
    while i < n:
        j = i + 1
        while j < n:
            if t[j] - t[i] > max_dur:
                break
            sa = sb = 0.0
            for m in range(i, j):
                sa += lat[m]
                sb += lon[m]
            k = j - i
            if hav(lat[j], lon[j], sa / k, sb / k) > radius:
                break
            ca, cb = (sa + lat[j]) / (k + 1), (sb + lon[j]) / (k + 1)
            if max(hav(lat[m], lon[m], ca, cb) for m in range(i, j + 1)) > radius:
                break
            j += 1
        dur = t[j - 1] - t[i]
        if min_dur <= dur <= max_dur:
            out.append((i, j - 1))
        i = j
    return out


def random_trace(rng, n):
    """Dwell-and-move trace near the origin, in meters of local offset."""
    xs, ys, ts = [], [], []
    x = y = 0.0
    tt = 1_540_000_000
    while len(ts) < n:
        if rng.random() < 0.5:
            spread = rng.choice([10.0, 40.0, 70.0])
            for _ in range(rng.integers(1, 40)):
                xs.append(x + rng.normal(0, spread))
                ys.append(y + rng.normal(0, spread))
                tt += int(rng.choice([30, 60, 240, 900, 3600, 20_000]))
                ts.append(tt)
        else:
            x += rng.normal(0, 300)
            y += rng.normal(0, 300)
            xs.append(x)
            ys.append(y)
            tt += int(rng.integers(1, 1200))
            ts.append(tt)
    proj = geo.LocalProjection(geo.GeoPoint(*ORIGIN))
    lat, lon = proj.inverse(np.array(xs[:n]), np.array(ys[:n]))
    return np.array(ts[:n], dtype=np.int64), np.asarray(lat), np.asarray(lon)


def reference_homes(lat, lon, radius=100.0, min_count=5):
    """Leader clustering of one device-month's night pings in time order.

    Returns ``(lat, lon, count)`` of the busiest cluster (earliest opened on
    ties) or None below ``min_count``.
    """
    clusters = []  # [sum_lat, sum_lon, count]
    for a, b in zip(lat, lon):
        best, best_d = None, None
        for c in clusters:
            d = hav(a, b, c[0] / c[2], c[1] / c[2])
            if d <= radius and (best is None or d < best_d):
                best, best_d = c, d
        if best is None:
            best = [0.0, 0.0, 0]
            clusters.append(best)
        best[0] += a
        best[1] += b
        best[2] += 1
    if not clusters:
        return None
    top = clusters[0]
    for c in clusters[1:]:
        if c[2] > top[2]:
            top = c
    if top[2] < min_count:
        return None
    return top[0] / top[2], top[1] / top[2], top[2]


# -- night-ping fixtures ----------------------------------------------------------

def utc(local: str) -> int:
    return int(pd.Timestamp(local, tz="America/Bogota").tz_convert("UTC").timestamp())


def offset(north_m, east_m=0.0, origin=ORIGIN):
    lat, lon = geo.LocalProjection(geo.GeoPoint(*origin)).inverse(east_m, north_m)
    return float(lat), float(lon)


def night_pings(device, start_local, points, step_min=10):
    t0 = utc(start_local)
    rows = [(device, t0 + 60 * step_min * k, p[0], p[1]) for k, p in enumerate(points)]
    return pd.DataFrame(rows, columns=["device_id", "t", "lat", "lon"])


def random_night_pings(rng, n_devices=60):
    """Night pings around two or three places per device, over two months."""
    rows = []
    for d in range(n_devices):
        places = [offset(*rng.uniform(-3000, 3000, 2)) for _ in range(rng.integers(1, 4))]
        for _ in range(rng.integers(0, 25)):
            day = pd.Timestamp("2019-03-01 23:00", tz="America/Bogota") + pd.Timedelta(days=int(rng.integers(0, 55)))
            p = places[rng.integers(len(places))]
            jitter = offset(*rng.normal(0, 30, 2), origin=p)
            rows.append((f"d{d:02d}", int(day.timestamp()) + int(rng.integers(0, 6 * 3600)), *jitter))
    return pd.DataFrame(rows, columns=["device_id", "t", "lat", "lon"])


# -- panels -------------------------------------------------------------------------

def make_panel(rng, n_units, months=MONTHS, effects=None, drop=0.0, noise=1.0, treat_share=0.5):
    rows = []
    a = rng.normal(0, 5, n_units)
    b = dict(zip(months, rng.normal(0, 3, len(months))))
    n_treat = max(1, min(n_units - 1, int(round(treat_share * n_units))))
    for i in range(n_units):
        arm = "treatment" if i < n_treat else "control"
        for m in months:
            if drop and rng.random() < drop and m != BASE:
                continue
            eff = (effects or {}).get(m, 0.0) if arm == "treatment" else 0.0
            rows.append((f"h{i:03d}", m, arm, 100 + a[i] + b[m] + eff + rng.normal(0, noise),
                         int(rng.integers(1, 9))))
    df = pd.DataFrame(rows, columns=["hex_id", "month", "arm", "y", "n_devices"])
    df["cable"] = ((df["arm"] == "treatment") & (df["month"] >= OPENING)).astype(int)
    return df


def dummy_ols(panel, base=BASE, weights=None):
    """Full dummy-variable regression via statsmodels."""
    treated = (panel["arm"] == "treatment").to_numpy()
    event = [m for m in sorted(panel["month"].unique()) if m != base]
    D = np.column_stack([(treated & (panel["month"] == m).to_numpy()).astype(float) for m in event])
    U = pd.get_dummies(panel["hex_id"]).to_numpy(dtype=float)
    T = pd.get_dummies(panel["month"]).to_numpy(dtype=float)[:, 1:]
    X = np.column_stack([D, U, T])
    model = sm.WLS(panel["y"].to_numpy(), X, weights=weights) if weights is not None \
        else sm.OLS(panel["y"].to_numpy(), X)
    return model, event, D.shape[1]
