"""Device-month records and the hexagon-by-month outcome panel."""

from __future__ import annotations

import logging
import re

import numpy as np
import pandas as pd

from . import geo
from ._validation import check_columns
from .timeutil import month_index

logger = logging.getLogger(__name__)

DEST_GROUPS = {"low": (1, 2), "mid": (3, 4), "high": (5, 6)}
BASE_OUTCOMES = ("trips_total", "trips_low", "trips_mid", "trips_high", "poi_visits",
                 "unique_pois", "mean_entropy", "mean_high_share")
PANEL_COLUMNS = ["hex_id", "month", "outcome", "y", "n_devices", "cable", "arm"]
REGION_PREFIX = "trips_region:"

_REGION_SELECTOR = re.compile(r"^trips_region(?:\((?P<a>[^)]+)\)|:(?P<b>.+))$")


def outcome_column(selector: str) -> str:
    """Map an outcome selector to its record column name."""
    if selector in BASE_OUTCOMES:
        return selector
    m = _REGION_SELECTOR.match(selector)
    if m:
        return REGION_PREFIX + (m.group("a") or m.group("b"))
    raise ValueError(f"unknown outcome {selector!r}")


def build_device_records(trips: pd.DataFrame, exposure: pd.DataFrame | None, homes: pd.DataFrame,
                         stations, grid: geo.HexGrid, dest_groups=DEST_GROUPS,
                         regions=None) -> pd.DataFrame:
    """One record per device-month whose home lies in a station buffer.

    Parameters
    ----------
    trips : DataFrame
        Trips outside the home with ``device_id, month`` and, when available,
        destination ``stratum`` (0 = unclassified) and ``region_id``.
    exposure : DataFrame or None
        Output of :func:`mobiscope.segregation.exposure_by_device_month`.
    homes : DataFrame
        ``device_id, month, lat, lon`` monthly homes.
    stations : list of Station
    grid : HexGrid
    regions : iterable of region ids, optional
        Region columns to emit even when no trip reaches them.

    Devices whose home switches arm between months are dropped entirely.
    """
    check_columns(homes, ["device_id", "month", "lat", "lon"], "homes")
    check_columns(trips, ["device_id", "month"], "trips")
    h = homes[["device_id", "month", "lat", "lon"]].copy()
    idx = geo.nearest_station_index(h["lat"].to_numpy(), h["lon"].to_numpy(), stations)
    h = h[idx >= 0].copy()
    idx = idx[idx >= 0]
    h["station_id"] = np.array([stations[i].station_id for i in idx], dtype=object)
    h["arm"] = np.array([stations[i].line for i in idx], dtype=object)
    h["home_hex"] = grid.cell_ids(h["lat"].to_numpy(), h["lon"].to_numpy()) if len(h) else []

    n_arms = h.groupby("device_id")["arm"].nunique()
    movers = n_arms.index[n_arms > 1]
    if len(movers):
        logger.info("dropping %d devices whose home changes arm", len(movers))
        h = h[~h["device_id"].isin(movers)]

    keys = ["device_id", "month"]
    t = trips[trips["device_id"].isin(h["device_id"].unique())]
    rec = h[keys + ["home_hex", "arm", "station_id"]].set_index(keys)
    rec["trips_total"] = t.groupby(keys).size()
    if "stratum" in t.columns:
        strata = t["stratum"].fillna(0).astype(np.int64)
        for name, members in dest_groups.items():
            rec[f"trips_{name}"] = t[strata.isin(members)].groupby(keys).size()
    region_ids = list(regions or [])
    if "region_id" in t.columns:
        region_ids = sorted(set(region_ids) | set(t["region_id"].dropna().astype(str)) - {""})
        for r in region_ids:
            rec[REGION_PREFIX + r] = t[t["region_id"] == r].groupby(keys).size()
    count_cols = [c for c in rec.columns if c.startswith("trips_")]
    rec[count_cols] = rec[count_cols].fillna(0).astype(np.int64)

    if exposure is not None and len(exposure):
        e = exposure.set_index(keys)
        for c in ("poi_visits", "unique_pois"):
            rec[c] = e[c].reindex(rec.index).fillna(0).astype(np.int64)
        for c in ("mean_entropy", "mean_high_share"):
            rec[c] = e[c].reindex(rec.index)
    else:
        rec["poi_visits"] = 0
        rec["unique_pois"] = 0
        rec["mean_entropy"] = np.nan
        rec["mean_high_share"] = np.nan
    return rec.reset_index().sort_values(keys, kind="stable").reset_index(drop=True)


def build_panel(records: pd.DataFrame, outcome: str, opening) -> pd.DataFrame:
    """Hexagon-by-month means of one outcome over the devices homed there.

    ``cable`` is 1 for treatment-arm hexagons from the opening month on.
    Cells where no device has a defined outcome are absent. Hexagons whose
    devices belong to both arms are dropped.
    """
    col = outcome_column(outcome)
    check_columns(records, ["device_id", "month", "home_hex", "arm"], "records")
    if col not in records.columns:
        if col.startswith(REGION_PREFIX):
            records = records.assign(**{col: 0})
        else:
            raise ValueError(f"records lack outcome column {col!r}")
    r = records[["home_hex", "month", "arm", col]].dropna(subset=[col])
    arms = r.groupby("home_hex")["arm"].nunique()
    mixed = arms.index[arms > 1]
    if len(mixed):
        logger.warning("dropping %d hexagons that mix treatment and control homes", len(mixed))
        r = r[~r["home_hex"].isin(mixed)]
    g = r.groupby(["home_hex", "month"], sort=True)
    panel = g.agg(y=(col, "mean"), n_devices=(col, "size"), arm=("arm", "first")).reset_index()
    panel = panel.rename(columns={"home_hex": "hex_id"})
    open_idx = month_index(opening)
    post = np.array([month_index(m) >= open_idx for m in panel["month"]], dtype=bool)
    panel["cable"] = ((panel["arm"] == "treatment").to_numpy() & post).astype(np.int64)
    panel["outcome"] = outcome
    panel["y"] = panel["y"].astype(float)
    return panel[PANEL_COLUMNS]


def available_outcomes(records: pd.DataFrame) -> list[str]:
    outs = [c for c in BASE_OUTCOMES if c in records.columns]
    outs += sorted(c for c in records.columns if c.startswith(REGION_PREFIX))
    return outs
