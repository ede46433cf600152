"""Ping parsing, validation and device-quality filtering."""

from __future__ import annotations

import gzip
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
import pyarrow as pa
import pyarrow.compute as pc
import pyarrow.csv as pacsv
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .timeutil import DEFAULT_TZ, day_to_month_idx, local_calendar, month_index, window_bounds_utc
from ._io import open_output
from ._validation import check_ping_frame

logger = logging.getLogger(__name__)

PING_COLUMNS = ["device_id", "timestamp", "lat", "lon", "accuracy_m"]
REQUIRED_COLUMNS = ["device_id", "timestamp", "lat", "lon"]

REASONS = (
    "wrong field count",
    "missing field",
    "bad timestamp",
    "bad coordinate",
    "lat out of range",
    "lon out of range",
    "bad accuracy",
    "outside study window",
    "duplicate",
)


class IngestError(RuntimeError):
    """The ping source cannot be read at all."""


@dataclass
class RejectReport:
    input_rows: int = 0
    emitted: int = 0
    reasons: Counter = field(default_factory=Counter)
    timestamp_format: str = ""

    @property
    def total_rejected(self) -> int:
        return sum(self.reasons.values())

    def to_dict(self) -> dict:
        return {
            "input_rows": self.input_rows,
            "emitted": self.emitted,
            "rejected": self.total_rejected,
            "timestamp_format": self.timestamp_format,
            "reasons": {k: int(self.reasons[k]) for k in REASONS if self.reasons.get(k)},
        }


def _open_text(source):
    p = Path(source)
    if p.suffix == ".gz":
        return gzip.open(p, "rb")
    return open(p, "rb")


def _read_table(source, threads: int) -> tuple[pa.Table, int]:
    bad_rows = 0

    def on_invalid(row):
        nonlocal bad_rows
        bad_rows += 1
        return "skip"

    try:
        with _open_text(source) as fh:
            header = fh.readline().decode("utf-8").strip().split(",")
            fh.seek(0)
            header = [h.strip() for h in header]
            missing = [c for c in REQUIRED_COLUMNS if c not in header]
            if missing:
                raise IngestError(f"ping file lacks columns {missing}")
            table = pacsv.read_csv(
                fh,
                read_options=pacsv.ReadOptions(use_threads=threads > 1, block_size=1 << 24),
                parse_options=pacsv.ParseOptions(invalid_row_handler=on_invalid),
                convert_options=pacsv.ConvertOptions(
                    column_types={c: pa.string() for c in header},
                    strings_can_be_null=False,
                ),
            )
    except IngestError:
        raise
    except (OSError, pa.ArrowInvalid, UnicodeDecodeError) as exc:
        raise IngestError(f"cannot read ping source {source}: {exc}") from exc
    return table, bad_rows


_INT_RE = r"^-?\d{1,18}$"
_FLOAT_RE = r"^[+-]?(\d+\.?\d*|\.\d+)([eE][+-]?\d+)?$"


def _trimmed(table: pa.Table, name: str) -> pa.Array:
    return pc.utf8_trim_whitespace(table[name].combine_chunks())


def _parse_float(col: pa.Array) -> np.ndarray:
    """Strict decimal parse; NaN where the text is not a plain number."""
    ok = pc.match_substring_regex(col, _FLOAT_RE)
    vals = pc.cast(pc.if_else(ok, col, "0"), pa.float64())
    out = vals.to_numpy(zero_copy_only=False).copy()
    out[~ok.to_numpy(zero_copy_only=False)] = np.nan
    return out


def _detect_epoch(col: pa.Array) -> bool:
    """Decide the timestamp format of a file from its first non-empty value."""
    nonempty = col.filter(pc.greater(pc.utf8_length(col), 0))
    if len(nonempty) == 0:
        return False
    return bool(pc.match_substring_regex(nonempty[:1], _INT_RE)[0].as_py())


def _parse_timestamps(col: pa.Array, epoch: bool) -> np.ndarray:
    """Epoch seconds as float, NaN where unparseable."""
    out = np.full(len(col), np.nan)
    if epoch:
        ok = pc.match_substring_regex(col, _INT_RE)
        vals = pc.cast(pc.if_else(ok, col, "0"), pa.int64()).to_numpy(zero_copy_only=False)
        okn = ok.to_numpy(zero_copy_only=False)
        out[okn] = vals[okn]
        return out
    parsed = pc.strptime(col, format="%Y-%m-%dT%H:%M:%SZ", unit="s", error_is_null=True)
    good = parsed.is_valid().to_numpy(zero_copy_only=False)
    out[good] = pc.cast(parsed, pa.int64()).to_numpy(zero_copy_only=False)[good]
    # other ISO-8601 spellings (offsets, fractions) are rare; let pandas handle them
    retry = np.flatnonzero(~good & (pc.utf8_length(col).to_numpy(zero_copy_only=False) > 0))
    if len(retry):
        ts = pd.Series(col.take(pa.array(retry)).to_pylist())
        p = pd.to_datetime(ts, format="ISO8601", utc=True, errors="coerce")
        ok = p.notna().to_numpy()
        ns = p.dt.tz_localize(None).to_numpy(dtype="datetime64[ns]").view(np.int64)
        out[retry[ok]] = np.floor_divide(ns[ok], 10**9)
    return out


def _duplicates(codes, t, lat, lon, ok) -> np.ndarray:
    """Rows repeating an earlier valid row's ``(device, t, lat, lon)``."""
    dup = np.zeros(len(ok), dtype=bool)
    rows = np.flatnonzero(ok)
    if len(rows) < 2:
        return dup
    tt = t[rows].astype(np.int64)
    # only rows sharing (device, second) can be duplicates; find those first
    span = int(tt.max() - tt.min()) + 1
    if span * (int(codes.max()) + 1) < 2**62:
        key = codes[rows] * span + (tt - tt.min())
        _, inv, counts = np.unique(key, return_inverse=True, return_counts=True)
        cand = rows[counts[inv] > 1]
    else:
        cand = rows
    if len(cand):
        frame = pd.DataFrame({"d": codes[cand], "t": t[cand], "lat": lat[cand], "lon": lon[cand]})
        dup[cand] = frame.duplicated(keep="first").to_numpy()
    return dup


def parse_pings(source, window=None, tz: str = DEFAULT_TZ, threads: int = 1):
    """Read a ping CSV (optionally gzip) into a validated frame.

    Parameters
    ----------
    source : path-like
        CSV with header ``device_id,timestamp,lat,lon,accuracy_m``. The
        timestamp column holds either ISO-8601 UTC strings or integer epoch
        seconds; the choice is made once per file from the first value.
    window : sequence of "YYYY-MM", optional
        Study months in local time; pings outside are rejected.
    tz : str
        Civil time zone used to interpret the window.

    Returns
    -------
    pings : DataFrame
        Columns ``device_id, t, lat, lon, accuracy_m`` in input order.
    report : RejectReport
    """
    table, bad_rows = _read_table(source, threads)
    n = table.num_rows
    report = RejectReport(input_rows=n + bad_rows)
    if bad_rows:
        report.reasons["wrong field count"] += bad_rows

    reason = np.zeros(n, dtype=np.int8)  # 0 = ok, else 1-based index into REASONS

    def mark(mask, name):
        mask = np.asarray(mask) & (reason == 0)
        reason[mask] = REASONS.index(name) + 1

    cols = {c: _trimmed(table, c) for c in table.column_names if c in PING_COLUMNS}
    for c in REQUIRED_COLUMNS:
        mark(pc.equal(pc.utf8_length(cols[c]), 0).to_numpy(zero_copy_only=False), "missing field")

    epoch = _detect_epoch(cols["timestamp"])
    report.timestamp_format = "epoch" if epoch else "iso8601"
    t = _parse_timestamps(cols["timestamp"], epoch)
    mark(np.isnan(t), "bad timestamp")

    lat = _parse_float(cols["lat"])
    lon = _parse_float(cols["lon"])
    mark(np.isnan(lat) | np.isnan(lon), "bad coordinate")
    with np.errstate(invalid="ignore"):
        mark(np.abs(lat) > 90.0, "lat out of range")
        mark(np.abs(lon) > 180.0, "lon out of range")

    if "accuracy_m" in cols:
        present = pc.greater(pc.utf8_length(cols["accuracy_m"]), 0).to_numpy(zero_copy_only=False)
        acc = _parse_float(cols["accuracy_m"])
        with np.errstate(invalid="ignore"):
            mark(present & (np.isnan(acc) | (acc < 0)), "bad accuracy")
    else:
        acc = np.full(n, np.nan)

    if window is not None:
        lo, hi = window_bounds_utc(list(window), tz)
        with np.errstate(invalid="ignore"):
            mark((t < lo) | (t >= hi), "outside study window")

    enc = pc.dictionary_encode(cols["device_id"])
    dev_codes = enc.indices.to_numpy(zero_copy_only=False).astype(np.int64)
    dev_names = enc.dictionary.to_numpy(zero_copy_only=False)
    mark(_duplicates(dev_codes, t, lat, lon, reason == 0), "duplicate")

    codes, counts = np.unique(reason[reason > 0], return_counts=True)
    for c, k in zip(codes, counts):
        report.reasons[REASONS[c - 1]] += int(k)
    keep = reason == 0
    out = pd.DataFrame({
        "device_id": np.asarray(dev_names, dtype=object)[dev_codes[keep]],
        "t": t[keep].astype(np.int64),
        "lat": lat[keep],
        "lon": lon[keep],
        "accuracy_m": acc[keep],
    })
    report.emitted = len(out)
    if report.total_rejected:
        logger.info("rejected %d of %d ping rows: %s", report.total_rejected,
                    report.input_rows, dict(report.reasons))
    return out, report


def write_pings(pings: pd.DataFrame, path, epoch: bool = True) -> None:
    """Write pings in the ingest CSV schema (gzip when the path ends in .gz)."""
    out = pd.DataFrame({
        "device_id": pings["device_id"].to_numpy(),
        "timestamp": pings["t"].to_numpy(dtype=np.int64) if epoch else
        pd.to_datetime(pings["t"], unit="s").dt.strftime("%Y-%m-%dT%H:%M:%SZ"),
        "lat": pings["lat"].to_numpy(),
        "lon": pings["lon"].to_numpy(),
        "accuracy_m": pings["accuracy_m"].to_numpy() if "accuracy_m" in pings else np.nan,
    })
    table = pa.Table.from_pandas(out, preserve_index=False)
    opts = pacsv.WriteOptions(include_header=False, quoting_style="none")
    header = (",".join(out.columns) + "\n").encode()
    with open_output(path) as fh:
        fh.write(header)
        pacsv.write_csv(table, fh, opts)


# --------------------------------------------------------------------------
# device quality


class DeviceFilter(TransformerMixin, BaseEstimator):
    """Drop devices observed too rarely.

    A device is kept when its mean ping count over the months in which it
    appears is at least ``min_pings_per_month`` and, in every calendar year
    in which it appears, it has pings on at least ``min_active_days``
    distinct local days.
    """

    def __init__(self, min_pings_per_month=50, min_active_days=10, window=None, timezone=DEFAULT_TZ):
        self.min_pings_per_month = min_pings_per_month
        self.min_active_days = min_active_days
        self.window = window
        self.timezone = timezone

    def fit(self, X, y=None):
        pings = check_ping_frame(X)
        if self.window is not None and len(self.window) == 0:
            raise ValueError("window must contain at least one month")
        codes, devices = pd.factorize(pings["device_id"], sort=True)
        cal = local_calendar(pings["t"].to_numpy(), self.timezone)
        keep = np.ones(len(pings), dtype=bool)
        if self.window is not None:
            widx = [month_index(m) for m in self.window]
            keep = (cal["month_idx"] >= min(widx)) & (cal["month_idx"] <= max(widx))
        codes = codes[keep]
        n_dev = len(devices)
        month = cal["month_idx"][keep]
        day = cal["day"][keep]

        pings_total = np.bincount(codes, minlength=n_dev)
        dev_month = np.unique(codes.astype(np.int64) << 24 | (month - month.min() if len(month) else month))
        months_obs = np.bincount(dev_month >> 24, minlength=n_dev)
        mean_ppm = pings_total / np.maximum(months_obs, 1)

        # distinct local days, then days per (device, year)
        dev_day = np.unique(codes.astype(np.int64) << 24 | day)
        dd_dev, dd_day = dev_day >> 24, dev_day & ((1 << 24) - 1)
        dd_year = day_to_month_idx(dd_day) // 12
        dev_year, days_per_year = np.unique(dd_dev << 16 | dd_year, return_counts=True)
        min_days = np.full(n_dev, np.iinfo(np.int64).max, dtype=np.int64)
        np.minimum.at(min_days, dev_year >> 16, days_per_year)
        min_days[months_obs == 0] = 0

        passed = (months_obs > 0) & (mean_ppm >= self.min_pings_per_month) & (min_days >= self.min_active_days)
        self.quality_ = pd.DataFrame({
            "device_id": np.asarray(devices, dtype=object),
            "pings": pings_total,
            "months_observed": months_obs,
            "mean_pings_per_month": mean_ppm,
            "min_active_days_per_year": min_days,
            "passed": passed,
        })
        self.devices_ = frozenset(np.asarray(devices, dtype=object)[passed].tolist())
        return self

    def transform(self, X):
        check_is_fitted(self, "devices_")
        pings = check_ping_frame(X)
        return pings[pings["device_id"].isin(self.devices_)].reset_index(drop=True)


def filter_devices(pings: pd.DataFrame, window, min_pings_per_month=50, min_active_days=10,
                   tz: str = DEFAULT_TZ) -> set:
    window = list(window)
    if not window:
        raise ValueError("window must contain at least one month")
    f = DeviceFilter(min_pings_per_month, min_active_days, window, tz).fit(pings)
    return set(f.devices_)
