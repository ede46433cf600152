"""Month arithmetic and local civil-time helpers."""

from __future__ import annotations

import re

import numpy as np
import pandas as pd

DEFAULT_TZ = "America/Bogota"

_MONTH_RE = re.compile(r"^(\d{4})-(\d{2})(?:-\d{2})?$")


def parse_month(value) -> str:
    """Normalise ``2018-07`` / ``2018-07-01`` / ``pd.Period`` to ``"2018-07"``."""
    if isinstance(value, pd.Period):
        return f"{value.year:04d}-{value.month:02d}"
    m = _MONTH_RE.match(str(value).strip())
    if not m or not 1 <= int(m.group(2)) <= 12:
        raise ValueError(f"not a month: {value!r}")
    return f"{m.group(1)}-{m.group(2)}"


def month_index(month) -> int:
    """Months since year 0; consecutive months differ by one."""
    y, m = parse_month(month).split("-")
    return int(y) * 12 + int(m) - 1


def month_from_index(idx: int) -> str:
    return f"{idx // 12:04d}-{idx % 12 + 1:02d}"


def month_range(start, end) -> list[str]:
    """Inclusive list of months between ``start`` and ``end``."""
    a, b = month_index(start), month_index(end)
    if b < a:
        raise ValueError(f"empty month window {start}..{end}")
    return [month_from_index(i) for i in range(a, b + 1)]


def window_bounds_utc(months, tz: str = DEFAULT_TZ) -> tuple[int, int]:
    """Epoch-second bounds ``[lo, hi)`` of a month window in local civil time."""
    first, last = months[0], months[-1]
    lo = pd.Timestamp(f"{first}-01").tz_localize(tz)
    hi = (pd.Timestamp(f"{last}-01") + pd.offsets.MonthBegin(1)).tz_localize(tz)
    return int(lo.value // 10**9), int(hi.value // 10**9)


def local_calendar(t, tz: str = DEFAULT_TZ) -> dict[str, np.ndarray]:
    """Local-time fields for epoch seconds.

    Returns ``day`` (days since 1970-01-01 in local time), ``month_idx``,
    ``year`` and ``minute`` (minute of the local day).
    """
    t = np.asarray(t, dtype=np.int64)
    if t.size == 0:
        empty = np.empty(0, dtype=np.int64)
        return {"day": empty, "month_idx": empty, "year": empty, "minute": empty}
    idx = pd.DatetimeIndex(pd.to_datetime(t, unit="s", utc=True)).tz_convert(tz)
    offset = np.asarray(idx.tz_localize(None).asi8 // 10**9 - t, dtype=np.int64)
    local = t + offset
    day = np.floor_divide(local, 86400)
    year = np.asarray(idx.year, dtype=np.int64)
    month = np.asarray(idx.month, dtype=np.int64)
    minute = np.floor_divide(local - day * 86400, 60)
    return {"day": day, "month_idx": year * 12 + month - 1, "year": year, "minute": minute}


def month_labels(idx) -> np.ndarray:
    """Vectorized :func:`month_from_index` returning an object array."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size == 0:
        return np.empty(0, dtype=object)
    uniq, inv = np.unique(idx, return_inverse=True)
    labels = np.array([month_from_index(int(u)) for u in uniq], dtype=object)
    return labels[inv.reshape(idx.shape)]


def local_month_labels(t, tz: str = DEFAULT_TZ) -> np.ndarray:
    return month_labels(local_calendar(t, tz)["month_idx"])


def day_to_month_idx(day) -> np.ndarray:
    """Month index of local day numbers (days since the epoch)."""
    d = pd.to_datetime(np.asarray(day, dtype=np.int64), unit="D")
    return np.asarray(d.year, dtype=np.int64) * 12 + np.asarray(d.month, dtype=np.int64) - 1


def parse_clock(value: str) -> int:
    """``"22:30"`` -> minutes after midnight."""
    hh, mm = str(value).strip().split(":")
    h, m = int(hh), int(mm)
    if not (0 <= h < 24 and 0 <= m < 60):
        raise ValueError(f"bad clock time {value!r}")
    return h * 60 + m
