"""Input validation shared by the estimators."""

from __future__ import annotations

import numpy as np
import pandas as pd

PING_FIELDS = ("device_id", "t", "lat", "lon")


def check_columns(X, required, name="input") -> pd.DataFrame:
    if not isinstance(X, pd.DataFrame):
        raise TypeError(f"{name} must be a pandas DataFrame, got {type(X).__name__}")
    missing = [c for c in required if c not in X.columns]
    if missing:
        raise ValueError(f"{name} is missing columns {missing}")
    return X


def check_latlon(lat, lon) -> tuple[np.ndarray, np.ndarray]:
    lat = np.asarray(lat, dtype=float)
    lon = np.asarray(lon, dtype=float)
    if np.isnan(lat).any() or np.isnan(lon).any():
        raise ValueError("coordinates contain NaN")
    if (np.abs(lat) > 90).any():
        raise ValueError("lat out of range")
    if (np.abs(lon) > 180).any():
        raise ValueError("lon out of range")
    return lat, lon


def check_ping_frame(X) -> pd.DataFrame:
    X = check_columns(X, PING_FIELDS, "pings")
    check_latlon(X["lat"].to_numpy(), X["lon"].to_numpy())
    if not np.issubdtype(X["t"].dtype, np.integer):
        raise TypeError("ping column 't' must hold integer epoch seconds")
    return X


def check_positive(**kwargs) -> None:
    for name, value in kwargs.items():
        if value is None or not value > 0:
            raise ValueError(f"{name} must be positive, got {value!r}")
