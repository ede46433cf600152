"""Visitor-mix metrics of POIs and the exposure of individuals to them."""

from __future__ import annotations

import math

import numpy as np
import pandas as pd
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_columns

HIGH_INCOME_STRATA = (4, 5, 6)
MAX_ENTROPY = math.log(6.0)
PROFILE_COLUMNS = ["poi_id", "n1", "n2", "n3", "n4", "n5", "n6", "entropy", "high_income_share"]
EXPOSURE_COLUMNS = ["device_id", "month", "poi_visits", "unique_pois", "mean_entropy", "mean_high_share"]


def shannon_entropy(counts) -> np.ndarray:
    """Natural-log entropy of each row of a count matrix (zero cells skipped)."""
    c = np.atleast_2d(np.asarray(counts, dtype=float))
    total = c.sum(axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        p = c / total
        terms = np.where(c > 0, p * np.log(np.where(c > 0, p, 1.0)), 0.0)
    h = -terms.sum(axis=1)
    # one occupied stratum gives exactly zero, not -0.0 or rounding noise
    h[(c > 0).sum(axis=1) <= 1] = 0.0
    return h


def high_income_share(counts, strata=HIGH_INCOME_STRATA) -> np.ndarray:
    c = np.atleast_2d(np.asarray(counts, dtype=float))
    cols = [s - 1 for s in strata]
    return c[:, cols].sum(axis=1) / c.sum(axis=1)


def attach_visitor_strata(visits: pd.DataFrame, home_strata: pd.DataFrame) -> pd.DataFrame:
    """Join each visit to the visitor's home stratum in the visit month.

    Visits without a known home stratum are dropped.
    """
    check_columns(visits, ["device_id", "month", "poi_id"], "visits")
    check_columns(home_strata, ["device_id", "month", "stratum"], "home strata")
    v = visits[visits["poi_id"].astype(str).str.len() > 0]
    hs = home_strata[["device_id", "month", "stratum"]]
    hs = hs[(hs["stratum"] >= 1) & (hs["stratum"] <= 6)]
    return v.merge(hs, on=["device_id", "month"], how="inner", validate="many_to_one")


class VisitorMixProfiler(TransformerMixin, BaseEstimator):
    """Frozen POI visitor profiles and per device-month exposure.

    ``fit`` counts visits to each POI by the visitor's home stratum over the
    whole input and stores entropy and high-income share per POI. Those
    profiles stay fixed; ``transform`` averages them over each device's
    matched visits in a month.

    Parameters
    ----------
    high_income_strata : tuple of int, default=(4, 5, 6)
    weighting : {"visits", "unique"}, default="visits"
        ``"visits"`` weights each POI by how often the device visited it
        that month; ``"unique"`` counts each visited POI once.
    """

    def __init__(self, high_income_strata=HIGH_INCOME_STRATA, weighting="visits"):
        self.high_income_strata = high_income_strata
        self.weighting = weighting

    def fit(self, X, y=None):
        """X: visits with ``poi_id`` and visitor ``stratum`` (1..6)."""
        visits = check_columns(X, ["poi_id", "stratum"], "visits")
        visits = visits[visits["poi_id"].astype(str).str.len() > 0]
        strata = visits["stratum"].to_numpy(dtype=np.int64)
        if ((strata < 1) | (strata > 6)).any():
            raise ValueError("visitor stratum must lie in 1..6")
        codes, pois = pd.factorize(visits["poi_id"].astype(str), sort=True)
        counts = np.zeros((len(pois), 6), dtype=np.int64)
        np.add.at(counts, (codes, strata - 1), 1)
        profiles = pd.DataFrame(counts, columns=[f"n{s}" for s in range(1, 7)])
        profiles.insert(0, "poi_id", np.asarray(pois, dtype=object))
        profiles["entropy"] = shannon_entropy(counts) if len(pois) else np.empty(0)
        profiles["high_income_share"] = (high_income_share(counts, self.high_income_strata)
                                         if len(pois) else np.empty(0))
        self.profiles_ = profiles
        return self

    def transform(self, X):
        """X: visits with ``device_id``, ``month``, ``poi_id``."""
        check_is_fitted(self, "profiles_")
        if self.weighting not in ("visits", "unique"):
            raise ValueError(f"unknown weighting {self.weighting!r}")
        visits = check_columns(X, ["device_id", "month", "poi_id"], "visits")
        visits = visits[visits["poi_id"].astype(str).str.len() > 0]
        prof = self.profiles_[["poi_id", "entropy", "high_income_share"]]
        j = visits[["device_id", "month", "poi_id"]].merge(prof, on="poi_id", how="inner")
        keys = ["device_id", "month"]
        counts = j.groupby(keys, sort=True).agg(poi_visits=("poi_id", "size"),
                                                unique_pois=("poi_id", "nunique"))
        base = j.drop_duplicates(keys + ["poi_id"]) if self.weighting == "unique" else j
        means = base.groupby(keys, sort=True).agg(mean_entropy=("entropy", "mean"),
                                                  mean_high_share=("high_income_share", "mean"))
        out = counts.join(means).reset_index()
        return out[EXPOSURE_COLUMNS]


def poi_profiles(visits: pd.DataFrame, home_strata: pd.DataFrame,
                 high_income_strata=HIGH_INCOME_STRATA) -> pd.DataFrame:
    """Visitor profile per POI from matched visits and monthly home strata."""
    joined = attach_visitor_strata(visits, home_strata)
    return VisitorMixProfiler(high_income_strata).fit(joined).profiles_


def exposure_by_device_month(visits: pd.DataFrame, profiles: pd.DataFrame,
                             weighting: str = "visits") -> pd.DataFrame:
    prof = VisitorMixProfiler(weighting=weighting)
    prof.profiles_ = check_columns(profiles, ["poi_id", "entropy", "high_income_share"], "profiles")
    return prof.transform(visits)
