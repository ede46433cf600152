"""Event-study two-way fixed-effects estimation.

The model regresses a unit-by-period outcome on treated-unit-by-period
indicators (one per period except the base period) while absorbing unit
and period intercepts. Fixed effects are removed by alternating
projections; a full dummy-variable regression is kept as a verification
mode and must agree to numerical precision.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import sparse, stats
from scipy.sparse.csgraph import connected_components
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_columns
from .timeutil import month_index, parse_month

SE_MODES = ("cluster", "hc1")
METHODS = ("demean", "dummy")


class EstimationError(RuntimeError):
    """Base class for failures of the event-study fit."""


class SingularDesignError(EstimationError):
    def __init__(self, terms):
        self.terms = list(terms)
        super().__init__("design is rank deficient; collinear terms: " + ", ".join(self.terms))


class ConvergenceError(EstimationError):
    pass


# --------------------------------------------------------------------------
# numerical kernels


def _group_mean(x: np.ndarray, codes: np.ndarray, w: np.ndarray, wsum: np.ndarray) -> np.ndarray:
    """Weighted group means of each column of ``x`` broadcast back to rows."""
    k = x.shape[1]
    n_groups = len(wsum)
    sums = np.empty((n_groups, k))
    wx = x * w[:, None]
    for j in range(k):
        sums[:, j] = np.bincount(codes, weights=wx[:, j], minlength=n_groups)
    return (sums / wsum[:, None])[codes]


def demean_two_way(x, units, periods, weights=None, tol=1e-10, max_iter=10_000, scale=None):
    """Sweep out unit and period means until a fixed point.

    Parameters
    ----------
    x : ndarray (n, k)
    units, periods : int codes (n,)
    weights : ndarray (n,), optional
    tol : float
        Stop when no entry changes by more than ``tol * scale`` in a sweep.
    scale : float, optional
        Defaults to the largest absolute entry of ``x``.

    Returns
    -------
    residual : ndarray (n, k)
    n_iter : int
    """
    x = np.array(x, dtype=float, copy=True)
    if x.ndim == 1:
        x = x[:, None]
    w = np.ones(len(x)) if weights is None else np.asarray(weights, dtype=float)
    wu = np.bincount(units, weights=w)
    wt = np.bincount(periods, weights=w)
    if scale is None:
        scale = float(np.abs(x).max()) if x.size else 1.0
    scale = scale if scale > 0 else 1.0
    for it in range(1, max_iter + 1):
        prev = x.copy()
        x -= _group_mean(x, units, w, wu)
        x -= _group_mean(x, periods, w, wt)
        if np.abs(x - prev).max(initial=0.0) <= tol * scale:
            return x, it
    raise ConvergenceError(f"alternating projections did not converge in {max_iter} sweeps")


def recover_effects(r, units, periods, weights=None, tol=1e-12, max_iter=10_000):
    """Unit and period intercepts of ``r`` (first period normalised to zero)."""
    w = np.ones(len(r)) if weights is None else np.asarray(weights, dtype=float)
    n_u, n_t = units.max() + 1, periods.max() + 1
    wu = np.bincount(units, weights=w, minlength=n_u)
    wt = np.bincount(periods, weights=w, minlength=n_t)
    a = np.zeros(n_u)
    b = np.zeros(n_t)
    scale = max(float(np.abs(r).max(initial=0.0)), 1e-300)
    for _ in range(max_iter):
        a_new = np.bincount(units, weights=w * (r - b[periods]), minlength=n_u) / wu
        b_new = np.bincount(periods, weights=w * (r - a_new[units]), minlength=n_t) / wt
        delta = max(np.abs(a_new - a).max(), np.abs(b_new - b).max())
        a, b = a_new, b_new
        if delta <= tol * scale:
            break
    a += b[0]
    b -= b[0]
    return a, b


def _rank_check(X: np.ndarray, names, rtol=1e-9):
    if X.shape[1] == 0:
        return
    col_norm = np.linalg.norm(X, axis=0)
    ref = max(col_norm.max(), 1e-300)
    dead = [names[j] for j in range(X.shape[1]) if col_norm[j] <= rtol * ref]
    if dead:
        raise SingularDesignError(dead)
    _, s, vt = np.linalg.svd(X / col_norm, full_matrices=False)
    small = s <= rtol * s.max()
    if small.any():
        load = np.abs(vt[small]).max(axis=0)
        raise SingularDesignError([names[j] for j in range(X.shape[1]) if load[j] > 1e-6])


def sandwich(X, resid, weights, clusters, mode, extra_df=0):
    """Covariance of OLS coefficients of ``X`` (rows pre-weighted by sqrt(w)).

    ``extra_df`` counts absorbed parameters charged to the residual degrees
    of freedom (HC1) or, for clustering, those not nested in clusters.
    """
    n, k = X.shape
    bread = np.linalg.inv(X.T @ X)
    sw = np.sqrt(weights)
    scores = X * (sw * resid)[:, None]
    if mode == "hc1":
        meat = scores.T @ scores
        factor = n / (n - k - extra_df)
    elif mode == "cluster":
        g = int(clusters.max()) + 1
        S = np.zeros((g, k))
        for j in range(k):
            S[:, j] = np.bincount(clusters, weights=scores[:, j], minlength=g)
        meat = S.T @ S
        n_g = len(np.unique(clusters))
        factor = n_g / (n_g - 1) * (n - 1) / (n - k - extra_df)
    else:
        raise ValueError(f"unknown se_mode {mode!r}")
    return factor * bread @ meat @ bread


# --------------------------------------------------------------------------
# results


@dataclass
class EventStudyFit:
    beta: pd.Series
    se: pd.Series
    vcov: pd.DataFrame
    residuals: np.ndarray
    unit_effects: pd.Series
    time_effects: pd.Series
    n_obs: int
    n_units: int
    n_periods: int
    dof: int
    base_period: str
    opening: str | None
    se_mode: str
    method: str
    n_iter: int = 0
    pooled_post_beta: float = float("nan")
    pooled_se: float = float("nan")
    diagnostics: dict = field(default_factory=dict)

    def conf_int(self, z: float = 1.96) -> pd.DataFrame:
        return pd.DataFrame({"ci_lo": self.beta - z * self.se, "ci_hi": self.beta + z * self.se})

    def to_dict(self, pretrend: dict | None = None, z: float = 1.96) -> dict:
        ci = self.conf_int(z)
        periods = [{
            "month": m,
            "beta": float(self.beta[m]),
            "se": float(self.se[m]),
            "ci_lo": float(ci.loc[m, "ci_lo"]),
            "ci_hi": float(ci.loc[m, "ci_hi"]),
        } for m in self.beta.index]
        return {
            "base_period": self.base_period,
            "opening": self.opening,
            "se_mode": self.se_mode,
            "periods": periods,
            "pooled": {"beta": float(self.pooled_post_beta), "se": float(self.pooled_se)},
            "pretrend": pretrend,
            "diagnostics": {
                "method": self.method,
                "n_obs": self.n_obs,
                "n_units": self.n_units,
                "n_periods": self.n_periods,
                "dof": self.dof,
                "n_iter": self.n_iter,
                **self.diagnostics,
            },
        }


# --------------------------------------------------------------------------
# estimator


class EventStudyRegressor(RegressorMixin, BaseEstimator):
    """Two-way fixed-effects event-study regression on a unit-period panel.

    Parameters
    ----------
    base_period : str, default="2018-11"
        Omitted period; its coefficient is normalised to zero.
    opening : str, optional
        First treated period. Inferred from ``cable`` when omitted.
    se_mode : {"cluster", "hc1"}, default="cluster"
        Cluster-robust by unit (CR1) or heteroskedasticity-robust (HC1).
    weighted : bool, default=False
        Weight cells by ``n_devices``.
    method : {"demean", "dummy"}, default="demean"
    tol, max_iter : convergence controls for the alternating projections.
    unit_col, time_col : column names in the panel frame.

    Notes
    -----
    ``fit`` takes the panel frame (``hex_id, month, cable`` plus optional
    ``arm`` and ``n_devices``) and the outcome, either as ``y`` or as a
    ``y`` column. A unit is treated when its ``arm`` is ``"treatment"``; in
    the absence of ``arm`` when any of its cells has ``cable == 1``.
    """

    def __init__(self, base_period="2018-11", opening=None, se_mode="cluster", weighted=False,
                 method="demean", tol=1e-10, max_iter=10_000, unit_col="hex_id", time_col="month"):
        self.base_period = base_period
        self.opening = opening
        self.se_mode = se_mode
        self.weighted = weighted
        self.method = method
        self.tol = tol
        self.max_iter = max_iter
        self.unit_col = unit_col
        self.time_col = time_col

    # -- data preparation ---------------------------------------------------

    def _prepare(self, X, y):
        if self.se_mode not in SE_MODES:
            raise ValueError(f"se_mode must be one of {SE_MODES}")
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        X = check_columns(X, [self.unit_col, self.time_col, "cable"], "panel")
        if y is None:
            check_columns(X, ["y"], "panel")
            y = X["y"]
        y = np.asarray(y, dtype=float)
        if y.shape != (len(X),):
            raise ValueError("y must be one-dimensional and match the panel rows")
        if not np.isfinite(y).all():
            raise ValueError("y contains non-finite values")
        if X[[self.unit_col, self.time_col]].duplicated().any():
            raise ValueError("panel has duplicate unit-period cells")

        unit_codes, units = pd.factorize(X[self.unit_col].astype(str), sort=True)
        months = [parse_month(m) for m in X[self.time_col]]
        mi = np.array([month_index(m) for m in months], dtype=np.int64)
        period_idx = np.unique(mi)
        period_codes = np.searchsorted(period_idx, mi)
        periods = [f"{i // 12:04d}-{i % 12 + 1:02d}" for i in period_idx]
        base = parse_month(self.base_period)
        if base not in periods:
            raise ValueError(f"base period {base} is not in the panel")
        if len(units) < 2 or len(periods) < 2:
            raise ValueError("need at least two units and two periods")

        cable = X["cable"].to_numpy(dtype=np.int64)
        if "arm" in X.columns:
            row_treated = (X["arm"].astype(str) == "treatment").to_numpy()
        else:
            row_treated = cable == 1
        treated_unit = np.zeros(len(units), dtype=bool)
        np.logical_or.at(treated_unit, unit_codes, row_treated)
        if treated_unit.all() or not treated_unit.any():
            raise SingularDesignError(["treated-unit indicator is constant across units"])

        opening = parse_month(self.opening) if self.opening is not None else None
        if opening is None and (cable == 1).any():
            opening = periods[int(period_codes[cable == 1].min())]

        w = np.ones(len(X))
        if self.weighted:
            check_columns(X, ["n_devices"], "panel")
            w = X["n_devices"].to_numpy(dtype=float)
            if (w <= 0).any():
                raise ValueError("weights must be positive")
        return dict(y=y, units=np.asarray(units, dtype=object), unit_codes=unit_codes.astype(np.int64),
                    periods=periods, period_codes=period_codes.astype(np.int64), base=base,
                    treated=treated_unit[unit_codes], treated_unit=treated_unit, w=w, opening=opening)

    @staticmethod
    def _event_design(d, periods_used):
        cols, names = [], []
        for p in periods_used:
            j = d["periods"].index(p)
            cols.append((d["treated"] & (d["period_codes"] == j)).astype(float))
            names.append(p)
        return np.column_stack(cols) if cols else np.empty((len(d["y"]), 0)), names

    def _solve(self, d, D, names):
        """Coefficients, demeaned design, residuals and iteration count."""
        y, w = d["y"], d["w"]
        sw = np.sqrt(w)
        scale = float(np.abs(y).max()) or 1.0
        if self.method == "demean":
            Z, n_iter = demean_two_way(np.column_stack([y, D]), d["unit_codes"], d["period_codes"], w,
                                       tol=self.tol, max_iter=self.max_iter, scale=scale)
            yt, Xt = Z[:, 0], Z[:, 1:]
            Xw = Xt * sw[:, None]
            _rank_check(Xw, names)
            beta, *_ = np.linalg.lstsq(Xw, yt * sw, rcond=None)
            resid = yt - Xt @ beta
            return beta, Xw, resid, n_iter
        n_u = len(d["units"])
        n_t = len(d["periods"])
        U = np.zeros((len(y), n_u))
        U[np.arange(len(y)), d["unit_codes"]] = 1.0
        T = np.zeros((len(y), n_t))
        T[np.arange(len(y)), d["period_codes"]] = 1.0
        full = np.column_stack([D, U, T[:, 1:]])
        full_names = list(names) + [f"unit[{u}]" for u in d["units"]] + [f"period[{p}]" for p in d["periods"][1:]]
        Fw = full * sw[:, None]
        _rank_check(Fw, full_names)
        coef, *_ = np.linalg.lstsq(Fw, y * sw, rcond=None)
        beta = coef[: D.shape[1]]
        resid = y - full @ coef
        # the beta rows of the sandwich only need the FE-partialled design
        A = Fw[:, D.shape[1]:]
        proj, *_ = np.linalg.lstsq(A, D * sw[:, None], rcond=None)
        Xw = D * sw[:, None] - A @ proj
        return beta, Xw, resid, 0

    def _fe_dof(self, d):
        n_u, n_t = len(d["units"]), len(d["periods"])
        graph = sparse.coo_matrix((np.ones(len(d["y"])), (d["unit_codes"], n_u + d["period_codes"])),
                                  shape=(n_u + n_t, n_u + n_t))
        n_comp, _ = connected_components(graph, directed=False)
        return n_u + n_t - n_comp, n_t - 1

    def _cov(self, d, Xw, resid, k):
        fe_all, fe_not_nested = self._fe_dof(d)
        extra = fe_all if self.se_mode == "hc1" else fe_not_nested
        return sandwich(Xw, resid, d["w"], d["unit_codes"], self.se_mode, extra_df=extra)

    # -- public API ----------------------------------------------------------

    def fit(self, X, y=None):
        d = self._prepare(X, y)
        event_periods = [p for p in d["periods"] if p != d["base"]]
        D, names = self._event_design(d, event_periods)
        beta, Xw, resid, n_iter = self._solve(d, D, names)
        V = self._cov(d, Xw, resid, len(names))
        se = np.sqrt(np.diag(V))

        r = d["y"] - D @ beta
        a, b = recover_effects(r, d["unit_codes"], d["period_codes"], d["w"])
        full_resid = r - a[d["unit_codes"]] - b[d["period_codes"]]
        fe_all, _ = self._fe_dof(d)
        n = len(d["y"])
        ortho = np.abs(Xw.T @ (np.sqrt(d["w"]) * resid)).max(initial=0.0) if len(names) else 0.0

        self.fit_ = EventStudyFit(
            beta=pd.Series(beta, index=names, name="beta"),
            se=pd.Series(se, index=names, name="se"),
            vcov=pd.DataFrame(V, index=names, columns=names),
            residuals=full_resid,
            unit_effects=pd.Series(a, index=d["units"], name="unit_effect"),
            time_effects=pd.Series(b, index=d["periods"], name="time_effect"),
            n_obs=n, n_units=len(d["units"]), n_periods=len(d["periods"]),
            dof=int(n - len(names) - fe_all),
            base_period=d["base"], opening=d["opening"], se_mode=self.se_mode,
            method=self.method, n_iter=n_iter,
            diagnostics={"max_abs_score": float(ortho), "weighted": bool(self.weighted)},
        )
        self._data = d
        if d["opening"] is not None and any(p >= d["opening"] for p in d["periods"]):
            pooled, pooled_se = self._pooled(d)
            self.fit_.pooled_post_beta, self.fit_.pooled_se = pooled, pooled_se
        self.coef_ = self.fit_.beta
        self.se_ = self.fit_.se
        self.unit_effects_ = self.fit_.unit_effects
        self.time_effects_ = self.fit_.time_effects
        self.n_iter_ = n_iter
        return self

    def _pooled(self, d, opening=None):
        opening = parse_month(opening or d["opening"])
        post_codes = [j for j, p in enumerate(d["periods"]) if month_index(p) >= month_index(opening)]
        if not post_codes:
            raise ValueError("no post-opening period in the panel")
        D = (d["treated"] & np.isin(d["period_codes"], post_codes)).astype(float)[:, None]
        beta, Xw, resid, _ = self._solve(d, D, ["post"])
        V = self._cov(d, Xw, resid, 1)
        return float(beta[0]), float(np.sqrt(V[0, 0]))

    def pooled_att(self, opening=None) -> tuple[float, float]:
        """Single post-opening coefficient and its standard error."""
        check_is_fitted(self, "fit_")
        return self._pooled(self._data, opening)

    def pretrend_test(self) -> dict:
        check_is_fitted(self, "fit_")
        return pretrend_test(self.fit_)

    def predict(self, X):
        """Fitted values ``unit effect + period effect + event terms``."""
        check_is_fitted(self, "fit_")
        X = check_columns(X, [self.unit_col, self.time_col], "panel")
        fit = self.fit_
        units = X[self.unit_col].astype(str)
        months = [parse_month(m) for m in X[self.time_col]]
        if not units.isin(fit.unit_effects.index).all():
            raise ValueError("panel contains units unseen during fit")
        a = fit.unit_effects.reindex(units).to_numpy()
        b = fit.time_effects.reindex(months).to_numpy()
        if np.isnan(b).any():
            raise ValueError("panel contains periods unseen during fit")
        treated_units = set(np.asarray(self._data["units"])[self._data["treated_unit"]])
        treated = units.isin(treated_units).to_numpy()
        ev = np.array([fit.beta.get(m, 0.0) for m in months])
        return a + b + np.where(treated, ev, 0.0)


# --------------------------------------------------------------------------
# functional interface


def fit_event_study(panel: pd.DataFrame, base_period="2018-11", opening=None, se_mode="cluster",
                    weighted=False, method="demean", **kwargs) -> EventStudyFit:
    est = EventStudyRegressor(base_period=base_period, opening=opening, se_mode=se_mode,
                              weighted=weighted, method=method, **kwargs).fit(panel)
    return est.fit_


def pooled_att(panel: pd.DataFrame, opening, base_period="2018-11", **kwargs) -> tuple[float, float]:
    est = EventStudyRegressor(base_period=base_period, opening=opening, **kwargs).fit(panel)
    return est.fit_.pooled_post_beta, est.fit_.pooled_se


def pretrend_test(fit: EventStudyFit) -> dict:
    """Joint Wald test that every pre-opening coefficient is zero."""
    if fit.opening is None:
        raise ValueError("fit has no opening period; cannot tell pre from post")
    pre = [m for m in fit.beta.index if month_index(m) < month_index(fit.opening)]
    if not pre:
        raise ValueError("no pre-period coefficients besides the base period")
    b = fit.beta[pre].to_numpy()
    V = fit.vcov.loc[pre, pre].to_numpy()
    if np.linalg.cond(V) > 1e12:
        raise EstimationError("pre-period covariance is singular")
    stat = float(b @ np.linalg.solve(V, b))
    df = len(pre)
    return {"stat": stat, "df": df, "p": float(stats.chi2.sf(stat, df))}
