"""ARIMA(p, d, q) by conditional sum of squares, order search, rolling one-step forecasts.

The differenced series ``w`` follows
``w[j] = c + sum_i phi_i w[j-i] + e[j] + sum_k theta_k e[j-k]`` with
residuals before the conditioning index taken as zero. Pure AR models are
solved exactly by least squares; models with MA terms by nonlinear least
squares on the residual vector.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from math import comb

import numpy as np
from scipy.optimize import least_squares
from scipy.signal import lfilter

from .market_data import DateRange
from .predictor import PredictionRecord, range_indices

logger = logging.getLogger(__name__)

Z_CRIT_5PCT = 1.959963984540054


class ArimaError(RuntimeError):
    pass


@dataclass
class ArimaModel:
    order: tuple
    const: float
    ar: np.ndarray
    ma: np.ndarray
    sigma2: float
    loglik: float
    aic: float
    bic: float
    stderr: np.ndarray          # aligned with coef_vector()
    n_eff: int
    include_mean: bool = True
    converged: bool = True
    flags: list = field(default_factory=list)

    def coef_vector(self) -> np.ndarray:
        head = [self.const] if self.include_mean else []
        return np.concatenate([head, self.ar, self.ma])

    @property
    def zstats(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return self.coef_vector() / self.stderr

    def significant(self, z_crit: float = Z_CRIT_5PCT) -> bool:
        """All AR and MA coefficients significant (the intercept is not tested)."""
        off = 1 if self.include_mean else 0
        z = self.zstats[off:]
        return bool(np.all(np.isfinite(z)) and np.all(np.abs(z) > z_crit))

    @property
    def stationary(self) -> bool:
        return _roots_outside_unit_circle(-self.ar)

    @property
    def invertible(self) -> bool:
        return _roots_outside_unit_circle(self.ma)

    def forecast_next(self, y) -> float:
        """One-step-ahead level forecast given the full level history ``y``."""
        p, d, _ = self.order
        y = np.asarray(y, dtype=np.float64)
        w = np.diff(y, n=d) if d else y
        e = css_residuals(w, self.const if self.include_mean else 0.0, self.ar, self.ma, p)
        w_hat = (self.const if self.include_mean else 0.0)
        w_hat += sum(self.ar[i] * w[-1 - i] for i in range(p))
        w_hat += sum(self.ma[k] * e[-1 - k] for k in range(len(self.ma)))
        return float(undifference(w_hat, y, d))


def _roots_outside_unit_circle(coefs) -> bool:
    """Roots of ``1 + sum coefs[k] z^(k+1)`` all outside the unit circle."""
    coefs = np.asarray(coefs, dtype=np.float64)
    if coefs.size == 0 or np.all(coefs == 0):
        return True
    poly = np.concatenate([[1.0], coefs])[::-1]
    return bool(np.all(np.abs(np.roots(poly)) > 1.0))


def undifference(w_next: float, y, d: int) -> float:
    """Level value whose d-th difference with the tail of ``y`` equals ``w_next``."""
    out = w_next
    for k in range(1, d + 1):
        out -= (-1) ** k * comb(d, k) * y[-k]
    return out


def css_residuals(w, const, ar, ma, start):
    """Residuals for indices ``start..``; zero before ``start``."""
    w = np.asarray(w, dtype=np.float64)
    n = len(w)
    u = w[start:] - const
    for i, phi in enumerate(ar, start=1):
        u = u - phi * w[start - i:n - i]
    e = np.zeros(n)
    if len(ma):
        e[start:] = lfilter([1.0], np.concatenate([[1.0], ma]), u)
    else:
        e[start:] = u
    return e


def _design(w, p, start, include_mean):
    cols = [np.ones(len(w) - start)] if include_mean else []
    cols += [w[start - i:len(w) - i] for i in range(1, p + 1)]
    return np.column_stack(cols) if cols else np.zeros((len(w) - start, 0))


def fit_arima(y, p: int, d: int, q: int, include_mean: bool = True, start: int | None = None,
              x0=None) -> ArimaModel:
    """Fit ARIMA(p, d, q) to the level series ``y`` by conditional sum of squares.

    ``start`` is the index into the differenced series of the first residual
    that enters the likelihood (default ``p``); passing a common start makes
    information criteria comparable across orders.
    """
    y = np.asarray(y, dtype=np.float64)
    w = np.diff(y, n=d) if d else y
    start = p if start is None else start
    if start < p:
        raise ValueError("start must be >= p")
    n_eff = len(w) - start
    k_coef = p + q + int(include_mean)
    if n_eff <= k_coef + 1:
        raise ArimaError(f"series too short for ARIMA({p},{d},{q})")

    def unpack(theta):
        c = theta[0] if include_mean else 0.0
        off = int(include_mean)
        return c, theta[off:off + p], theta[off + p:]

    def resid(theta):
        c, ar, ma = unpack(theta)
        return css_residuals(w, c, ar, ma, start)[start:]

    X = _design(w, p, start, include_mean)
    target = w[start:]
    converged = True
    if q == 0:
        if k_coef:
            theta, *_ = np.linalg.lstsq(X, target, rcond=None)
        else:
            theta = np.zeros(0)
        J = -X
    else:
        if x0 is None:
            base = np.linalg.lstsq(X, target, rcond=None)[0] if k_coef - q else np.zeros(0)
            x0 = np.concatenate([base, np.zeros(q)])
        sol = least_squares(resid, np.asarray(x0, dtype=float), method="lm",
                            x_scale="jac", max_nfev=2000)
        theta, J = sol.x, sol.jac
        converged = sol.status > 0
    e = resid(theta)
    ss = float(e @ e)
    if not math.isfinite(ss):
        raise ArimaError(f"non-finite residuals for ARIMA({p},{d},{q})")
    sigma2 = ss / n_eff
    if sigma2 <= 0:
        sigma2 = np.finfo(float).tiny
    loglik = -0.5 * n_eff * (math.log(2 * math.pi * sigma2) + 1.0)
    k = k_coef + 1
    if k_coef:
        try:
            cov = sigma2 * np.linalg.inv(J.T @ J)
            stderr = np.sqrt(np.clip(np.diag(cov), 0, None))
        except np.linalg.LinAlgError:
            stderr = np.full(k_coef, np.inf)
    else:
        stderr = np.zeros(0)
    c, ar, ma = unpack(theta)
    model = ArimaModel((p, d, q), float(c), np.array(ar, dtype=float), np.array(ma, dtype=float),
                       sigma2, loglik, 2 * k - 2 * loglik, k * math.log(n_eff) - 2 * loglik,
                       stderr, n_eff, include_mean, converged)
    if not converged:
        model.flags.append("not_converged")
    if not model.stationary:
        model.flags.append("non_stationary")
    if not model.invertible:
        model.flags.append("non_invertible")
    return model


@dataclass
class OrderSearch:
    best: ArimaModel
    candidates: list
    significant: bool


def select_order(y, max_order: int = 3, include_mean: bool = True) -> OrderSearch:
    """Grid over ``p, d, q`` in ``0..max_order``; lowest AIC (BIC tiebreak) among
    candidates whose AR/MA coefficients are all significant at 5% and whose
    estimates are stationary and invertible.

    Every candidate is scored on the same stretch of the original series so
    the criteria are comparable. When no candidate qualifies the lowest-AIC
    fit is returned with ``significant=False``.
    """
    s0 = 2 * max_order
    fits = []
    for d in range(max_order + 1):
        for p in range(max_order + 1):
            for q in range(max_order + 1):
                try:
                    fits.append(fit_arima(y, p, d, q, include_mean, start=s0 - d))
                except (ArimaError, np.linalg.LinAlgError, ValueError) as exc:
                    logger.debug("ARIMA(%d,%d,%d) failed: %s", p, d, q, exc)
    if not fits:
        raise ArimaError("no ARIMA candidate could be fitted")
    key = lambda m: (m.aic, m.bic, m.order)
    ok = [m for m in fits if m.significant() and m.converged and m.stationary and m.invertible]
    if ok:
        return OrderSearch(min(ok, key=key), fits, True)
    best = min(fits, key=key)
    best.flags.append("not_significant")
    return OrderSearch(best, fits, False)


def rolling_forecast(dates, y, order, date_range: DateRange, include_mean: bool = True,
                     refit: str = "daily", model: ArimaModel | None = None):
    """One-step forecasts for every day in range, as prediction records.

    ``refit="daily"`` re-estimates coefficients on all data up to each day
    (warm-started from the previous day); ``"fixed"`` keeps ``model`` (or a
    fit on the data before the range). A failed re-estimation keeps the
    previous coefficients. Returns ``(records, flagged_dates)``.
    """
    if refit not in ("daily", "fixed"):
        raise ValueError("refit must be 'daily' or 'fixed'")
    y = np.asarray(y, dtype=np.float64)
    p, d, q = order
    days = range_indices(dates, date_range)
    if not days:
        raise ValueError("no days in range")
    if model is None:
        model = fit_arima(y[:days[0] + 1] if refit == "daily" else y[:days[0]],
                          p, d, q, include_mean)
    records, flagged = [], []
    for k in days:
        hist = y[:k + 1]
        if refit == "daily":
            try:
                model = fit_arima(hist, p, d, q, include_mean, x0=model.coef_vector() if q else None)
            except (ArimaError, np.linalg.LinAlgError, ValueError) as exc:
                logger.warning("%s: ARIMA refit failed (%s), keeping coefficients", dates[k], exc)
                flagged.append(dates[k])
        y_hat = model.forecast_next(hist)
        y_next = y[k + 1] if k + 1 < len(y) else None
        records.append(PredictionRecord.make(dates[k], y[k], y_hat, y_next))
    return records, flagged
