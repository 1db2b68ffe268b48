"""Forecast-error metrics, return/risk metrics, directional and accuracy tests."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import norm

TRADING_DAYS = 252


@dataclass
class ErrorMetrics:
    MDA: float
    MAPE: float          # percent
    MAE: float
    MSE: float
    R2_pearson: float | None  # Pearson correlation of realized vs predicted prices
    n: int


@dataclass
class ReturnMetrics:
    CR: float            # percent
    AR: float            # percent
    AV: float            # percent, annualized
    SR: float | None
    DD: float            # percent, <= 0
    N: int               # number of daily returns


@dataclass
class StatTest:
    statistic: float | None
    p_value: float | None
    note: str = ""


@dataclass
class PerformanceReport:
    strategy: str
    start: str
    end: str
    returns: ReturnMetrics
    errors: ErrorMetrics | None = None
    trade_count: int = 0
    pt: StatTest | None = None
    dm: StatTest | None = None
    fingerprint: str = ""
    seed: int | None = None
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(_clean(self.to_dict()), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "PerformanceReport":
        d = dict(d)
        d["returns"] = ReturnMetrics(**d["returns"])
        if d.get("errors"):
            d["errors"] = ErrorMetrics(**d["errors"])
        for k in ("pt", "dm"):
            if d.get(k):
                d[k] = StatTest(**d[k])
        return cls(**d)


def _clean(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def error_metrics_arrays(y_prev, y_hat, y) -> ErrorMetrics:
    """Metrics for predictions ``y_hat`` of realized ``y``, each made when the price was ``y_prev``.

    A day counts as directionally correct only when the predicted and the
    realized moves have a strictly positive product.
    """
    y_prev, y_hat, y = (np.asarray(a, dtype=np.float64) for a in (y_prev, y_hat, y))
    if not (y_prev.shape == y_hat.shape == y.shape) or y.ndim != 1:
        raise ValueError("metric inputs must be equal-length vectors")
    if len(y) < 2:
        raise ValueError("need at least 2 realized predictions")
    err = y - y_hat
    mda = float(np.mean(np.sign(y_hat - y_prev) * np.sign(y - y_prev) > 0))
    dy, dp = y - y.mean(), y_hat - y_hat.mean()
    denom = math.sqrt(float(np.sum(dy * dy))) * math.sqrt(float(np.sum(dp * dp)))
    r2 = float(np.sum(dy * dp) / denom) if denom > 0 else None
    return ErrorMetrics(mda, float(np.mean(np.abs(err) / y) * 100), float(np.mean(np.abs(err))),
                        float(np.mean(err * err)), r2, len(y))


def error_metrics(records) -> ErrorMetrics:
    from .predictor import complete_arrays
    return error_metrics_arrays(*complete_arrays(records))


def equity_from_returns(returns, start: float = 1.0) -> np.ndarray:
    return start * np.concatenate([[1.0], np.cumprod(1.0 + np.asarray(returns, dtype=float))])


def max_drawdown(values) -> float:
    v = np.asarray(values, dtype=np.float64)
    return float(np.min(v / np.maximum.accumulate(v) - 1.0))


def return_metrics(equity, trading_days: int = TRADING_DAYS,
                   risk_free: float = 0.0) -> ReturnMetrics:
    """CR, AR, AV, SR and DD of an equity curve (values, or anything with ``.values``).

    ``N`` is the number of daily returns. AV uses the sample standard
    deviation; SR is absent when volatility is zero. Percent outputs.
    """
    values = np.asarray(getattr(equity, "values", equity), dtype=np.float64)
    if len(values) < 2:
        raise ValueError("equity curve needs at least 2 points")
    if np.any(values <= 0):
        raise ValueError("equity must be strictly positive")
    rets = values[1:] / values[:-1] - 1.0
    N = len(rets)
    cr = float(np.prod(1.0 + rets) - 1.0)
    ar = (1.0 + cr) ** (trading_days / N) - 1.0
    av = float(np.std(rets, ddof=1) * math.sqrt(trading_days)) if N > 1 else 0.0
    sr = (ar - risk_free) / av if av > 0 else None
    return ReturnMetrics(cr * 100, ar * 100, av * 100, sr, max_drawdown(values) * 100, N)


def pesaran_timmermann(actual_changes, predicted_changes) -> StatTest:
    """Directional-accuracy test; one-sided p-value from the upper normal tail.

    Inputs are realized and predicted moves (signs matter). Returns an
    absent statistic when either marginal is degenerate.
    """
    a = np.asarray(actual_changes, dtype=np.float64)
    f = np.asarray(predicted_changes, dtype=np.float64)
    if a.shape != f.shape:
        raise ValueError("length mismatch")
    n = len(a)
    if n < 30:
        raise ValueError("need at least 30 direction pairs")
    py = float(np.mean(a > 0))
    px = float(np.mean(f > 0))
    p_hat = float(np.mean(a * f > 0))
    p_star = py * px + (1 - py) * (1 - px)
    v_hat = p_star * (1 - p_star) / n
    v_star = ((2 * py - 1) ** 2 * px * (1 - px) / n
              + (2 * px - 1) ** 2 * py * (1 - py) / n
              + 4 * py * px * (1 - py) * (1 - px) / n ** 2)
    if py in (0.0, 1.0) or px in (0.0, 1.0) or v_hat - v_star <= 0:
        return StatTest(None, None, "degenerate direction marginals")
    stat = (p_hat - p_star) / math.sqrt(v_hat - v_star)
    return StatTest(stat, float(norm.sf(stat)))


def pesaran_timmermann_records(records) -> StatTest:
    from .predictor import complete_arrays
    y_prev, y_hat, y = complete_arrays(records)
    return pesaran_timmermann(y - y_prev, y_hat - y_prev)


def squared_error(e):
    return e * e


def absolute_error(e):
    return np.abs(e)


def diebold_mariano(actual, pred_a, pred_b, loss=squared_error) -> StatTest:
    """One-step Diebold-Mariano test on ``d = L(e_a) - L(e_b)``.

    Negative statistics favour ``pred_a``. The p-value is the lower normal
    tail, i.e. small when forecast ``a`` is significantly more accurate.
    """
    y, a, b = (np.asarray(v, dtype=np.float64) for v in (actual, pred_a, pred_b))
    if not (y.shape == a.shape == b.shape):
        raise ValueError("forecasts must be aligned with the realized values")
    if len(y) < 30:
        raise ValueError("need at least 30 forecast pairs")
    d = loss(y - a) - loss(y - b)
    var = float(np.mean((d - d.mean()) ** 2))
    if var == 0.0:
        return StatTest(None, None, "indistinguishable forecasts")
    stat = float(d.mean() / math.sqrt(var / len(d)))
    return StatTest(stat, float(norm.cdf(stat)))


def align_records(records_a, records_b):
    """Realized values and both forecasts on the dates where both streams are complete."""
    a = {r.date: r for r in records_a if r.y_hat_next is not None and r.y_next is not None}
    b = {r.date: r for r in records_b if r.y_hat_next is not None and r.y_next is not None}
    common = sorted(set(a) & set(b))
    y = np.array([a[d].y_next for d in common])
    if not np.allclose(y, [b[d].y_next for d in common], rtol=1e-12, atol=0):
        raise ValueError("prediction streams disagree on realized prices")
    return y, np.array([a[d].y_hat_next for d in common]), np.array([b[d].y_hat_next for d in common])


def _pct(v, digits=1):
    return "-" if v is None else f"{v:.{digits}f}%"


def _num(v, digits=2):
    return "-" if v is None else f"{v:.{digits}f}"


def report_table(reports) -> str:
    """Plain-text returns/risk table, one row per report."""
    lines = [f"{'strategy':<24} {'CR':>9} {'AR':>8} {'AV':>8} {'SR':>6} {'DD':>8} {'trades':>7}"]
    for r in reports:
        m = r.returns
        lines.append(f"{r.strategy:<24} {_pct(m.CR):>9} {_pct(m.AR):>8} {_pct(m.AV):>8} "
                     f"{_num(m.SR, 1):>6} {_pct(m.DD):>8} {r.trade_count:>7}")
    return "\n".join(lines) + "\n"


def error_table(reports) -> str:
    rows = [("MDA", lambda e: _pct(e.MDA * 100, 2)), ("MAPE", lambda e: _pct(e.MAPE, 2)),
            ("MAE", lambda e: _num(e.MAE)), ("MSE", lambda e: _num(e.MSE)),
            ("R2", lambda e: _pct(None if e.R2_pearson is None else e.R2_pearson * 100, 2))]
    with_err = [r for r in reports if r.errors is not None]
    if not with_err:
        return ""
    lines = [f"{'metric':<8}" + "".join(f" {r.strategy:>18}" for r in with_err)]
    for name, fmt in rows:
        lines.append(f"{name:<8}" + "".join(f" {fmt(r.errors):>18}" for r in with_err))
    return "\n".join(lines) + "\n"
