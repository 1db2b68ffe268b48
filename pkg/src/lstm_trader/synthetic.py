"""Synthetic daily price series for tests, examples and smoke runs."""

from __future__ import annotations

from datetime import date, timedelta

import numpy as np

from .market_data import Bar, PriceSeries


def business_days(start: date, n: int) -> list[date]:
    out, d = [], start
    while len(out) < n:
        if d.weekday() < 5:
            out.append(d)
        d += timedelta(days=1)
    return out


def random_walk_series(n: int, seed: int = 0, start: date = date(2004, 1, 1),
                       p0: float = 100.0, drift: float = 0.0003, vol: float = 0.01,
                       name: str = "synthetic") -> PriceSeries:
    """Geometric random walk with consistent OHLC bars on weekdays."""
    rng = np.random.default_rng(seed)
    close = p0 * np.exp(np.cumsum(drift + vol * rng.standard_normal(n)))
    opens = np.concatenate([[p0], close[:-1]]) * np.exp(0.002 * rng.standard_normal(n))
    spread = np.abs(0.004 * rng.standard_normal((2, n)))
    high = np.maximum(opens, close) * (1 + spread[0])
    low = np.minimum(opens, close) * (1 - spread[1])
    bars = [Bar(d, float(o), float(h), float(lo), float(c), float(c), 1_000_000)
            for d, o, h, lo, c in zip(business_days(start, n), opens, high, low, close)]
    return PriceSeries.from_bars(bars, name=name)


def sine_series(n: int, start: date = date(2004, 1, 1), level: float = 100.0,
                amplitude: float = 5.0, period: float = 20.0) -> PriceSeries:
    """Noiseless sinusoid around ``level``; OHLC all equal to the close."""
    c = level + amplitude * np.sin(2 * np.pi * np.arange(n) / period)
    bars = [Bar(d, float(v), float(v), float(v), float(v), float(v), 0)
            for d, v in zip(business_days(start, n), c)]
    return PriceSeries.from_bars(bars, name="sine")
