"""Rolling train-then-predict protocol and the naive persistence forecaster."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from datetime import date, timedelta
from pathlib import Path

import numpy as np

from . import lstm
from .market_data import (DataError, DateRange, PriceSeries, atomic_write_text,
                          build_features, format_csv, make_window)

logger = logging.getLogger(__name__)

PREDICTION_HEADER = ["date", "y_t", "y_hat_next", "y_next", "r_hat"]


@dataclass(frozen=True)
class PredictionRecord:
    date: date
    y_t: float
    y_hat_next: float | None
    y_next: float | None = None
    r_hat: float | None = None

    @classmethod
    def make(cls, d, y_t, y_hat_next, y_next=None) -> "PredictionRecord":
        r = None if y_hat_next is None else float(y_hat_next) / float(y_t) - 1.0
        return cls(d, float(y_t), None if y_hat_next is None else float(y_hat_next),
                   None if y_next is None else float(y_next), r)

    @property
    def skipped(self) -> bool:
        return self.y_hat_next is None


def _fmt(v):
    return "" if v is None else repr(float(v))


def write_predictions(records, path) -> None:
    rows = [[r.date.isoformat(), _fmt(r.y_t), _fmt(r.y_hat_next), _fmt(r.y_next), _fmt(r.r_hat)]
            for r in records]
    atomic_write_text(path, format_csv(PREDICTION_HEADER, rows))


def read_predictions(path) -> list[PredictionRecord]:
    import csv
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != PREDICTION_HEADER:
            raise DataError(f"{path}: expected header {PREDICTION_HEADER}")
        for row in reader:
            num = lambda k: float(row[k]) if row[k] != "" else None
            out.append(PredictionRecord(date.fromisoformat(row["date"]), num("y_t"),
                                        num("y_hat_next"), num("y_next"), num("r_hat")))
    return out


def range_indices(dates, date_range: DateRange) -> list[int]:
    return [k for k, d in enumerate(dates) if date_range.contains(d)]


def day_seed(seed: int, d: date) -> list[int]:
    """Entropy for one rolling day; depends only on the global seed and the date."""
    return [int(seed), d.toordinal()]


def _stack_windows(features, t, T, B, mode, normalize):
    xs, ys, scales = [], [], []
    for b in range(B):
        w = make_window(features, t - (B - 1 - b), T, mode)
        s = w.scale if normalize else 1.0
        xs.append(w.inputs / s)
        if w.targets is not None:
            ys.append(w.targets / s)
        scales.append(s)
    x = np.stack(xs)
    y = np.stack(ys) if ys else None
    return x, y, scales


def min_history(config: lstm.NetworkConfig) -> int:
    """Smallest feature-row index that can be a rolling day."""
    return config.window + config.batch_size - 1


def rolling_predict(series: PriceSeries, config: lstm.NetworkConfig, date_range: DateRange,
                    params_in: lstm.NetworkParams | None = None, on_day=None):
    """Train on the window ending yesterday, then predict tomorrow, for every day in range.

    Returns ``(records, params_out)``. Weights carry over between days when
    ``config.warm_start`` is set, otherwise each day starts from the seeded
    Glorot initialisation. A day whose training diverges yields a record with
    no prediction and leaves the weights untouched. ``on_day(record, params)``
    is called after every completed day.
    """
    features = build_features(series)
    fdates = series.dates[1:]
    days = range_indices(fdates, date_range)
    if not days:
        raise DataError(f"no trading days in {date_range.start}..{date_range.end}")
    if days[0] < min_history(config):
        raise DataError(f"insufficient history before {fdates[days[0]]}: need "
                        f"{min_history(config)} feature rows, have {days[0]}")
    B, T = config.batch_size, config.window
    params = params_in.copy() if params_in is not None else lstm.init_glorot(config)
    records = []
    for t in days:
        d = fdates[t]
        if not config.warm_start:
            params = lstm.init_glorot(config)
        x, y, _ = _stack_windows(features, t, T, B, "train", config.normalize)
        y_hat = None
        try:
            res = lstm.train_on_window(params, x, y, config, seed=day_seed(config.seed, d))
            params = res.params
            xp, _, scales = _stack_windows(features, t, T, B, "predict", config.normalize)
            out, _, _ = lstm.forward(params, xp)
            y_hat = float(out[-1, -1] * scales[-1])
            if not math.isfinite(y_hat):
                y_hat = None
        except (lstm.TrainingDiverged, FloatingPointError) as exc:
            logger.warning("%s: skipping day, %s", d, exc)
        y_next = features[t + 1, 0] if t + 1 < len(features) else None
        records.append(PredictionRecord.make(d, features[t, 0], y_hat, y_next))
        if on_day is not None:
            on_day(records[-1], params)
    return records, params


def resume_rolling_predict(series, config, date_range: DateRange, records_path, checkpoint):
    """Rolling prediction persisted day by day, resumable after interruption.

    After each day the prediction CSV and the parameter checkpoint (holding
    the last completed date) are rewritten atomically. If both exist on entry
    the run continues from the day after the checkpoint date.
    """
    records_path, checkpoint = Path(records_path), Path(checkpoint)
    records, params = [], None
    if records_path.exists() and checkpoint.exists():
        params, _, meta = lstm.load_params(checkpoint)
        last = date.fromisoformat(meta["last_date"])
        records = [r for r in read_predictions(records_path) if r.date <= last]
        if not records or records[-1].date != last:
            raise DataError("prediction file and checkpoint disagree on the last date")
        if last >= date_range.end:
            return records, params
        date_range = DateRange(max(date_range.start, last + timedelta(days=1)), date_range.end)

    def persist(record, p):
        records.append(record)
        write_predictions(records, records_path)
        lstm.save_params(checkpoint, p, config, {"last_date": record.date.isoformat()})

    _, params = rolling_predict(series, config, date_range, params, on_day=persist)
    return records, params


def naive_persistence(series: PriceSeries, date_range: DateRange) -> list[PredictionRecord]:
    """Tomorrow equals today: ``y_hat_next = y_t`` and ``r_hat = 0``."""
    y = series.adj_close
    out = []
    for k in range_indices(series.dates, date_range):
        y_next = y[k + 1] if k + 1 < len(series) else None
        out.append(PredictionRecord(series.dates[k], float(y[k]), float(y[k]),
                                    None if y_next is None else float(y_next), 0.0))
    return out


def complete_arrays(records):
    """``(y_t, y_hat_next, y_next)`` arrays over records having both a prediction and an outcome."""
    keep = [r for r in records if r.y_hat_next is not None and r.y_next is not None]
    return (np.array([r.y_t for r in keep]), np.array([r.y_hat_next for r in keep]),
            np.array([r.y_next for r in keep]))
