"""Daily OHLC ingestion, feature vectors and rolling windows.

Trading days are exactly the rows present in the input file. Everything
downstream indexes days by feature row: row ``k`` of the feature matrix
belongs to bar ``k + 1`` of the series (the first bar only supplies the
previous-day adjusted close).
"""

from __future__ import annotations

import csv
import logging
import math
import os
import tempfile
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_SCHEMA = {
    "date": "Date",
    "open": "Open",
    "high": "High",
    "low": "Low",
    "close": "Close",
    "adj_close": "Adj Close",
    "volume": "Volume",
}
CSV_HEADER = ["Date", "Open", "High", "Low", "Close", "Adj Close", "Volume"]
NUM_FEATURES = 6
_MISSING = {"", "null", "nan", "na", "n/a", "none", "-"}


class DataError(ValueError):
    """Raised for unreadable or inconsistent market data."""


@dataclass(frozen=True)
class Bar:
    date: date
    open: float
    high: float
    low: float
    close: float
    adj_close: float
    volume: int = 0


@dataclass
class PriceSeries:
    """Ordered daily bars for one asset, stored column-wise as float64."""

    dates: list[date]
    open: np.ndarray
    high: np.ndarray
    low: np.ndarray
    close: np.ndarray
    adj_close: np.ndarray
    volume: np.ndarray
    name: str = ""
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.dates)
        for col in ("open", "high", "low", "close", "adj_close"):
            arr = np.asarray(getattr(self, col), dtype=np.float64)
            if arr.shape != (n,):
                raise DataError(f"column {col} has shape {arr.shape}, expected ({n},)")
            setattr(self, col, arr)
        self.volume = np.asarray(self.volume, dtype=np.int64)
        for a, b in zip(self.dates, self.dates[1:]):
            if b <= a:
                raise DataError(f"dates not strictly increasing at {a} -> {b}")

    def __len__(self):
        return len(self.dates)

    def bar(self, i: int) -> Bar:
        return Bar(self.dates[i], float(self.open[i]), float(self.high[i]),
                   float(self.low[i]), float(self.close[i]),
                   float(self.adj_close[i]), int(self.volume[i]))

    def bars(self) -> list[Bar]:
        return [self.bar(i) for i in range(len(self))]

    @classmethod
    def from_bars(cls, bars, name="", metadata=None) -> "PriceSeries":
        bars = list(bars)
        return cls(
            dates=[b.date for b in bars],
            open=np.array([b.open for b in bars], dtype=np.float64),
            high=np.array([b.high for b in bars], dtype=np.float64),
            low=np.array([b.low for b in bars], dtype=np.float64),
            close=np.array([b.close for b in bars], dtype=np.float64),
            adj_close=np.array([b.adj_close for b in bars], dtype=np.float64),
            volume=np.array([b.volume for b in bars], dtype=np.int64),
            name=name,
            metadata=dict(metadata or {}),
        )

    def slice(self, start: int, stop: int) -> "PriceSeries":
        return PriceSeries(
            self.dates[start:stop], self.open[start:stop], self.high[start:stop],
            self.low[start:stop], self.close[start:stop],
            self.adj_close[start:stop], self.volume[start:stop],
            name=self.name, metadata=dict(self.metadata),
        )

    def index_of(self, d: date) -> int:
        """Index of the bar dated exactly ``d``."""
        lo = np.searchsorted(np.array(self.dates, dtype="datetime64[D]"),
                             np.datetime64(d, "D"))
        if lo >= len(self) or self.dates[lo] != d:
            raise DataError(f"date {d} not in series")
        return int(lo)


@dataclass(frozen=True)
class DateRange:
    start: date
    end: date

    def __post_init__(self):
        if self.end < self.start:
            raise ValueError(f"range end {self.end} precedes start {self.start}")

    def contains(self, d: date) -> bool:
        return self.start <= d <= self.end


@dataclass(frozen=True)
class PeriodSplit:
    """The three evaluation periods: policy build, hyper-parameter selection, out-of-sample."""

    policy_build: DateRange
    hyper_select: DateRange
    out_of_sample: DateRange

    def __post_init__(self):
        if not (self.policy_build.end < self.hyper_select.start
                and self.hyper_select.end < self.out_of_sample.start):
            raise ValueError("periods must be disjoint and chronological")

    @classmethod
    def default(cls) -> "PeriodSplit":
        return cls(
            DateRange(date(2005, 1, 1), date(2008, 1, 1)),
            DateRange(date(2008, 1, 2), date(2009, 12, 31)),
            DateRange(date(2010, 1, 4), date(2018, 5, 1)),
        )


@dataclass
class WindowSample:
    inputs: np.ndarray           # (T, I)
    targets: np.ndarray | None   # (T,) in train mode
    t: int
    mode: str

    @property
    def scale(self) -> float:
        """Adjusted close of the last input row."""
        return float(self.inputs[-1, 0])


def _parse_float(text, line, col):
    try:
        v = float(text)
    except ValueError:
        raise DataError(f"line {line}: cannot parse {col}={text!r}") from None
    if not math.isfinite(v):
        raise DataError(f"line {line}: non-finite {col}={text!r}")
    return v


def parse_csv(path, schema: dict | None = None, name: str | None = None) -> PriceSeries:
    """Read a daily OHLC CSV into a :class:`PriceSeries`.

    Rows where any price field is missing (empty or ``null``, as in some
    exports) are dropped and their line numbers kept in
    ``metadata["rejected_lines"]``. Descending files are reversed; any other
    ordering problem raises :class:`DataError`.
    """
    schema = {**DEFAULT_SCHEMA, **(schema or {})}
    path = Path(path)
    try:
        fh = open(path, newline="", encoding="utf-8-sig")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: no data rows") from None
        header = [h.strip() for h in header]
        cols = {}
        for key, colname in schema.items():
            if colname in header:
                cols[key] = header.index(colname)
        metadata = {"source": str(path), "rejected_lines": []}
        missing = [k for k in ("date", "open", "high", "low", "close") if k not in cols]
        if missing:
            raise DataError(f"{path}: missing columns {[schema[k] for k in missing]}")
        if "adj_close" not in cols:
            logger.warning("%s: no %r column, using close as adjusted close",
                           path, schema["adj_close"])
            metadata["adj_close_fallback"] = True
            cols["adj_close"] = cols["close"]
        rows = []
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < len(header):
                raise DataError(f"line {line_no}: expected {len(header)} fields, got {len(row)}")
            try:
                d = date.fromisoformat(row[cols["date"]].strip())
            except ValueError:
                raise DataError(f"line {line_no}: bad date {row[cols['date']]!r}") from None
            raw = {k: row[cols[k]].strip() for k in ("open", "high", "low", "close", "adj_close")}
            if any(v.lower() in _MISSING for v in raw.values()):
                metadata["rejected_lines"].append(line_no)
                continue
            px = {k: _parse_float(v, line_no, k) for k, v in raw.items()}
            vol = 0
            if "volume" in cols:
                vtext = row[cols["volume"]].strip()
                if vtext.lower() not in _MISSING:
                    vf = _parse_float(vtext, line_no, "volume")
                    if vf < 0 or vf != int(vf):
                        raise DataError(f"line {line_no}: bad volume {vtext!r}")
                    vol = int(vf)
            if min(px.values()) <= 0:
                raise DataError(f"line {line_no}: non-positive price")
            if px["low"] > min(px["open"], px["close"]) or px["high"] < max(px["open"], px["close"]):
                raise DataError(f"line {line_no}: low/high inconsistent with open/close")
            rows.append((line_no, Bar(d, px["open"], px["high"], px["low"], px["close"],
                                      px["adj_close"], vol)))
    if not rows:
        raise DataError(f"{path}: no data rows")
    dates = [b.date for _, b in rows]
    if len(rows) > 1 and all(b < a for a, b in zip(dates, dates[1:])):
        rows.reverse()
        dates.reverse()
    for (la, a), (lb, b) in zip(rows, rows[1:]):
        if b.date == a.date:
            raise DataError(f"line {lb}: duplicate date {b.date}")
        if b.date < a.date:
            raise DataError(f"line {lb}: non-monotone date {b.date} after {a.date}")
    return PriceSeries.from_bars([b for _, b in rows], name=name or path.stem,
                                 metadata=metadata)


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def format_csv(header, rows) -> str:
    import io
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def write_csv(series: PriceSeries, path) -> None:
    """Serialize in the canonical header; floats use shortest round-trip repr."""
    rows = [[b.date.isoformat()] + [repr(float(v)) for v in (b.open, b.high, b.low, b.close,
                                                              b.adj_close)] + [str(b.volume)]
            for b in series.bars()]
    atomic_write_text(path, format_csv(CSV_HEADER, rows))


def build_features(series: PriceSeries) -> np.ndarray:
    """Feature matrix of shape ``(len(series) - 1, 6)``.

    Row ``k`` is ``[y, open, low, high, close, y_prev]`` for bar ``k + 1``,
    where ``y`` is the adjusted close.
    """
    if len(series) < 2:
        raise DataError("need at least 2 bars to build features")
    return np.column_stack([
        series.adj_close[1:],
        series.open[1:],
        series.low[1:],
        series.high[1:],
        series.close[1:],
        series.adj_close[:-1],
    ])


def feature_dates(series: PriceSeries) -> list[date]:
    return series.dates[1:]


def make_window(features: np.ndarray, t: int, T: int, mode: str = "train") -> WindowSample:
    """Slice a length-``T`` window ending before (train) or at (predict) row ``t``.

    Train mode: inputs rows ``t-T .. t-1``, targets adjusted close of rows
    ``t-T+1 .. t`` (each target is the day after its input row).
    Predict mode: inputs rows ``t-T+1 .. t``.
    """
    n = len(features)
    if mode == "train":
        lo = t - T
        if lo < 0 or t >= n:
            raise DataError(f"insufficient history for train window t={t}, T={T}")
        return WindowSample(features[lo:t], features[lo + 1:t + 1, 0].copy(), t, mode)
    if mode == "predict":
        lo = t - T + 1
        if lo < 0 or t >= n:
            raise DataError(f"insufficient history for predict window t={t}, T={T}")
        return WindowSample(features[lo:t + 1], None, t, mode)
    raise ValueError(f"unknown window mode {mode!r}")
