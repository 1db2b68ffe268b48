from datetime import date

import numpy as np
import pytest

from lstm_trader.market_data import write_csv
from lstm_trader.predictor import PredictionRecord
from lstm_trader.synthetic import business_days, random_walk_series


def records_from_paths(prices, predicted, start=date(2010, 1, 4)):
    """Prediction records for price path ``prices`` with one-step forecasts ``predicted``.

    ``predicted[k]`` is the forecast made on day ``k`` for day ``k + 1``; the
    last record has no realized value.
    """
    days = business_days(start, len(prices))
    out = []
    for k, d in enumerate(days):
        y_next = float(prices[k + 1]) if k + 1 < len(prices) else None
        out.append(PredictionRecord.make(d, float(prices[k]), float(predicted[k]), y_next))
    return out


def random_records(rng, n=250, vol=0.01, p0=100.0):
    prices = p0 * np.exp(np.cumsum(vol * rng.standard_normal(n)))
    predicted = prices * (1 + 0.01 * rng.standard_normal(n))
    return records_from_paths(prices, predicted)


@pytest.fixture
def rw_series():
    return random_walk_series(330, seed=1)


@pytest.fixture
def rw_csv(tmp_path, rw_series):
    path = tmp_path / "prices.csv"
    write_csv(rw_series, path)
    return path


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
