from datetime import date

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lstm_trader.market_data import (DataError, DateRange, PeriodSplit, build_features,
                                     make_window, parse_csv, write_csv)
from lstm_trader.policy import compute_a_max
from lstm_trader.synthetic import random_walk_series

HEADER = "Date,Open,High,Low,Close,Adj Close,Volume\n"


def write(tmp_path, body, header=HEADER, name="x.csv"):
    p = tmp_path / name
    p.write_text(header + body, encoding="utf-8")
    return p


def test_parse_reference_row(tmp_path):
    s = parse_csv(write(tmp_path, "2010-01-04,1116.56,1133.87,1116.56,1132.99,1132.99,3991400000\n"))
    bar = s.bar(0)
    assert bar.date == date(2010, 1, 4)
    assert bar.adj_close == 1132.99
    assert bar.volume == 3991400000
    assert compute_a_max(28365, bar.adj_close) == 25


def test_empty_file(tmp_path):
    with pytest.raises(DataError, match="no data rows"):
        parse_csv(write(tmp_path, ""))
    p = tmp_path / "blank.csv"
    p.write_text("")
    with pytest.raises(DataError, match="no data rows"):
        parse_csv(p)


def test_duplicate_dates(tmp_path):
    body = "2010-01-04,1,2,1,1,1,0\n2010-01-04,1,2,1,1,1,0\n"
    with pytest.raises(DataError, match="duplicate"):
        parse_csv(write(tmp_path, body))


def test_non_monotone_dates(tmp_path):
    body = "2010-01-04,1,2,1,1,1,0\n2010-01-06,1,2,1,1,1,0\n2010-01-05,1,2,1,1,1,0\n"
    with pytest.raises(DataError, match="non-monotone"):
        parse_csv(write(tmp_path, body))


def test_descending_file_is_reversed(tmp_path):
    body = "2010-01-06,1,2,1,1,3,0\n2010-01-05,1,2,1,1,2,0\n2010-01-04,1,2,1,1,1,0\n"
    s = parse_csv(write(tmp_path, body))
    assert s.dates == [date(2010, 1, 4), date(2010, 1, 5), date(2010, 1, 6)]
    assert list(s.adj_close) == [1.0, 2.0, 3.0]


def test_unparseable_row_reports_line(tmp_path):
    body = "2010-01-04,1,2,1,1,1,0\n2010-01-05,1,abc,1,1,1,0\n"
    with pytest.raises(DataError, match="line 3"):
        parse_csv(write(tmp_path, body))


def test_missing_price_rows_rejected(tmp_path):
    body = "2010-01-04,1,2,1,1,1,0\n2010-01-05,null,null,null,null,null,null\n2010-01-06,1,2,1,1,1,0\n"
    s = parse_csv(write(tmp_path, body))
    assert len(s) == 2
    assert s.metadata["rejected_lines"] == [3]


def test_adj_close_fallback(tmp_path):
    p = write(tmp_path, "2010-01-04,1,2,0.5,1.5,7\n", header="Date,Open,High,Low,Close,Volume\n")
    s = parse_csv(p)
    assert s.metadata["adj_close_fallback"] is True
    assert s.adj_close[0] == 1.5


def test_schema_override(tmp_path):
    p = write(tmp_path, "2010-01-04,1,2,0.5,1.5,1.4,7\n", header="day,o,h,l,c,ac,v\n")
    s = parse_csv(p, schema={"date": "day", "open": "o", "high": "h", "low": "l", "close": "c",
                             "adj_close": "ac", "volume": "v"})
    assert s.adj_close[0] == 1.4


def test_inconsistent_high_low(tmp_path):
    with pytest.raises(DataError, match="low/high"):
        parse_csv(write(tmp_path, "2010-01-04,1,0.9,0.8,1,1,0\n"))


def test_unreadable_file(tmp_path):
    with pytest.raises(DataError):
        parse_csv(tmp_path / "missing.csv")


@settings(max_examples=25, deadline=None)
@given(n=st.integers(2, 60), seed=st.integers(0, 10_000))
def test_parse_serialize_roundtrip(tmp_path_factory, n, seed):
    s = random_walk_series(n, seed=seed)
    p = tmp_path_factory.mktemp("rt") / "s.csv"
    write_csv(s, p)
    back = parse_csv(p)
    write_csv(back, p.with_name("t.csv"))
    assert back.dates == s.dates
    for col in ("open", "high", "low", "close", "adj_close", "volume"):
        np.testing.assert_array_equal(getattr(back, col), getattr(s, col))
    assert p.read_bytes() == p.with_name("t.csv").read_bytes()


def test_build_features_two_bars():
    s = random_walk_series(2, seed=0)
    f = build_features(s)
    assert f.shape == (1, 6)
    assert f[0, 5] == s.adj_close[0]


def test_build_features_lengths_and_order():
    assert build_features(random_walk_series(100)).shape == (99, 6)
    s = random_walk_series(3, seed=4)
    f = build_features(s)
    for k in range(2):
        b = s.bar(k + 1)
        assert list(f[k]) == [b.adj_close, b.open, b.low, b.high, b.close, s.adj_close[k]]
    with pytest.raises(DataError):
        build_features(random_walk_series(1))


def test_make_window_examples():
    f = build_features(random_walk_series(60, seed=2))
    w = make_window(f, 30, 22, "train")
    np.testing.assert_array_equal(w.inputs, f[8:30])
    np.testing.assert_array_equal(w.targets, f[9:31, 0])
    with pytest.raises(DataError):
        make_window(f, 4, 5, "train")
    p = make_window(f, 11, 11, "predict")
    np.testing.assert_array_equal(p.inputs, f[1:12])
    assert p.targets is None


def test_predict_window_brute_force():
    f = build_features(random_walk_series(40, seed=3))
    for T in range(1, 15):
        for t in range(len(f)):
            if t - T + 1 < 0:
                with pytest.raises(DataError):
                    make_window(f, t, T, "predict")
                continue
            rows = [f[j] for j in range(len(f)) if t - T + 1 <= j <= t]
            np.testing.assert_array_equal(make_window(f, t, T, "predict").inputs, np.array(rows))


@settings(max_examples=50, deadline=None)
@given(T=st.integers(1, 30), data=st.data())
def test_train_targets_shift_by_one(T, data):
    s = random_walk_series(80, seed=5)
    f = build_features(s)
    t = data.draw(st.integers(T, len(f) - 1))
    w = make_window(f, t, T, "train")
    assert w.inputs.shape == (T, 6)
    for k in range(T):
        row = t - T + k
        # target k is the adjusted close of the bar after input row k
        assert w.targets[k] == s.adj_close[row + 2]
        assert w.inputs[k, 0] == s.adj_close[row + 1]


def test_period_split_default_and_order():
    s = PeriodSplit.default()
    assert s.policy_build.start == date(2005, 1, 1)
    assert s.out_of_sample.end == date(2018, 5, 1)
    with pytest.raises(ValueError):
        PeriodSplit(DateRange(date(2005, 1, 1), date(2008, 1, 1)),
                    DateRange(date(2007, 1, 1), date(2009, 1, 1)),
                    DateRange(date(2010, 1, 1), date(2011, 1, 1)))
