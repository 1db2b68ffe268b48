import random
from dataclasses import replace
from datetime import date

import pytest
from hypothesis import given, settings, strategies as st

from lstm_trader.analytics import ErrorMetrics
from lstm_trader.gridsearch import (GridResult, GridSpec, derive_seed, enumerate_grid,
                                    evaluate_config, fingerprint, grid_key, parameter_count,
                                    repeat_seed, run_grid, select_best)
from lstm_trader.lstm import NetworkConfig, init_glorot
from lstm_trader.market_data import DataError, DateRange, PeriodSplit
from lstm_trader.synthetic import random_walk_series

SPLIT = PeriodSplit(DateRange(date(2004, 3, 1), date(2004, 8, 31)),
                    DateRange(date(2004, 9, 1), date(2004, 10, 29)),
                    DateRange(date(2004, 11, 1), date(2005, 3, 31)))
TINY = NetworkConfig(num_layers=2, hidden_size=2, window=5, iterations=5)
TINY_GRID = GridSpec(layers=(2,), hidden=(2, 3), windows=(5,), dropouts=(0.0,))


@pytest.fixture(scope="module")
def series():
    return random_walk_series(330, seed=1)


def test_default_grid_size_and_order():
    cfgs = enumerate_grid(GridSpec())
    assert len(cfgs) == 54
    keys = [grid_key(c) for c in cfgs]
    assert keys == sorted(keys)
    assert keys == [grid_key(c) for c in enumerate_grid(GridSpec())]
    assert len(enumerate_grid(GridSpec((3,), (64,), (22,), (0.5,)))) == 1


def test_empty_axis_rejected():
    with pytest.raises(ValueError):
        GridSpec(layers=())


def test_parameter_count_matches_params():
    for c in enumerate_grid(GridSpec()):
        assert parameter_count(c) == init_glorot(c, 0).num_params()


def test_seed_derivation_is_stable():
    fp = fingerprint(TINY)
    assert derive_seed(0, fp) == derive_seed(0, fp)
    assert derive_seed(0, fp) != derive_seed(1, fp)
    assert fingerprint(replace(TINY, seed=9)) == fp


def result(cfg, cr, mape=1.0, status="ok"):
    return GridResult(cfg, fingerprint(cfg), 0, status, cr,
                      ErrorMetrics(0.5, mape, 1.0, 1.0, 0.9, 10))


def test_select_best_examples():
    cfgs = enumerate_grid(GridSpec())[:3]
    rs = [result(c, cr) for c, cr in zip(cfgs, [0.1, 0.3, 0.2])]
    assert select_best(rs) == cfgs[1]
    small = NetworkConfig(num_layers=2, hidden_size=32, window=11, dropout=0.0)
    big = replace(small, hidden_size=64)
    assert select_best([result(big, 5.0), result(small, 5.0)]) == small


def test_select_best_excludes_failures():
    a, b = enumerate_grid(GridSpec())[:2]
    assert select_best([result(a, 1.0), result(b, None, status="failed")]) == a
    with pytest.raises(RuntimeError):
        select_best([result(a, None, status="failed")])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(-3, 3), min_size=54, max_size=54), st.randoms(use_true_random=False))
def test_selection_permutation_and_error_invariance(crs, rnd):
    cfgs = enumerate_grid(GridSpec())
    rs = [result(c, float(cr)) for c, cr in zip(cfgs, crs)]
    best = select_best(rs)
    shuffled = rs[:]
    rnd.shuffle(shuffled)
    assert select_best(shuffled) == best
    perturbed = [result(r.config, r.cr, mape=rnd.random() * 100) for r in rs]
    assert select_best(perturbed) == best


def test_evaluate_config_complete(series):
    r1 = evaluate_config(replace(TINY, seed=1), series, SPLIT)
    r2 = evaluate_config(replace(TINY, seed=2), series, SPLIT)
    for r in (r1, r2):
        assert r.ok and r.cr is not None and r.errors is not None
        assert r.runtime > 0 and len(r.policy_snapshot) == 8


def test_evaluate_config_insufficient_history(series):
    short = series.slice(40, len(series))  # policy build starts with under 44 rows of history
    with pytest.raises(DataError, match="insufficient history"):
        evaluate_config(replace(TINY, window=44), short, SPLIT)


def test_grid_serial_parallel_and_resume(series, tmp_path):
    run_grid(TINY_GRID, series, SPLIT, tmp_path / "a", base=TINY, workers=1)
    run_grid(TINY_GRID, series, SPLIT, tmp_path / "b", base=TINY, workers=2)
    a = (tmp_path / "a" / "results.csv").read_bytes()
    assert a == (tmp_path / "b" / "results.csv").read_bytes()
    assert len(a.decode().strip().splitlines()) == 3
    # simulate an interruption after the first config
    first = (tmp_path / "a" / "progress.jsonl").read_text().splitlines()[0]
    (tmp_path / "c").mkdir()
    (tmp_path / "c" / "progress.jsonl").write_text(first + "\n{\"torn")
    run_grid(TINY_GRID, series, SPLIT, tmp_path / "c", base=TINY, workers=1)
    assert (tmp_path / "c" / "results.csv").read_bytes() == a
    lines = (tmp_path / "c" / "progress.jsonl").read_text().splitlines()
    assert len(lines) == 2 and all(line.startswith("{") and line.endswith("}") for line in lines)
    assert (tmp_path / "c" / "best_config.json").read_bytes() == \
        (tmp_path / "a" / "best_config.json").read_bytes()


def test_repeats_average_cr(series, tmp_path):
    spec = GridSpec(layers=(2,), hidden=(2,), windows=(5,), dropouts=(0.5,))
    one = run_grid(spec, series, SPLIT, tmp_path / "one", base=TINY)[0]
    three = run_grid(spec, series, SPLIT, tmp_path / "three", base=TINY, repeats=3)[0]
    cfg = one.config
    crs = [evaluate_config(replace(cfg, seed=repeat_seed(cfg, k)), series, SPLIT).cr
           for k in range(3)]
    assert crs[0] == one.cr
    assert three.cr == pytest.approx(sum(crs) / 3, rel=1e-12)
    assert three.seed == one.seed
