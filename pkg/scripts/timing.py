"""Seconds per rolling day for a few network sizes, to budget full grid searches.

Usage: python3 scripts/timing.py [--days N]
"""

import argparse
import time

from lstm_trader import lstm
from lstm_trader.market_data import DateRange
from lstm_trader.predictor import rolling_predict
from lstm_trader.synthetic import random_walk_series


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--days", type=int, default=5)
    args = ap.parse_args()
    series = random_walk_series(200, seed=0)
    start = series.dates[120]
    rng = DateRange(start, series.dates[120 + args.days - 1])
    for L, H, T in [(2, 32, 11), (3, 64, 22), (3, 128, 44)]:
        cfg = lstm.NetworkConfig(num_layers=L, hidden_size=H, window=T)
        t0 = time.perf_counter()
        rolling_predict(series, cfg, rng)
        per_day = (time.perf_counter() - t0) / args.days
        print(f"L={L} H={H:>3} T={T:>2}: {per_day:6.2f}s/day, "
              f"~{per_day * 2093 / 3600:5.1f}h for 2093 days")


if __name__ == "__main__":
    main()
