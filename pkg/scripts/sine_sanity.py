"""Train the default 3x64 network on one sine window and report the loss drop.

Usage: python3 scripts/sine_sanity.py [--iterations N] [--dropout P]
"""

import argparse
import time

from lstm_trader import lstm
from lstm_trader.market_data import build_features, make_window
from lstm_trader.synthetic import sine_series


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--iterations", type=int, default=1600)
    ap.add_argument("--dropout", type=float, default=0.5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    cfg = lstm.NetworkConfig(num_layers=3, hidden_size=64, window=22, dropout=args.dropout,
                             iterations=args.iterations, seed=args.seed)
    w = make_window(build_features(sine_series(80)), 60, cfg.window, "train")
    t0 = time.perf_counter()
    res = lstm.train_on_window(lstm.init_glorot(cfg), w.inputs / w.scale, w.targets / w.scale, cfg)
    dt = time.perf_counter() - t0
    print(f"loss {res.initial_loss:.4e} -> {res.final_loss:.4e} "
          f"({1 - res.final_loss / res.initial_loss:.2%} drop) in {dt:.1f}s")


if __name__ == "__main__":
    main()
