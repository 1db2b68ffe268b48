"""Every strategy end to end on a synthetic random walk, then a comparison table and plot.

Usage: python3 scripts/synthetic_backtest.py OUT_DIR [--bars N] [--iterations N]
"""

import argparse
import json
from pathlib import Path

from lstm_trader import cli
from lstm_trader.market_data import write_csv
from lstm_trader.synthetic import random_walk_series

SPLIT = {"policy_build": ["2004-03-01", "2004-08-31"],
         "hyper_select": ["2004-09-01", "2004-10-29"],
         "out_of_sample": ["2004-11-01", "2005-06-30"]}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("out")
    ap.add_argument("--bars", type=int, default=400)
    ap.add_argument("--iterations", type=int, default=50)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(random_walk_series(args.bars, seed=args.seed), out / "prices.csv")
    cfg = {"version": 1, "data": str(out / "prices.csv"), "split": SPLIT, "seed": args.seed,
           "network": {"num_layers": 2, "hidden_size": 8, "window": 11,
                       "iterations": args.iterations}}
    (out / "config.json").write_text(json.dumps(cfg, indent=2))
    names = ["proposed", "up_down", "buy_and_hold", "arima", "naive"]
    for s in names:
        code = cli.main(["backtest", "--config", str(out / "config.json"), "--strategy", s,
                         "--out", str(out / s)])
        if code:
            raise SystemExit(code)
    cli.main(["compare", *[str(out / s / "report.json") for s in names],
              "--out", str(out / "comparison.txt")])
    cli.main(["plot", *[str(out / s / "equity.csv") for s in names], "--dir-labels",
              "--out", str(out / "equity.svg")])


if __name__ == "__main__":
    main()
