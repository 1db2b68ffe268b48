"""Day-by-day execution of the binned trading strategy and its benchmarks."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from datetime import date

import numpy as np

from .market_data import DataError, PriceSeries, atomic_write_text, format_csv
from .policy import SELL, AllocationPolicy, BinStats, PolicyConfig, compute_a_max

logger = logging.getLogger(__name__)

TIMINGS = ("next_close", "same_close")
TRADE_HEADER = ["date", "side", "units", "price", "bin", "realized_pnl"]
EQUITY_HEADER = ["date", "equity"]


@dataclass(frozen=True)
class PortfolioState:
    cash: float
    units: int = 0
    entry_bin: int | None = None
    entry_price: float | None = None
    entry_date: date | None = None
    entry_cost: float = 0.0

    @property
    def holding(self) -> bool:
        return self.units > 0

    def value(self, price: float) -> float:
        return self.cash + self.units * price


@dataclass(frozen=True)
class TradeEvent:
    date: date
    side: str
    units: int
    price: float
    bin: int
    realized_pnl: float | None = None
    cash_limited: bool = False


@dataclass
class EquityCurve:
    dates: list
    values: np.ndarray

    def __len__(self):
        return len(self.dates)


@dataclass
class BacktestResult:
    trades: list[TradeEvent]
    equity: EquityCurve
    stats: BinStats | None
    G: float
    initial_capital: float
    policy: AllocationPolicy | None = None
    snapshots: list = field(default_factory=list)
    timing: str = "next_close"


def step(state: PortfolioState, policy: AllocationPolicy, r_hat: float, exec_price: float,
         day: date | None = None, cost_bps: float = 0.0, enforce_cash: bool = True):
    """Apply the strategy for one signal; returns ``(new_state, event_or_None)``.

    Sell everything in bin 1, buy the bin's allocation when flat, else hold.
    A buy the cash cannot cover is shrunk to the affordable whole units and
    flagged on the event.
    """
    if exec_price <= 0:
        raise ValueError("execution price must be positive")
    b = policy.classify(r_hat)
    alloc = policy.A[b - 1]
    fee_rate = cost_bps / 1e4
    if alloc == SELL:
        if not state.holding:
            return state, None
        fee = fee_rate * state.units * exec_price
        pnl = state.units * (exec_price - state.entry_price) - state.entry_cost - fee
        event = TradeEvent(day, "SELL", state.units, float(exec_price), 1, float(pnl))
        cash = state.cash + state.units * exec_price - fee
        return PortfolioState(cash), event
    if alloc <= 0 or state.holding:
        return state, None
    units = int(alloc)
    limited = False
    if enforce_cash:
        affordable = math.floor(state.cash / (exec_price * (1.0 + fee_rate)))
        if affordable < units:
            logger.warning("%s: cash covers %d of %d units", day, affordable, units)
            units, limited = affordable, True
    if units <= 0:
        return state, None
    fee = fee_rate * units * exec_price
    new = PortfolioState(state.cash - units * exec_price - fee, units, b, exec_price, day, fee)
    return new, TradeEvent(day, "BUY", units, float(exec_price), b, None, limited)


def execution_prices(records, traded_series: PriceSeries | None = None) -> np.ndarray:
    """Per-record execution prices: the traded series' adjusted close on the same date,
    or the signal series' own price when no traded series is given."""
    if traded_series is None:
        return np.array([r.y_t for r in records], dtype=np.float64)
    lookup = dict(zip(traded_series.dates, traded_series.adj_close))
    missing = [r.date for r in records if r.date not in lookup]
    if missing:
        raise DataError(f"traded series lacks {len(missing)} signal dates, first {missing[0]}")
    return np.array([lookup[r.date] for r in records], dtype=np.float64)


def run_backtest(predictions, policy: AllocationPolicy, capital: float,
                 traded_series: PriceSeries | None = None, timing: str = "next_close",
                 cost_bps: float = 0.0, enforce_cash: bool = True,
                 record_snapshots: bool = False) -> BacktestResult:
    """Run the strategy over a prediction stream, adapting the policy as it goes.

    Each day: execute the order pending from yesterday's signal
    (``next_close``), classify today's predicted return against the current
    cutoffs, trade or queue the order, fold realized cycles into the bin
    statistics, then add today's predicted return to the cutoff history.
    Days without a prediction hold. An order still pending after the last
    day is dropped; an open position is marked to market, not sold.
    """
    if timing not in TIMINGS:
        raise ValueError(f"timing must be one of {TIMINGS}")
    records = list(predictions)
    if not records:
        raise DataError("no predictions to trade on")
    prices = execution_prices(records, traded_series)
    state = PortfolioState(float(capital))
    trades: list[TradeEvent] = []
    values = np.empty(len(records))
    snapshots = []
    pending = None

    def execute(r_hat, price, day):
        nonlocal state
        state, event = step(state, policy, r_hat, price, day, cost_bps, enforce_cash)
        if event is None:
            return
        trades.append(event)
        if event.side == "SELL":
            buy = next(t for t in reversed(trades[:-1]) if t.side == "BUY")
            policy.on_sell(buy.bin, buy.price, event.price)

    for k, rec in enumerate(records):
        price = prices[k]
        if pending is not None:
            execute(pending, price, rec.date)
            pending = None
        if rec.r_hat is not None:
            if timing == "same_close":
                execute(rec.r_hat, price, rec.date)
            else:
                pending = rec.r_hat
            policy.observe(rec.r_hat)
        values[k] = state.value(price)
        if record_snapshots:
            snapshots.append((rec.date, policy.snapshot()))
    G = float(sum(t.realized_pnl for t in trades if t.side == "SELL"))
    return BacktestResult(trades, EquityCurve([r.date for r in records], values),
                          policy.stats, G, float(capital), policy, snapshots, timing)


def buy_and_hold(dates, prices, capital: float) -> BacktestResult:
    """Buy as many whole units as capital allows on the first day and hold."""
    prices = np.asarray(prices, dtype=np.float64)
    if len(prices) == 0:
        raise DataError("empty price range")
    units = compute_a_max(capital, prices[0])
    cash = capital - units * prices[0]
    values = cash + units * prices
    trades = [TradeEvent(dates[0], "BUY", units, float(prices[0]), 2)] if units else []
    return BacktestResult(trades, EquityCurve(list(dates), values), None, 0.0, float(capital))


def cumulative_return(result: BacktestResult) -> float:
    v = result.equity.values
    return float(v[-1] / v[0] - 1.0)


def up_down_strategy(predictions, capital: float, traded_series: PriceSeries | None = None,
                     timing: str = "next_close", cost_bps: float = 0.0) -> BacktestResult:
    """Buy when the prediction is above today's price, sell when below.

    Implemented as the two-bin special case ``Q = [0]``, ``A = [SELL, a_max]``.
    """
    records = list(predictions)
    prices = execution_prices(records, traded_series)
    a_max = compute_a_max(capital, prices[0])
    return run_backtest(records, AllocationPolicy.up_down(a_max), capital, traded_series,
                        timing, cost_bps)


def seed_bin_stats(predictions, Q, traded_series: PriceSeries | None = None,
                   timing: str = "next_close") -> BinStats:
    """Per-bin price-difference sums from replaying a history with every bin buying.

    Cutoffs stay fixed at ``Q`` and cash is unconstrained, so every buy/sell
    cycle the signals imply is realized and credited to its entry bin.
    Positions still open at the end contribute nothing.
    """
    n = len(Q) + 1
    policy = AllocationPolicy(np.asarray(Q), [SELL] + [1] * (n - 1), BinStats.zeros(n), 1,
                              freeze_cutoffs=True, freeze_allocations=True)
    res = run_backtest(predictions, policy, 1.0, traded_series, timing, enforce_cash=False)
    return res.stats


def build_policy(history, config: PolicyConfig, a_max: int,
                 traded_series: PriceSeries | None = None, timing: str = "next_close"):
    """Policy for trading right after ``history``.

    Bin statistics come from replaying all of ``history`` against cutoffs of
    its full predicted-return distribution; the live cutoff tracker starts
    from the last ``config.bootstrap_steps`` predictions.
    """
    from .policy import compute_cutoffs
    r = [rec.r_hat for rec in history if rec.r_hat is not None]
    stats = seed_bin_stats(history, compute_cutoffs(r, config), traded_series, timing)
    boot = r[-config.bootstrap_steps:] if config.bootstrap_steps else r
    return AllocationPolicy.from_history(boot, stats, a_max, config)


def write_trades(trades, path) -> None:
    rows = [[t.date.isoformat(), t.side, str(t.units), repr(float(t.price)), str(t.bin),
             "" if t.realized_pnl is None else repr(float(t.realized_pnl))] for t in trades]
    atomic_write_text(path, format_csv(TRADE_HEADER, rows))


def read_trades(path) -> list[TradeEvent]:
    import csv
    with open(path, newline="", encoding="utf-8") as fh:
        return [TradeEvent(date.fromisoformat(r["date"]), r["side"], int(r["units"]),
                           float(r["price"]), int(r["bin"]),
                           float(r["realized_pnl"]) if r["realized_pnl"] else None)
                for r in csv.DictReader(fh)]


def write_equity(curve: EquityCurve, path) -> None:
    rows = [[d.isoformat(), repr(float(v))] for d, v in zip(curve.dates, curve.values)]
    atomic_write_text(path, format_csv(EQUITY_HEADER, rows))


def read_equity(path) -> EquityCurve:
    import csv
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise DataError(f"{path}: empty equity curve")
    return EquityCurve([date.fromisoformat(r["date"]) for r in rows],
                       np.array([float(r["equity"]) for r in rows]))


def write_snapshots(snapshots, path) -> None:
    rows = []
    for d, snap in snapshots:
        for row in snap:
            rows.append([d.isoformat(), row["bin"], repr(float(row["lower"])), repr(float(row["upper"])),
                         repr(float(row["delta"])), row["count"], row["allocation"]])
    atomic_write_text(path, format_csv(
        ["date", "bin", "lower", "upper", "delta", "count", "allocation"], rows))
