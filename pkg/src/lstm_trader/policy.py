"""Decile-binned allocation policy over predicted returns.

Bins are numbered from 1. Bin 1 holds every negative predicted return and
always means "sell everything"; bin ``i > 1`` covers ``[Q[i-2], Q[i-1])`` in
0-based array terms, with the last bin open above. Cutoffs are nearest-rank
percentiles of the absolute predicted returns seen so far.
"""

from __future__ import annotations

import bisect
import logging
import math
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

SELL = "SELL"
DEFAULT_FRACTIONS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6)
MIN_SAMPLES = 10


class InsufficientSamples(ValueError):
    pass


@dataclass
class PolicyConfig:
    fractions: tuple = DEFAULT_FRACTIONS
    epsilon: float = 0.0
    a_max: int | None = None        # None: derived from capital at the start of trading
    bootstrap_steps: int = 120
    quantile_basis: str = "absolute"  # or "signed"
    quantile_method: str = "nearest_rank"

    def __post_init__(self):
        self.fractions = tuple(float(f) for f in self.fractions)
        if not self.fractions or any(not 0 < f < 1 for f in self.fractions):
            raise ValueError("fractions must lie in (0, 1)")
        if any(b <= a for a, b in zip(self.fractions, self.fractions[1:])):
            raise ValueError("fractions must be strictly increasing")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.a_max is not None and self.a_max <= 0:
            raise ValueError("a_max must be positive")
        if self.quantile_basis not in ("absolute", "signed"):
            raise ValueError(f"unknown quantile basis {self.quantile_basis!r}")
        if self.quantile_method != "nearest_rank":
            raise ValueError(f"unknown quantile method {self.quantile_method!r}")

    @property
    def num_bins(self) -> int:
        return len(self.fractions) + 2


def nearest_rank(sorted_values, p: float) -> float:
    """Type-1 (nearest-rank) percentile of an ascending sequence."""
    n = len(sorted_values)
    # round first so that e.g. 0.3 * 10 does not become rank 4
    rank = max(1, math.ceil(round(p * n, 9)))
    return float(sorted_values[rank - 1])


def _basis(values, basis):
    values = np.asarray(values, dtype=np.float64)
    return np.abs(values) if basis == "absolute" else values


def has_merged_bins(Q) -> bool:
    return bool(np.any(np.diff(Q) <= 0))


def cutoffs_from_sorted(sorted_values, config: PolicyConfig) -> np.ndarray:
    if len(sorted_values) < MIN_SAMPLES:
        raise InsufficientSamples(
            f"need at least {MIN_SAMPLES} predicted returns for cutoffs, got {len(sorted_values)}")
    q = [max(0.0, nearest_rank(sorted_values, p)) for p in config.fractions]
    Q = np.array([0.0] + q)
    if has_merged_bins(Q):
        logger.warning("tied cutoffs %s: some bins are empty", Q)
    return Q


def compute_cutoffs(predicted_returns, config: PolicyConfig | None = None) -> np.ndarray:
    """Cutoff vector ``Q`` (length ``n - 1``, ``Q[0] = 0``) from a history of predicted returns.

    Ties keep the vector length so bin identities stay stable; a tied pair
    leaves the bin between them empty (see :func:`has_merged_bins`).
    """
    config = config or PolicyConfig()
    return cutoffs_from_sorted(np.sort(_basis(predicted_returns, config.quantile_basis)), config)


def classify(r_hat: float, Q) -> int:
    """Bin index in ``1..len(Q)+1``; lower edges are inclusive."""
    return bisect.bisect_right(list(Q), r_hat) + 1


def optimal_allocations(delta, a_max: int, epsilon: float = 0.0) -> list:
    """``[SELL, ...]`` with ``a_max`` units wherever the bin's price-difference sum exceeds epsilon.

    ``delta`` holds one value per bin; the entry for bin 1 is ignored.
    """
    return [SELL] + [a_max if d > epsilon else 0 for d in list(delta)[1:]]


@dataclass
class BinStats:
    """Per-bin sums of realized per-unit price differences and completed-cycle counts."""

    delta: np.ndarray
    count: np.ndarray

    @classmethod
    def zeros(cls, n_bins: int) -> "BinStats":
        return cls(np.zeros(n_bins), np.zeros(n_bins, dtype=np.int64))

    @property
    def n_bins(self) -> int:
        return len(self.delta)

    def copy(self) -> "BinStats":
        return BinStats(self.delta.copy(), self.count.copy())


def record_trade_outcome(stats: BinStats, entry_bin: int, y_buy: float, y_sell: float,
                         epsilon: float = 0.0) -> bool:
    """Add one completed buy/sell cycle to its entry bin (in place).

    Returns True when ``delta - epsilon`` changed sign, i.e. when the bin's
    optimal allocation flips.
    """
    if not 2 <= entry_bin <= stats.n_bins:
        raise ValueError(f"entry bin must be in 2..{stats.n_bins}, got {entry_bin}")
    k = entry_bin - 1
    before = stats.delta[k] > epsilon
    stats.delta[k] += y_sell - y_buy
    stats.count[k] += 1
    return bool(before != (stats.delta[k] > epsilon))


class QuantileTracker:
    """Growing window of predicted returns with nearest-rank cutoffs.

    Keeps the transformed values in sorted order so each update costs one
    insertion instead of a full sort.
    """

    def __init__(self, config: PolicyConfig, history=()):
        self.config = config
        self.history: list[float] = []
        self._sorted: list[float] = []
        for r in history:
            self.add(r)

    def add(self, r_hat: float) -> None:
        self.history.append(float(r_hat))
        v = abs(r_hat) if self.config.quantile_basis == "absolute" else float(r_hat)
        bisect.insort(self._sorted, v)

    def __len__(self):
        return len(self.history)

    def cutoffs(self) -> np.ndarray:
        return cutoffs_from_sorted(self._sorted, self.config)


def update_cutoffs(tracker: QuantileTracker, new_r_hat: float) -> np.ndarray:
    tracker.add(new_r_hat)
    return tracker.cutoffs()


def compute_a_max(capital: float, unit_price: float) -> int:
    """Whole units affordable with ``capital`` at ``unit_price``."""
    if unit_price <= 0:
        raise ValueError("unit price must be positive")
    if capital <= 0:
        raise ValueError("capital must be positive")
    units = math.floor(capital / unit_price)
    if units == 0:
        logger.warning("capital %.2f below unit price %.2f: asset untradeable", capital, unit_price)
    return units


@dataclass
class AllocationPolicy:
    """Live policy state ``(Q, A)`` plus the statistics that drive it.

    ``freeze_cutoffs`` keeps ``Q`` fixed (no daily re-estimation) and
    ``freeze_allocations`` keeps ``A`` fixed regardless of realized trades.
    """

    Q: np.ndarray
    A: list
    stats: BinStats
    a_max: int
    config: PolicyConfig = field(default_factory=PolicyConfig)
    tracker: QuantileTracker | None = None
    freeze_cutoffs: bool = False
    freeze_allocations: bool = False
    flips: int = 0

    def __post_init__(self):
        self.Q = np.asarray(self.Q, dtype=np.float64)
        if self.Q[0] != 0.0:
            raise ValueError("Q[0] must be 0")
        if len(self.A) != len(self.Q) + 1 or self.A[0] != SELL:
            raise ValueError("A must have len(Q)+1 entries starting with SELL")
        if any(a == SELL or a < 0 for a in self.A[1:]):
            raise ValueError("allocations for bins > 1 must be non-negative unit counts")
        if self.stats.n_bins != len(self.A):
            raise ValueError("bin statistics do not match the number of bins")

    @property
    def n_bins(self) -> int:
        return len(self.A)

    @classmethod
    def up_down(cls, a_max: int) -> "AllocationPolicy":
        """Two bins, sell below zero and buy ``a_max`` otherwise."""
        return cls(np.array([0.0]), [SELL, a_max], BinStats.zeros(2), a_max,
                   freeze_cutoffs=True, freeze_allocations=True)

    @classmethod
    def from_history(cls, history, stats: BinStats, a_max: int,
                     config: PolicyConfig | None = None) -> "AllocationPolicy":
        config = config or PolicyConfig()
        tracker = QuantileTracker(config, history)
        return cls(tracker.cutoffs(), optimal_allocations(stats.delta, a_max, config.epsilon),
                   stats, a_max, config, tracker)

    def classify(self, r_hat: float) -> int:
        return classify(r_hat, self.Q)

    def on_sell(self, entry_bin: int, y_buy: float, y_sell: float) -> bool:
        flipped = record_trade_outcome(self.stats, entry_bin, y_buy, y_sell, self.config.epsilon)
        if flipped and not self.freeze_allocations:
            self.flips += 1
            self.A = optimal_allocations(self.stats.delta, self.a_max, self.config.epsilon)
        return flipped

    def observe(self, r_hat: float) -> None:
        if self.freeze_cutoffs or self.tracker is None:
            return
        self.Q = update_cutoffs(self.tracker, r_hat)

    def snapshot(self) -> list[dict]:
        """Per-bin rows: cutoff bounds, price-difference sum, cycle count, allocation."""
        rows = []
        for k in range(self.n_bins):
            lower = -math.inf if k == 0 else float(self.Q[k - 1])
            upper = float(self.Q[k]) if k < len(self.Q) else math.inf
            rows.append({"bin": k + 1, "lower": lower, "upper": upper,
                         "delta": float(self.stats.delta[k]), "count": int(self.stats.count[k]),
                         "allocation": self.A[k]})
        return rows
