"""Profit-ranked hyper-parameter grid search over the two in-sample phases."""

from __future__ import annotations

import hashlib
import itertools
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field, replace
from pathlib import Path

from . import analytics
from .lstm import NetworkConfig
from .market_data import PeriodSplit, PriceSeries, atomic_write_text, format_csv
from .policy import InsufficientSamples, PolicyConfig, compute_a_max
from .predictor import rolling_predict
from .simulator import build_policy, execution_prices, run_backtest

logger = logging.getLogger(__name__)

RESULT_HEADER = ["fingerprint", "num_layers", "hidden_size", "window", "dropout", "seed",
                 "status", "CR", "MDA", "MAPE", "MAE", "MSE", "R2_pearson", "trades", "reason"]


@dataclass(frozen=True)
class GridSpec:
    layers: tuple = (2, 3)
    hidden: tuple = (32, 64, 128)
    windows: tuple = (11, 22, 44)
    dropouts: tuple = (0.0, 0.5, 0.7)

    def __post_init__(self):
        for name in ("layers", "hidden", "windows", "dropouts"):
            vals = tuple(getattr(self, name))
            if not vals:
                raise ValueError(f"grid axis {name} is empty")
            object.__setattr__(self, name, tuple(sorted(set(vals))))

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(**{k: tuple(v) for k, v in d.items()})


@dataclass
class GridResult:
    config: NetworkConfig
    fingerprint: str
    seed: int
    status: str = "ok"
    cr: float | None = None
    errors: analytics.ErrorMetrics | None = None
    trades: int = 0
    runtime: float = 0.0
    reason: str = ""
    policy_snapshot: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.status == "ok" and self.cr is not None

    def to_row(self) -> list:
        c, e = self.config, self.errors
        num = lambda v: "" if v is None else repr(float(v))
        return [self.fingerprint, c.num_layers, c.hidden_size, c.window, repr(c.dropout), self.seed,
                self.status, num(self.cr), num(e and e.MDA), num(e and e.MAPE), num(e and e.MAE),
                num(e and e.MSE), num(e and e.R2_pearson), self.trades, self.reason]

    def to_json(self) -> dict:
        return {"config": self.config.to_dict(), "fingerprint": self.fingerprint,
                "seed": self.seed, "status": self.status, "cr": self.cr,
                "errors": None if self.errors is None else vars(self.errors),
                "trades": self.trades, "runtime": self.runtime, "reason": self.reason,
                "policy_snapshot": self.policy_snapshot}

    @classmethod
    def from_json(cls, d: dict) -> "GridResult":
        errs = d.get("errors")
        return cls(NetworkConfig.from_dict(d["config"]), d["fingerprint"], d["seed"], d["status"],
                   d["cr"], analytics.ErrorMetrics(**errs) if errs else None, d["trades"],
                   d["runtime"], d["reason"], d.get("policy_snapshot", []))


def grid_key(config: NetworkConfig) -> tuple:
    return (config.num_layers, config.hidden_size, config.window, config.dropout)


def fingerprint(config: NetworkConfig) -> str:
    """Stable id of the architecture/training settings (seed excluded)."""
    d = config.to_dict()
    d.pop("seed")
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def derive_seed(global_seed: int, fp: str) -> int:
    h = hashlib.sha256(f"{int(global_seed)}:{fp}".encode()).digest()
    return int.from_bytes(h[:4], "little")


def enumerate_grid(spec: GridSpec, base: NetworkConfig | None = None) -> list[NetworkConfig]:
    """Cartesian product in lexicographic (layers, hidden, window, dropout) order."""
    base = base or NetworkConfig()
    return [replace(base, num_layers=L, hidden_size=H, window=T, dropout=p)
            for L, H, T, p in itertools.product(spec.layers, spec.hidden, spec.windows,
                                                spec.dropouts)]


def parameter_count(config: NetworkConfig) -> int:
    H, total, fan_in = config.hidden_size, 0, config.input_size
    for _ in range(config.num_layers):
        total += 4 * H * (fan_in + H + 1)
        fan_in = H
    bias = config.batch_size * config.window if config.per_position_bias else 1
    return total + H * config.output_size + bias * config.output_size


def evaluate_config(config: NetworkConfig, series: PriceSeries, split: PeriodSplit,
                    policy_config: PolicyConfig | None = None, capital: float = 100_000.0,
                    traded_series: PriceSeries | None = None,
                    timing: str = "next_close") -> GridResult:
    """Phase 1 builds predictions and the initial policy over the policy-build
    period; phase 2 continues the same weight trajectory over the selection
    period and trades with daily policy updates. Scored by cumulative return.

    Insufficient history raises; divergence or degenerate cutoffs are
    returned as a failed result.
    """
    policy_config = policy_config or PolicyConfig()
    fp = fingerprint(config)
    t0 = time.perf_counter()
    phase1, params = rolling_predict(series, config, split.policy_build)
    phase2, _ = rolling_predict(series, config, split.hyper_select, params_in=params)
    result = GridResult(config, fp, config.seed)
    skipped = sum(r.skipped for r in phase1 + phase2)
    if skipped:
        result.status, result.reason = "failed", f"training diverged on {skipped} days"
        result.runtime = time.perf_counter() - t0
        return result
    try:
        a_max = policy_config.a_max or compute_a_max(
            capital, execution_prices(phase2[:1], traded_series)[0])
        policy = build_policy(phase1, policy_config, a_max, traded_series, timing)
    except (InsufficientSamples, ValueError) as exc:
        result.status, result.reason = "failed", str(exc)
        result.runtime = time.perf_counter() - t0
        return result
    bt = run_backtest(phase2, policy, capital, traded_series, timing)
    result.cr = analytics.return_metrics(bt.equity).CR
    result.trades = len(bt.trades)
    try:
        result.errors = analytics.error_metrics(phase2)
    except ValueError:
        result.errors = None
    result.policy_snapshot = policy.snapshot()
    result.runtime = time.perf_counter() - t0
    return result


def select_best(results) -> NetworkConfig:
    """Highest CR; ties go to fewer parameters, then grid order."""
    ok = [r for r in results if r.ok]
    if not ok:
        raise RuntimeError("every grid configuration failed")
    best = min(ok, key=lambda r: (-r.cr, parameter_count(r.config), grid_key(r.config)))
    return best.config


def repeat_seed(config: NetworkConfig, k: int) -> int:
    """Seed of repeat ``k``; repeat 0 keeps the config's own seed."""
    return config.seed if k == 0 else derive_seed(config.seed, f"{fingerprint(config)}/{k}")


def _evaluate_job(args):
    config, series, split, policy_config, capital, traded, timing, repeats = args
    runs = [evaluate_config(replace(config, seed=repeat_seed(config, k)), series, split,
                            policy_config, capital, traded, timing) for k in range(repeats)]
    first = runs[0]
    first.seed = config.seed
    first.runtime = sum(r.runtime for r in runs)
    failed = [r for r in runs if not r.ok]
    if failed:
        first.status, first.cr, first.reason = "failed", None, failed[0].reason
    elif repeats > 1:
        first.cr = sum(r.cr for r in runs) / repeats
        first.reason = f"CR averaged over {repeats} seeds"
    return first


def load_manifest(path) -> dict:
    done = {}
    path = Path(path)
    if not path.exists():
        return done
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.strip():
            try:
                rec = json.loads(line)
            except json.JSONDecodeError:
                continue  # torn final line from an interrupted write
            done[rec["fingerprint"]] = GridResult.from_json(rec)
    return done


def run_grid(spec: GridSpec, series: PriceSeries, split: PeriodSplit, out_dir,
             base: NetworkConfig | None = None, policy_config: PolicyConfig | None = None,
             capital: float = 100_000.0, global_seed: int = 0, workers: int = 1,
             traded_series: PriceSeries | None = None, timing: str = "next_close",
             repeats: int = 1):
    """Evaluate every grid point, resuming from ``out_dir/progress.jsonl``.

    With ``repeats > 1`` each config runs under that many derived seeds and
    is scored by the mean CR; error metrics come from the first seed.

    Writes ``results.csv`` (grid order, no timings, so serial and parallel
    runs are byte-identical) and ``best_config.json``. Returns the results.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "progress.jsonl"
    configs = []
    for c in enumerate_grid(spec, base):
        configs.append(replace(c, seed=derive_seed(global_seed, fingerprint(c))))
    done = load_manifest(manifest)
    if manifest.exists():
        # drop any torn trailing line so appends start on a fresh line
        atomic_write_text(manifest, "".join(json.dumps(r.to_json(), sort_keys=True) + "\n"
                                            for r in done.values()))
    todo = [c for c in configs if fingerprint(c) not in done]
    logger.info("grid: %d configs, %d already done", len(configs), len(configs) - len(todo))

    def record(res: GridResult):
        done[res.fingerprint] = res
        with open(manifest, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(res.to_json(), sort_keys=True) + "\n")

    jobs = [(c, series, split, policy_config, capital, traded_series, timing, repeats)
            for c in todo]
    if workers <= 1:
        for job in jobs:
            record(_evaluate_job(job))
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_evaluate_job, job) for job in jobs]
            for fut in as_completed(futures):
                record(fut.result())
    results = [done[fingerprint(c)] for c in configs]
    atomic_write_text(out_dir / "results.csv",
                      format_csv(RESULT_HEADER, [r.to_row() for r in results]))
    try:
        best = select_best(results)
        payload = {"fingerprint": fingerprint(best), "config": best.to_dict(),
                   "cr": done[fingerprint(best)].cr}
    except RuntimeError as exc:
        payload = {"error": str(exc)}
    atomic_write_text(out_dir / "best_config.json",
                      json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return results
