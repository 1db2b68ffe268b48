"""Command-line entry point: ingest, backtest, gridsearch, compare, plot.

Configuration is one JSON document with a ``version`` field. Values are
layered file < environment (``LSTM_TRADER_<KEY>``) < command-line flags.
Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from . import analytics, baselines, gridsearch, predictor, simulator
from .lstm import NetworkConfig, TrainingDiverged
from .market_data import DataError, DateRange, PeriodSplit, atomic_write_text, parse_csv, write_csv
from .policy import SELL, InsufficientSamples, PolicyConfig, compute_a_max

logger = logging.getLogger("lstm_trader")

CONFIG_VERSION = 1
ENV_PREFIX = "LSTM_TRADER_"
STRATEGIES = ("proposed", "up_down", "buy_and_hold", "arima", "naive")
PREDICTORS = ("lstm", "arima", "naive")
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


def _default_split() -> dict:
    s = PeriodSplit.default()
    return {k: [getattr(s, k).start.isoformat(), getattr(s, k).end.isoformat()]
            for k in ("policy_build", "hyper_select", "out_of_sample")}


@dataclass
class RunConfig:
    version: int = CONFIG_VERSION
    data: str | None = None
    traded_data: str | None = None
    schema: dict | None = None
    split: dict = field(default_factory=_default_split)
    network: dict = field(default_factory=dict)
    policy: dict = field(default_factory=dict)
    policy_override: dict | None = None   # {"allocations": [...]} for bins 2..n, held fixed
    strategy: str = "proposed"
    predictor: str = "lstm"
    predictions: str | None = None         # reuse a stored prediction CSV
    timing: str = "next_close"
    capital: float = 100_000.0
    cost_bps: float = 0.0
    arima: dict = field(default_factory=lambda: {"max_order": 3, "refit": "daily",
                                                 "order": None, "include_mean": True})
    grid: dict = field(default_factory=dict)
    grid_repeats: int = 1
    workers: int = 1
    out: str = "out"
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        if d.get("version", CONFIG_VERSION) != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {d.get('version')!r}")
        return cls(**d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def identity(self) -> dict:
        """Config fields that determine results (output location and worker count excluded)."""
        d = self.to_dict()
        for k in ("out", "workers"):
            d.pop(k)
        return d

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(self.identity(), sort_keys=True).encode()).hexdigest()[:16]

    # typed views, each raising ConfigError on bad values

    def period_split(self) -> PeriodSplit:
        try:
            ranges = {k: DateRange(date.fromisoformat(v[0]), date.fromisoformat(v[1]))
                      for k, v in self.split.items()}
            return PeriodSplit(**ranges)
        except (TypeError, ValueError, IndexError) as exc:
            raise ConfigError(f"bad split: {exc}") from exc

    def network_config(self) -> NetworkConfig:
        try:
            return NetworkConfig.from_dict({**self.network, "seed": int(self.seed)})
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad network config: {exc}") from exc

    def policy_config(self) -> PolicyConfig:
        try:
            return PolicyConfig(**self.policy)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad policy config: {exc}") from exc

    def validate(self, need_data: bool = True) -> None:
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}")
        if self.predictor not in PREDICTORS:
            raise ConfigError(f"predictor must be one of {PREDICTORS}")
        if self.timing not in simulator.TIMINGS:
            raise ConfigError(f"timing must be one of {simulator.TIMINGS}")
        if not (isinstance(self.capital, (int, float)) and self.capital > 0):
            raise ConfigError("capital must be positive")
        if need_data and not self.data:
            raise ConfigError("no data file configured")
        for p in (self.data, self.traded_data, self.predictions):
            if p and not Path(p).is_file():
                raise ConfigError(f"file not found: {p}")
        self.period_split()
        self.network_config()
        self.policy_config()


def _env_overrides(environ) -> dict:
    names = {f.name for f in dataclasses.fields(RunConfig)}
    out = {}
    for key, raw in environ.items():
        if not key.startswith(ENV_PREFIX):
            continue
        name = key[len(ENV_PREFIX):].lower()
        if name not in names:
            raise ConfigError(f"unknown environment override {key}")
        try:
            out[name] = json.loads(raw)
        except json.JSONDecodeError:
            out[name] = raw
    return out


def load_config(path=None, overrides: dict | None = None, environ=None) -> RunConfig:
    """Resolve a RunConfig from file, environment and explicit overrides (in that order)."""
    d = {}
    if path:
        try:
            d = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
    d.update(_env_overrides(os.environ if environ is None else environ))
    d.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return RunConfig.from_dict(d)


def _sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _load_series(cfg: RunConfig):
    series = parse_csv(cfg.data, cfg.schema)
    traded = parse_csv(cfg.traded_data, cfg.schema) if cfg.traded_data else None
    return series, traded


def _effective(cfg: RunConfig) -> tuple[str, str]:
    """(trading rule, predictor); the arima/naive strategies trade up-down on that predictor."""
    if cfg.strategy in ("arima", "naive"):
        return "up_down", cfg.strategy
    return cfg.strategy, cfg.predictor


def _prediction_stream(cfg: RunConfig, series, split: PeriodSplit, pred: str, out_dir: Path):
    full = DateRange(split.policy_build.start, split.out_of_sample.end)
    meta = {"predictor": pred}
    if cfg.predictions:
        meta["source"] = "file"
        return predictor.read_predictions(cfg.predictions), meta
    if pred == "naive":
        return predictor.naive_persistence(series, full), meta
    if pred == "arima":
        a = cfg.arima
        insample = [k for k, d in enumerate(series.dates)
                    if split.policy_build.start <= d <= split.hyper_select.end]
        if not insample:
            raise DataError("no in-sample data for ARIMA order selection")
        if a.get("order"):
            order = tuple(a["order"])
        else:
            y_in = series.adj_close[insample[0]:insample[-1] + 1]
            search = baselines.select_order(y_in, a.get("max_order", 3), a.get("include_mean", True))
            order = search.best.order
            meta["arima_significant"] = search.significant
        records, flagged = baselines.rolling_forecast(
            series.dates, series.adj_close, order, full, a.get("include_mean", True),
            a.get("refit", "daily"))
        meta.update(arima_order=list(order), arima_refit=a.get("refit", "daily"),
                    arima_flagged_days=len(flagged))
        return records, meta
    records, _ = predictor.resume_rolling_predict(series, cfg.network_config(), full,
                                                  out_dir / "predictions.csv",
                                                  out_dir / "checkpoint.npz")
    return records, meta


def _in_range(records, r: DateRange):
    return [rec for rec in records if r.contains(rec.date)]


def _safe_pt(records) -> analytics.StatTest:
    try:
        return analytics.pesaran_timmermann_records(records)
    except ValueError as exc:
        return analytics.StatTest(None, None, str(exc))


def _check_identity(rm: analytics.ReturnMetrics) -> None:
    base = 1 + rm.AR / 100
    lhs = base ** (rm.N / analytics.TRADING_DAYS)
    # rounding in AR is amplified when 1 + AR is tiny (short, heavily losing curves)
    tol = 1e-10 + 4 * np.finfo(float).eps * rm.N / analytics.TRADING_DAYS / max(base, 1e-300)
    if not math.isclose(lhs, 1 + rm.CR / 100, rel_tol=tol, abs_tol=1e-12):
        raise FloatingPointError("annualized/cumulative return identity violated")


def _bnh(dates, prices, capital):
    res = simulator.buy_and_hold(dates, prices, capital)
    return res, analytics.return_metrics(res.equity)


def cmd_ingest(args) -> int:
    series = parse_csv(args.path)
    summary = {"rows": len(series), "first": series.dates[0].isoformat(),
               "last": series.dates[-1].isoformat(),
               "adj_close_fallback": bool(series.metadata.get("adj_close_fallback", False)),
               "rejected_lines": series.metadata.get("rejected_lines", []),
               "sha256": _sha256_file(args.path)}
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_csv(series, out / "prices.csv")
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def run_backtest_pipeline(cfg: RunConfig) -> analytics.PerformanceReport:
    """Full pipeline for one strategy; writes all artifacts to ``cfg.out``."""
    cfg.validate()
    split = cfg.period_split()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    series, traded = _load_series(cfg)
    rule, pred = _effective(cfg)
    fp = cfg.fingerprint()
    oos = split.out_of_sample
    price_src = traded or series
    oos_idx = predictor.range_indices(price_src.dates, oos)
    if not oos_idx:
        raise DataError(f"no trading days in {oos.start}..{oos.end}")
    meta = {"timing": cfg.timing, "capital": cfg.capital, "cost_bps": cfg.cost_bps,
            "data_sha256": _sha256_file(cfg.data), "config": cfg.identity()}
    files = ["trades.csv", "equity.csv", "report.json", "report.txt"]
    records = oos_records = None
    snapshots = []
    if rule == "buy_and_hold":
        bt, rm = _bnh([price_src.dates[k] for k in oos_idx],
                      price_src.adj_close[oos_idx], cfg.capital)
        label = "buy_and_hold"
    else:
        records, pmeta = _prediction_stream(cfg, series, split, pred, out)
        meta.update(pmeta)
        oos_records = _in_range(records, oos)
        if not oos_records:
            raise DataError("no predictions in the out-of-sample range")
        history = [r for r in records if r.date < oos.start]
        first_price = simulator.execution_prices(oos_records[:1], traded)[0]
        if rule == "up_down":
            bt = simulator.up_down_strategy(oos_records, cfg.capital, traded, cfg.timing,
                                            cfg.cost_bps)
        else:
            pc = cfg.policy_config()
            a_max = pc.a_max or compute_a_max(cfg.capital, first_price)
            policy = simulator.build_policy(history, pc, a_max, traded, cfg.timing)
            if cfg.policy_override:
                alloc = list(cfg.policy_override.get("allocations", []))
                if len(alloc) != policy.n_bins - 1:
                    raise ConfigError(f"policy_override needs {policy.n_bins - 1} allocations")
                policy.A = [SELL] + [int(a) for a in alloc]
                policy.freeze_allocations = True
            bt = simulator.run_backtest(oos_records, policy, cfg.capital, traded, cfg.timing,
                                        cfg.cost_bps, record_snapshots=True)
            snapshots = bt.snapshots
            meta["a_max"] = a_max
        rm = analytics.return_metrics(bt.equity)
        label = f"{rule}/{pred}"
        predictor.write_predictions(records, out / "predictions.csv")
        meta["predictions"] = "predictions.csv"
        files.append("predictions.csv")
    _check_identity(rm)
    meta["G"] = bt.G
    errors = None
    if oos_records is not None:
        try:
            errors = analytics.error_metrics(oos_records)
        except ValueError as exc:
            meta["error_metrics_note"] = str(exc)
    report = analytics.PerformanceReport(
        label, bt.equity.dates[0].isoformat(), bt.equity.dates[-1].isoformat(), rm, errors,
        len(bt.trades), _safe_pt(oos_records) if oos_records is not None else None, None,
        fp, int(cfg.seed), meta)
    simulator.write_trades(bt.trades, out / "trades.csv")
    simulator.write_equity(bt.equity, out / "equity.csv")
    if snapshots:
        simulator.write_snapshots(snapshots, out / "policy_snapshots.csv")
        files.append("policy_snapshots.csv")
    atomic_write_text(out / "report.json", report.to_json())
    text = [f"config {fp}  seed {cfg.seed}  timing {cfg.timing}  "
            f"{report.start}..{report.end}"]
    rows = [report]
    if rule != "buy_and_hold":
        bnh, bnh_rm = _bnh(bt.equity.dates, simulator.execution_prices(oos_records, traded),
                           cfg.capital)
        rows.append(analytics.PerformanceReport("buy_and_hold", report.start, report.end, bnh_rm,
                                                trade_count=len(bnh.trades)))
    text.append(analytics.report_table(rows))
    err_txt = analytics.error_table([report])
    if err_txt:
        text.append(err_txt)
    if report.pt is not None:
        text.append(f"Pesaran-Timmermann: {_fmt_test(report.pt)}")
    atomic_write_text(out / "report.txt", "\n".join(text).rstrip("\n") + "\n")
    run = {"fingerprint": fp, "seed": int(cfg.seed), "files": sorted(files), "config": cfg.identity()}
    atomic_write_text(out / "run.json", json.dumps(run, indent=2, sort_keys=True) + "\n")
    return report


def _fmt_test(t: analytics.StatTest) -> str:
    if t.statistic is None:
        return f"undefined ({t.note})"
    return f"statistic {t.statistic:.4f}, p-value {t.p_value:.4f}"


def cmd_backtest(cfg: RunConfig) -> int:
    report = run_backtest_pipeline(cfg)
    print(f"{report.strategy}: CR {report.returns.CR:.2f}%  trades {report.trade_count}  "
          f"-> {cfg.out} [{report.fingerprint}]")
    return EXIT_OK


def cmd_gridsearch(cfg: RunConfig) -> int:
    cfg.validate()
    series, traded = _load_series(cfg)
    try:
        spec = gridsearch.GridSpec.from_dict(cfg.grid) if cfg.grid else gridsearch.GridSpec()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad grid: {exc}") from exc
    results = gridsearch.run_grid(spec, series, cfg.period_split(), cfg.out,
                                  base=cfg.network_config(), policy_config=cfg.policy_config(),
                                  capital=cfg.capital, global_seed=int(cfg.seed),
                                  workers=int(cfg.workers), traded_series=traded,
                                  timing=cfg.timing, repeats=int(cfg.grid_repeats))
    ok = sum(r.ok for r in results)
    print(f"{len(results)} configs, {ok} succeeded -> {cfg.out}")
    return EXIT_OK


def _load_report(path) -> analytics.PerformanceReport:
    try:
        return analytics.PerformanceReport.from_dict(
            json.loads(Path(path).read_text(encoding="utf-8")))
    except (OSError, json.JSONDecodeError, TypeError, KeyError) as exc:
        raise DataError(f"cannot read report {path}: {exc}") from exc


def compare_reports(paths) -> tuple[str, analytics.StatTest | None]:
    """Metric-by-strategy table and a DM test between the first two prediction streams."""
    if len(paths) < 2:
        raise ConfigError("compare needs at least 2 reports")
    reports = [_load_report(p) for p in paths]
    ranges = {(r.start, r.end) for r in reports}
    if len(ranges) > 1:
        raise DataError(f"reports cover different date ranges: {sorted(ranges)}")
    cols = [r.strategy for r in reports]
    width = max(14, *(len(c) + 1 for c in cols))
    pct = lambda v: "-" if v is None else f"{v:.2f}%"
    num = lambda v: "-" if v is None else f"{v:.2f}"
    rows = [("CR", lambda r: pct(r.returns.CR)), ("AR", lambda r: pct(r.returns.AR)),
            ("AV", lambda r: pct(r.returns.AV)), ("SR", lambda r: num(r.returns.SR)),
            ("DD", lambda r: pct(r.returns.DD)), ("trades", lambda r: str(r.trade_count)),
            ("MDA", lambda r: pct(r.errors.MDA * 100) if r.errors else "-"),
            ("MAPE", lambda r: pct(r.errors.MAPE) if r.errors else "-"),
            ("MSE", lambda r: num(r.errors.MSE) if r.errors else "-")]
    lines = [f"{'':<8}" + "".join(f"{c:>{width}}" for c in cols)]
    for name, fmt in rows:
        lines.append(f"{name:<8}" + "".join(f"{fmt(r):>{width}}" for r in reports))
    dm = None
    streams = []
    for p, r in zip(paths, reports):
        rel = r.metadata.get("predictions")
        if rel:
            recs = predictor.read_predictions(Path(p).parent / rel)
            span = DateRange(date.fromisoformat(r.start), date.fromisoformat(r.end))
            streams.append((r.strategy, _in_range(recs, span)))
    if len(streams) >= 2:
        (na, a), (nb, b) = streams[:2]
        y, pa, pb = analytics.align_records(a, b)
        try:
            dm = analytics.diebold_mariano(y, pa, pb)
        except ValueError as exc:
            dm = analytics.StatTest(None, None, str(exc))
        lines.append("")
        lines.append(f"Diebold-Mariano ({na} vs {nb}, squared error): {_fmt_test(dm)}")
    return "\n".join(lines) + "\n", dm


def cmd_compare(args) -> int:
    text, _ = compare_reports(args.reports)
    if args.out:
        atomic_write_text(args.out, text)
    sys.stdout.write(text)
    return EXIT_OK


PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2")


def render_svg(curves, width: int = 800, height: int = 420) -> str:
    """Overlaid equity curves normalised to start at 1, as a standalone SVG document.

    ``curves`` is a list of ``(label, EquityCurve)``. Output depends only on
    the inputs, so identical curves give byte-identical files.
    """
    if not curves:
        raise DataError("nothing to plot")
    for label, c in curves:
        if len(c) == 0:
            raise DataError(f"{label}: empty equity curve")
    left, right, top = 70, 20, 20
    bottom = 50 + 18 * len(curves)
    pw, ph = width - left - right, height - top - bottom
    norm = [(label, c.dates, np.asarray(c.values, dtype=float) / float(c.values[0]))
            for label, c in curves]
    x0 = min(d[0].toordinal() for _, d, _ in norm)
    x1 = max(d[-1].toordinal() for _, d, _ in norm)
    lo = min(float(v.min()) for _, _, v in norm)
    hi = max(float(v.max()) for _, _, v in norm)
    if hi - lo < 1e-12:
        pad = 0.05 * max(abs(hi), 1.0)
        lo, hi = lo - pad, hi + pad
    sx = lambda o: left + (pw * (o - x0) / (x1 - x0) if x1 > x0 else pw / 2)
    sy = lambda v: top + ph * (hi - v) / (hi - lo)
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
           f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
           f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>']
    for k in range(5):
        v = lo + (hi - lo) * k / 4
        y = sy(v)
        out.append(f'<line x1="{left}" y1="{y:.2f}" x2="{left + pw}" y2="{y:.2f}" stroke="#ddd"/>')
        out.append(f'<text x="{left - 6}" y="{y + 4:.2f}" text-anchor="end">{v:.3f}</text>')
    ticks = sorted({x0, (x0 + x1) // 2, x1})
    for o in ticks:
        x = sx(o)
        out.append(f'<text x="{x:.2f}" y="{top + ph + 16}" text-anchor="middle">'
                   f'{date.fromordinal(o).isoformat()}</text>')
    for k, (label, dates, v) in enumerate(norm):
        color = PALETTE[k % len(PALETTE)]
        pts = " ".join(f"{sx(d.toordinal()):.2f},{sy(val):.2f}" for d, val in zip(dates, v))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        ly = top + ph + 34 + 18 * k
        out.append(f'<line x1="{left}" y1="{ly}" x2="{left + 24}" y2="{ly}" stroke="{color}" '
                   f'stroke-width="3"/>')
        out.append(f'<text x="{left + 30}" y="{ly + 4}">{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def cmd_plot(args) -> int:
    curves = [(Path(p).parent.name + "/" + Path(p).stem if args.dir_labels else Path(p).stem,
               simulator.read_equity(p)) for p in args.equity]
    if args.labels:
        if len(args.labels) != len(curves):
            raise ConfigError("one label per equity file")
        curves = [(lab, c) for lab, (_, c) in zip(args.labels, curves)]
    atomic_write_text(args.out, render_svg(curves))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lstm-trader", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate a price CSV and summarise it")
    p.add_argument("path")
    p.add_argument("--out", help="directory for a normalised prices.csv")

    for name, helptext in (("backtest", "run one strategy end to end"),
                           ("gridsearch", "profit-ranked hyper-parameter search")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config")
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        p.add_argument("--data")
        p.add_argument("--traded-data", dest="traded_data")
        p.add_argument("--strategy", choices=STRATEGIES)
        p.add_argument("--predictor", choices=PREDICTORS)
        p.add_argument("--predictions", help="reuse a stored prediction CSV")
        p.add_argument("--timing", choices=simulator.TIMINGS)
        p.add_argument("--capital", type=float)
        p.add_argument("--workers", type=int)

    p = sub.add_parser("compare", help="side-by-side table of reports with a DM test")
    p.add_argument("reports", nargs="+")
    p.add_argument("--out")

    p = sub.add_parser("plot", help="SVG of normalised equity curves")
    p.add_argument("equity", nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--labels", nargs="+")
    p.add_argument("--dir-labels", action="store_true", help="label curves by parent directory")
    return ap


_OVERRIDE_FLAGS = ("seed", "out", "data", "traded_data", "strategy", "predictor", "predictions",
                   "timing", "capital", "workers")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "ingest":
            return cmd_ingest(args)
        if args.command == "compare":
            return cmd_compare(args)
        if args.command == "plot":
            return cmd_plot(args)
        cfg = load_config(args.config, {k: getattr(args, k) for k in _OVERRIDE_FLAGS})
        return cmd_backtest(cfg) if args.command == "backtest" else cmd_gridsearch(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, InsufficientSamples, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (FloatingPointError, TrainingDiverged, baselines.ArimaError,
            np.linalg.LinAlgError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
