"""Command line entry point: ingest, train, predict, backtest, gridsearch, eval.

Every command reads an optional JSON run config (``--config`` or the
``H3M_CONFIG`` environment variable) whose sections are::

    {
      "seed": 0,
      "embeddings": {"kind": "mock" | "file" | "remote", "dim": 2048, "path": ..., "url": ...},
      "model": {... ModelConfig fields ...},
      "train": {... TrainConfig fields ...},
      "strategy": {"p": 1.0, "q": 0.05, "r": 0.05, "d": 10, "tau": 0.0025, "initial_capital": 1e6},
      "grid": {"p": [...], "q": [...], "r": [...]}
    }

Unknown keys are rejected and command-line flags override file values.
"""

from __future__ import annotations

import argparse
import csv
import datetime as dt
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
import torch

from . import backtest as bt
from .dataio import (
    DataError,
    StockPanel,
    attach_embeddings,
    compute_features,
    load_ohlcv_csv,
    make_provider,
)
from .model import ABLATIONS, ModelConfig
from .numerics import read_tensor, write_tensor
from .trainer import (
    TrainConfig,
    WindowData,
    accuracy,
    fit,
    load_checkpoint,
    predict_window,
    save_checkpoint,
)

log = logging.getLogger("h3m")

CONFIG_ENV = "H3M_CONFIG"
PANEL_MANIFEST = "manifest.json"
PANEL_FORMAT = "h3m-panel/1"
EMBEDDING_KEYS = {"kind", "dim", "path", "manifest", "url", "timeout", "retries"}
STRATEGY_KEYS = {"p", "q", "r", "d", "tau", "initial_capital"}
TOP_KEYS = {"seed", "embeddings", "model", "train", "strategy", "grid"}


class CliError(Exception):
    pass


# ---------------------------------------------------------------------------
# run config


@dataclass
class RunConfig:
    seed: int = 0
    embeddings: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    strategy: dict = field(default_factory=dict)
    grid: dict | None = None

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise CliError("run config must be a JSON object")
        unknown = set(data) - TOP_KEYS
        if unknown:
            raise CliError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(
            seed=data.get("seed", 0),
            embeddings=dict(data.get("embeddings", {})),
            model=dict(data.get("model", {})),
            train=dict(data.get("train", {})),
            strategy=dict(data.get("strategy", {})),
            grid=data.get("grid"),
        )
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if not isinstance(self.seed, int) or isinstance(self.seed, bool):
            raise CliError(f"seed must be an integer, got {self.seed!r}")
        for name, allowed in (("embeddings", EMBEDDING_KEYS), ("strategy", STRATEGY_KEYS)):
            unknown = set(getattr(self, name)) - allowed
            if unknown:
                raise CliError(f"unknown {name} config keys: {sorted(unknown)}")
        if self.grid is not None:
            if set(self.grid) != {"p", "q", "r"}:
                raise CliError("grid needs exactly the keys p, q and r")
            if any(not isinstance(v, list) or not v for v in self.grid.values()):
                raise CliError("grid values must be non-empty lists")
        self.train_config()

    def train_config(self) -> TrainConfig:
        data = {"seed": self.seed, **self.train}
        return TrainConfig.from_dict(data)

    def model_config(self, panel: StockPanel) -> ModelConfig:
        """Model dims with N, F, T and embedding widths filled in from the panel."""
        tc = self.train_config()
        derived = {
            "n_stocks": panel.n_stocks,
            "n_features": panel.features.shape[-1],
            "lookback": tc.lookback,
            "d_news": panel.news.shape[-1],
            "d_time": panel.time.shape[-1],
        }
        data = dict(self.model)
        for key, value in derived.items():
            if key in data and data[key] != value:
                raise CliError(f"model.{key}={data[key]} conflicts with the panel/train value {value}")
            data[key] = value
        return ModelConfig.from_dict(data)

    def strategy_params(self, horizon: int) -> bt.StrategyParams:
        s = {"d": horizon, **self.strategy}
        missing = {"p", "q", "r"} - set(s)
        if missing:
            raise CliError(f"strategy needs {sorted(missing)} (set them in the config or with --p/--q/--r)")
        return bt.StrategyParams(**s)


def load_run_config(path: str | None) -> RunConfig:
    path = path or os.environ.get(CONFIG_ENV)
    if not path:
        return RunConfig()
    try:
        with open(path) as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise CliError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}: invalid JSON ({exc})") from None
    return RunConfig.from_dict(data)


def apply_flags(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "ablate", None):
        cfg.model["ablate"] = sorted(set(args.ablate))
    if getattr(args, "epochs", None) is not None:
        cfg.train["epochs"] = args.epochs
    for key in ("p", "q", "r", "d", "tau"):
        value = getattr(args, key, None)
        if value is not None:
            cfg.strategy[key] = value
    emb = getattr(args, "embeddings", None)
    if emb:
        cfg.embeddings["kind"] = emb
    for flag, key in (("embedding_dim", "dim"), ("embedding_path", "path"), ("embedding_url", "url")):
        value = getattr(args, flag, None)
        if value is not None:
            cfg.embeddings[key] = value
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# panel directory


def write_panel(outdir, panel: StockPanel, embedding_kind: str) -> Path:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    for name in ("ohlcv", "features", "news", "time"):
        write_tensor(outdir / f"{name}.tensor", getattr(panel, name), dtype="f64")
    manifest = {
        "format": PANEL_FORMAT,
        "tickers": panel.tickers,
        "days": [d.isoformat() for d in panel.days],
        "n_stocks": panel.n_stocks,
        "n_days": panel.n_days,
        "n_features": int(panel.features.shape[-1]),
        "feature_names": panel.feature_names,
        "d_news": int(panel.news.shape[-1]),
        "d_time": int(panel.time.shape[-1]),
        "dropped_warmup": panel.dropped_warmup,
        "embeddings": embedding_kind,
    }
    (outdir / PANEL_MANIFEST).write_text(json.dumps(manifest, indent=2) + "\n")
    return outdir


def read_panel(path) -> StockPanel:
    path = Path(path)
    try:
        manifest = json.loads((path / PANEL_MANIFEST).read_text())
    except FileNotFoundError:
        raise CliError(f"{path} is not a panel directory (no {PANEL_MANIFEST})") from None
    if manifest.get("format") != PANEL_FORMAT:
        raise CliError(f"{path}: unsupported panel format {manifest.get('format')!r}")
    return StockPanel(
        tickers=list(manifest["tickers"]),
        days=[dt.date.fromisoformat(d) for d in manifest["days"]],
        ohlcv=read_tensor(path / "ohlcv.tensor"),
        features=read_tensor(path / "features.tensor"),
        feature_names=list(manifest["feature_names"]),
        news=read_tensor(path / "news.tensor"),
        time=read_tensor(path / "time.tensor"),
        dropped_warmup=int(manifest["dropped_warmup"]),
    )


def read_news_texts(path) -> dict[tuple[str, str], str]:
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    missing = {"date", "ticker", "text"} - set(frame.columns)
    if missing:
        raise CliError(f"{path}: missing column(s) {sorted(missing)}")
    return {(row.ticker, row.date): row.text for row in frame.itertuples(index=False)}


def price_source(args) -> tuple[list[str], list[str], np.ndarray]:
    """(days, tickers, days x N closes) from ``--panel`` or ``--prices``."""
    if getattr(args, "panel", None):
        panel = read_panel(args.panel)
    elif getattr(args, "prices", None):
        panel = load_ohlcv_csv(args.prices)
    else:
        raise CliError("give --panel or --prices")
    return [d.isoformat() for d in panel.days], list(panel.tickers), panel.closes.T.copy()


# ---------------------------------------------------------------------------
# commands


def cmd_ingest(args, cfg: RunConfig) -> int:
    emb = dict(cfg.embeddings)
    kind = emb.pop("kind", None)
    if kind is None:
        raise CliError("no embeddings configured; pass --embeddings mock|file|remote")
    dim = emb.pop("dim", 2048)
    if kind == "file" and "path" not in emb:
        raise CliError("file embeddings need --embedding-path")
    provider = make_provider(kind, dim, **emb)
    panel = load_ohlcv_csv(args.prices, forward_fill=args.forward_fill)
    panel = compute_features(panel)
    texts = read_news_texts(args.news) if args.news else None
    panel = attach_embeddings(panel, provider, texts=texts)
    write_panel(args.out, panel, kind)
    print(f"panel: N={panel.n_stocks} T_total={panel.n_days} F={panel.features.shape[-1]} -> {args.out}")
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    panel = read_panel(args.panel)
    tc = cfg.train_config()
    mc = cfg.model_config(panel)
    data = WindowData.from_panel(panel, tc.lookback, tc.horizon, tc.split_ratios)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = fit(data, mc, tc, log_path=out / "train_log.jsonl")
    extra = {
        "best_epoch": result.best_epoch,
        "best_val_acc": result.best_val_acc,
        "tickers": panel.tickers,
    }
    save_checkpoint(out, result.model, tc, result.step, extra)
    print(f"best epoch {result.best_epoch}: val acc {result.best_val_acc:.4f} -> {out}")
    return 0


def _load_for_inference(args):
    model, manifest = load_checkpoint(args.checkpoint)
    tc = TrainConfig.from_dict(manifest["train"])
    panel = read_panel(args.panel)
    trained_on = manifest.get("extra", {}).get("tickers")
    if trained_on is not None and trained_on != panel.tickers:
        raise CliError("panel tickers differ from the ones the checkpoint was trained on")
    data = WindowData.from_panel(panel, tc.lookback, tc.horizon, tc.split_ratios)
    return model, tc, panel, data


def prediction_days(data: WindowData, panel: StockPanel, dates, split: str) -> list[int]:
    if dates:
        out = []
        for day in dates:
            t = panel.day_index(day)
            if t < data.lookback - 1:
                raise DataError(f"date {day} has fewer than T={data.lookback} days of history")
            out.append(t)
        return out
    r = data.split.ranges()[split]
    ends = list(range(r.start + data.lookback - 1, r.stop))
    if not ends:
        raise CliError(f"{split} split has no complete window ({len(r)} days, T={data.lookback})")
    return ends


def _dump(out: Path, prefix: str, tensor) -> None:
    write_tensor(out / f"{prefix}.tensor", tensor.detach().numpy(), dtype="f64")


def run_predictions(model, data: WindowData, panel: StockPanel, ends, dump_hypergraph=None, dump_routing=None):
    iso = [d.isoformat() for d in panel.days]
    probs = np.empty((len(ends), panel.n_stocks))
    hyper_dir = Path(dump_hypergraph) if dump_hypergraph else None
    if hyper_dir:
        hyper_dir.mkdir(parents=True, exist_ok=True)
    routing = open(dump_routing, "w", newline="") if dump_routing else None
    if routing:
        writer = csv.writer(routing, lineterminator="\n")
        writer.writerow(["date", "ticker", "pool", "rank", "expert", "gate"])
    try:
        for i, t in enumerate(ends):
            out = predict_window(model, data, t)
            probs[i] = out.prob_up.numpy()
            if hyper_dir:
                if out.h_local is not None:
                    _dump(hyper_dir, f"{iso[t]}_local_incidence", out.h_local)
                    _dump(hyper_dir, f"{iso[t]}_local_weights", out.w_local)
                _dump(hyper_dir, f"{iso[t]}_global_incidence", out.h_global)
                _dump(hyper_dir, f"{iso[t]}_global_weights", out.w_global)
            if routing:
                for pool, moe in (("market", out.market), ("industry", out.industry)):
                    if moe is None:
                        continue
                    for j, ticker in enumerate(panel.tickers):
                        for rank, e in enumerate(moe.selected[j].tolist()):
                            writer.writerow([iso[t], ticker, pool, rank, e, repr(float(moe.gates[j, e]))])
    finally:
        if routing:
            routing.close()
    return [iso[t] for t in ends], probs


def cmd_predict(args, cfg: RunConfig) -> int:
    model, _, panel, data = _load_for_inference(args)
    ends = prediction_days(data, panel, args.dates, args.split)
    dates, probs = run_predictions(model, data, panel, ends, args.dump_hypergraph, args.dump_routing)
    bt.write_predictions(args.out, dates, panel.tickers, probs)
    print(f"{len(dates)} x {panel.n_stocks} predictions -> {args.out}")
    return 0


def _backtest_inputs(args, horizon: int):
    days, tickers, closes = price_source(args)
    pred = bt.read_predictions(args.predictions)
    window, probs = bt.align_predictions(pred, days, tickers, horizon)
    return [days[t] for t in window], tickers, closes[window], probs


def cmd_backtest(args, cfg: RunConfig) -> int:
    cfg.strategy.setdefault("d", cfg.train_config().horizon)
    params = cfg.strategy_params(cfg.strategy["d"])
    days, tickers, prices, probs = _backtest_inputs(args, params.d)
    report = bt.run_backtest(probs, prices, params)
    bt.write_report(args.out, report, days, tickers)
    print(json.dumps(report.metrics, sort_keys=True))
    return 0


def _grid(cfg: RunConfig):
    if cfg.grid is None:
        return None
    return {k: tuple(float(v) for v in cfg.grid[k]) for k in ("p", "q", "r")}


def cmd_gridsearch(args, cfg: RunConfig) -> int:
    d = cfg.strategy.get("d", cfg.train_config().horizon)
    tau = cfg.strategy.get("tau", 0.0025)
    capital = cfg.strategy.get("initial_capital", 1_000_000.0)
    _, _, prices, probs = _backtest_inputs(args, d)
    result = bt.grid_search(probs, prices, d, _grid(cfg), tau, capital, jobs=args.jobs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    body = {
        "best": dict(zip("pqr", result.best)),
        "metrics": result.metrics,
        "evaluated": result.evaluated,
        "defined": result.defined,
        "d": d,
        "tau": tau,
    }
    (out / "gridsearch.json").write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
    pd.DataFrame(result.table).to_csv(out / "grid.csv", index=False)
    print(json.dumps(body["best"], sort_keys=True))
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    """Grid-search the strategy on validation predictions, then backtest the test split."""
    model, tc, panel, data = _load_for_inference(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    iso = [d.isoformat() for d in panel.days]
    closes = panel.closes.T
    d = cfg.strategy.get("d", tc.horizon)
    tau = cfg.strategy.get("tau", 0.0025)
    capital = cfg.strategy.get("initial_capital", 1_000_000.0)

    def split_inputs(name):
        # one prediction per day of the split; the strategy uses every d-th
        ends = prediction_days(data, panel, None, name)
        dates, probs = run_predictions(model, data, panel, ends)
        return dates, probs, closes[ends], ends

    if {"p", "q", "r"} <= set(cfg.strategy):
        chosen = (cfg.strategy["p"], cfg.strategy["q"], cfg.strategy["r"])
        grid_body = None
    else:
        _, vprobs, vprices, _ = split_inputs("val")
        result = bt.grid_search(vprobs[::d], vprices, d, _grid(cfg), tau, capital, jobs=args.jobs)
        chosen = result.best
        grid_body = {"best": dict(zip("pqr", chosen)), "metrics": result.metrics}
    dates, tprobs, tprices, window = split_inputs("test")
    bt.write_predictions(out / "test_predictions.csv", dates, panel.tickers, tprobs)
    params = bt.StrategyParams(*chosen, d=d, tau=tau, initial_capital=capital)
    report = bt.run_backtest(tprobs[::d], tprices, params)
    extra = {"classification_acc": accuracy(model, data, "test"), "validation_grid": grid_body}
    bt.write_report(out, report, [iso[t] for t in window], panel.tickers, extra)
    print(json.dumps(report.metrics, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="h3m", description="Hypergraph + mixture-of-experts stock movement model")
    parser.add_argument("--config", help=f"JSON run config (default: ${CONFIG_ENV})")
    parser.add_argument("--seed", type=int, help="run seed (overrides config)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="OHLCV CSV + embeddings -> panel directory")
    p.add_argument("--prices", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--news", help="optional date,ticker,text CSV fed to the embedding provider")
    p.add_argument("--embeddings", choices=("mock", "file", "remote"))
    p.add_argument("--embedding-dim", type=int)
    p.add_argument("--embedding-path")
    p.add_argument("--embedding-url")
    p.add_argument("--forward-fill", action="store_true")

    p = sub.add_parser("train", help="train on a panel, write a checkpoint directory")
    p.add_argument("--panel", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--ablate", nargs="+", choices=ABLATIONS, default=None)

    for name, helptext in (("predict", "write date,ticker,prob_up predictions"),
                           ("eval", "validation grid search + test backtest")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--panel", required=True)
        p.add_argument("--out", required=True)
        if name == "predict":
            p.add_argument("--dates", nargs="+")
            p.add_argument("--split", choices=("train", "val", "test"), default="test")
            p.add_argument("--dump-hypergraph", metavar="DIR")
            p.add_argument("--dump-routing", metavar="CSV")
        else:
            p.add_argument("--jobs", type=int, default=1)

    for name, helptext in (("backtest", "run the d-day strategy on predictions"),
                           ("gridsearch", "search (p, q, r) by Sharpe ratio")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--predictions", required=True)
        src = p.add_mutually_exclusive_group(required=True)
        src.add_argument("--panel")
        src.add_argument("--prices")
        p.add_argument("--out", required=True)
        p.add_argument("--d", type=int)
        p.add_argument("--tau", type=float)
        if name == "backtest":
            p.add_argument("--p", type=float)
            p.add_argument("--q", type=float)
            p.add_argument("--r", type=float)
        else:
            p.add_argument("--jobs", type=int, default=1)
    return parser


COMMANDS = {
    "ingest": cmd_ingest,
    "train": cmd_train,
    "predict": cmd_predict,
    "backtest": cmd_backtest,
    "gridsearch": cmd_gridsearch,
    "eval": cmd_eval,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    torch.set_num_threads(1)
    try:
        cfg = apply_flags(load_run_config(args.config), args)
        return COMMANDS[args.command](args, cfg)
    except (CliError, DataError, bt.BacktestError, bt.UndefinedMetricError, ValueError, FileNotFoundError,
            ConnectionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ArithmeticError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
