import json

import numpy as np
import pandas as pd
import pytest

from conftest import random_walk, trading_days, write_ohlcv
from h3m import backtest as bt
from h3m.cli import main, read_panel

TINY = {
    "model": {"dim": 8, "d_llm": 16, "n_edges_local": 4, "n_edges_global": 4, "market_dim": 4,
              "style_dim": 4, "n_market": 3, "n_industry": 4},
    "train": {"epochs": 2, "lookback": 3, "horizon": 2},
}


def _config(path, body=None):
    path.write_text(json.dumps(body or TINY))
    return str(path)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    write_ohlcv(root / "prices.csv", random_walk(3, 90, seed=2), tickers=["AAA", "BBB", "CCC"])
    cfg = _config(root / "cfg.json")
    assert main(["ingest", "--prices", str(root / "prices.csv"), "--out", str(root / "panel"),
                 "--embeddings", "mock", "--embedding-dim", "6"]) == 0
    assert main(["--config", cfg, "--seed", "1", "train", "--panel", str(root / "panel"),
                 "--out", str(root / "ckpt")]) == 0
    return root, cfg


# --- ingest ------------------------------------------------------------------


def test_ingest_manifest(workspace):
    root, _ = workspace
    manifest = json.loads((root / "panel" / "manifest.json").read_text())
    assert manifest["n_stocks"] == 3 and manifest["n_features"] == 20
    assert manifest["n_days"] == 90 - manifest["dropped_warmup"]
    assert manifest["embeddings"] == "mock" and manifest["d_news"] == 6
    panel = read_panel(root / "panel")
    assert panel.news.shape == (3, manifest["n_days"], 6) and panel.time.shape == (manifest["n_days"], 6)


def test_ingest_needs_embedding_kind(tmp_path, workspace, capsys):
    root, _ = workspace
    assert main(["ingest", "--prices", str(root / "prices.csv"), "--out", str(tmp_path / "p")]) == 2
    assert "embeddings" in capsys.readouterr().err


def test_ingest_malformed_csv(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("date,ticker,open,high,low,close,volume\n2024-01-02,A,10,11,9,10,100\n2024-01-03,A,10,9,11,10,100\n")
    code = main(["ingest", "--prices", str(bad), "--out", str(tmp_path / "p"), "--embeddings", "mock"])
    assert code != 0
    assert "line 3" in capsys.readouterr().err


# --- train -------------------------------------------------------------------


def test_train_is_reproducible(workspace, tmp_path):
    root, cfg = workspace
    assert main(["--config", cfg, "--seed", "1", "train", "--panel", str(root / "panel"),
                 "--out", str(tmp_path / "again")]) == 0
    a = (root / "ckpt" / "train_log.jsonl").read_text()
    b = (tmp_path / "again" / "train_log.jsonl").read_text()
    assert a == b
    ma = json.loads((root / "ckpt" / "manifest.json").read_text())
    mb = json.loads((tmp_path / "again" / "manifest.json").read_text())
    assert ma["extra"]["best_val_acc"] == mb["extra"]["best_val_acc"]
    assert ma["train"]["seed"] == 1


def test_train_records_ablation(workspace, tmp_path):
    root, cfg = workspace
    assert main(["--config", cfg, "train", "--panel", str(root / "panel"), "--out", str(tmp_path / "c"),
                 "--ablate", "lch", "--epochs", "1"]) == 0
    manifest = json.loads((tmp_path / "c" / "manifest.json").read_text())
    assert manifest["model"]["ablate"] == ["lch"] and manifest["train"]["epochs"] == 1


def test_train_rejects_bad_dims_before_training(workspace, tmp_path, capsys):
    root, _ = workspace
    body = json.loads(json.dumps(TINY))
    body["model"]["top_k"] = 9
    cfg = _config(tmp_path / "bad.json", body)
    assert main(["--config", cfg, "train", "--panel", str(root / "panel"), "--out", str(tmp_path / "c")]) == 2
    assert "top_k" in capsys.readouterr().err
    assert not (tmp_path / "c" / "train_log.jsonl").exists()


# --- predict -----------------------------------------------------------------


def _predict(root, out, *extra):
    return main(["predict", "--checkpoint", str(root / "ckpt"), "--panel", str(root / "panel"),
                 "--out", str(out), *extra])


def test_predict_is_byte_identical(workspace, tmp_path):
    root, _ = workspace
    assert _predict(root, tmp_path / "a.csv") == 0
    assert _predict(root, tmp_path / "b.csv") == 0
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    frame = pd.read_csv(tmp_path / "a.csv")
    assert list(frame.columns) == ["date", "ticker", "prob_up"]
    assert frame["prob_up"].between(0, 1).all()


def test_predict_unknown_date(workspace, tmp_path, capsys):
    root, _ = workspace
    assert _predict(root, tmp_path / "a.csv", "--dates", "1999-01-04") == 2
    assert "1999-01-04" in capsys.readouterr().err


def test_predict_dumps(workspace, tmp_path):
    root, _ = workspace
    panel = read_panel(root / "panel")
    day = panel.days[-1].isoformat()
    assert _predict(root, tmp_path / "a.csv", "--dates", day, "--dump-hypergraph", str(tmp_path / "hg"),
                    "--dump-routing", str(tmp_path / "routing.csv")) == 0
    names = sorted(p.name for p in (tmp_path / "hg").iterdir())
    assert names == sorted(f"{day}_{kind}.tensor" for kind in
                           ("local_incidence", "local_weights", "global_incidence", "global_weights"))
    routing = pd.read_csv(tmp_path / "routing.csv")
    assert list(routing.columns) == ["date", "ticker", "pool", "rank", "expert", "gate"]
    assert len(routing) == 3 * 2 * 2  # stocks x pools x top-K
    sums = routing.groupby(["ticker", "pool"])["gate"].sum()
    assert np.allclose(sums, 1.0)


# --- backtest / gridsearch ---------------------------------------------------


@pytest.fixture
def oracle_files(tmp_path):
    closes = np.array([[10.0, 11.0, 12.0, 12.5], [20.0, 19.0, 21.0, 20.0], [30.0, 31.0, 29.0, 30.0]])
    days = trading_days(4)
    write_ohlcv(tmp_path / "prices.csv", closes, tickers=["A", "B", "C"], days=days)
    iso = [d.isoformat() for d in days]
    bt.write_predictions(tmp_path / "pred.csv", [iso[0], iso[2]], ["A", "B", "C"],
                         np.array([[0.9, 0.7, 0.2], [0.3, 0.8, 0.6]]))
    return tmp_path, closes


def test_backtest_cli_matches_engine(oracle_files):
    root, closes = oracle_files
    code = main(["backtest", "--predictions", str(root / "pred.csv"), "--prices", str(root / "prices.csv"),
                 "--out", str(root / "rep"), "--p", "1", "--q", "0.3", "--r", "1", "--d", "2"])
    assert code == 0
    direct = bt.run_backtest(np.array([[0.9, 0.7, 0.2], [0.3, 0.8, 0.6]]), closes.T,
                             bt.StrategyParams(1.0, 0.3, 1.0, 2))
    eq = pd.read_csv(root / "rep" / "equity.csv", float_precision="round_trip")
    assert eq["value"].tolist() == direct.equity.tolist()
    body = json.loads((root / "rep" / "report.json").read_text())
    assert {"AR", "SR", "CR", "MDD", "ACC", "PRE"} <= set(body["metrics"])
    assert body["params"] == {"p": 1.0, "q": 0.3, "r": 1.0, "d": 2, "tau": 0.0025, "initial_capital": 1e6}


def test_backtest_cli_requires_strategy(oracle_files, capsys):
    root, _ = oracle_files
    code = main(["backtest", "--predictions", str(root / "pred.csv"), "--prices", str(root / "prices.csv"),
                 "--out", str(root / "rep"), "--d", "2"])
    assert code == 2 and "strategy" in capsys.readouterr().err


def test_gridsearch_two_by_one_by_one(tmp_path):
    rng = np.random.default_rng(1)
    base = 0.001 + 0.01 * rng.standard_normal(40)
    closes = (100 * np.cumprod(1 + np.stack([base, base - 0.002]), axis=1))
    days = trading_days(40)
    write_ohlcv(tmp_path / "prices.csv", closes, tickers=["A", "B"], days=days)
    bt.write_predictions(tmp_path / "pred.csv", [d.isoformat() for d in days], ["A", "B"],
                         np.tile([0.9, 0.6], (40, 1)))
    cfg = _config(tmp_path / "cfg.json", {"grid": {"p": [0.5, 1.0], "q": [0.5], "r": [1.0]},
                                          "strategy": {"tau": 0.0}})
    code = main(["--config", cfg, "gridsearch", "--predictions", str(tmp_path / "pred.csv"),
                 "--prices", str(tmp_path / "prices.csv"), "--out", str(tmp_path / "gs"), "--d", "1"])
    assert code == 0
    body = json.loads((tmp_path / "gs" / "gridsearch.json").read_text())
    assert body["best"] == {"p": 0.5, "q": 0.5, "r": 1.0} and body["evaluated"] == 2
    assert len(pd.read_csv(tmp_path / "gs" / "grid.csv")) == 2


def _eval(root, cfg, out):
    return main(["--config", cfg, "eval", "--checkpoint", str(root / "ckpt"), "--panel", str(root / "panel"),
                 "--out", str(out)])


def test_eval_with_fixed_strategy(workspace, tmp_path):
    root, _ = workspace
    cfg = _config(tmp_path / "cfg.json", {**TINY, "strategy": {"p": 1.0, "q": 0.05, "r": 0.5}})
    assert _eval(root, cfg, tmp_path / "ev") == 0
    body = json.loads((tmp_path / "ev" / "report.json").read_text())
    assert 0 <= body["classification_acc"] <= 1
    assert body["validation_grid"] is None and body["params"]["d"] == 2
    preds = pd.read_csv(tmp_path / "ev" / "test_predictions.csv")
    assert len(preds) == 3 * len(pd.read_csv(tmp_path / "ev" / "equity.csv"))


def test_eval_grid_reports_undefined_validation(workspace, tmp_path, capsys):
    # every validation prediction of this checkpoint is below 0.5, so no
    # combination ever invests and every Sharpe ratio is undefined
    root, _ = workspace
    cfg = _config(tmp_path / "cfg.json", {**TINY, "grid": {"p": [0.5, 1.0], "q": [0.1], "r": [0.5, 1.0]}})
    assert _eval(root, cfg, tmp_path / "ev") == 2
    assert "undefined Sharpe" in capsys.readouterr().err


# --- config handling ---------------------------------------------------------


def test_unknown_config_keys(tmp_path, workspace, capsys):
    root, _ = workspace
    for body, word in [({"modle": {}}, "modle"), ({"strategy": {"x": 1}}, "x"),
                       ({"train": {"epoch": 1}}, "epoch"), ({"model": {"dims": 3}}, "dims")]:
        cfg = _config(tmp_path / "c.json", body)
        code = main(["--config", cfg, "train", "--panel", str(root / "panel"), "--out", str(tmp_path / "o")])
        assert code == 2
        assert word in capsys.readouterr().err


def test_env_config_fallback_and_flag_override(workspace, tmp_path, monkeypatch):
    root, _ = workspace
    body = json.loads(json.dumps(TINY))
    body["train"]["epochs"] = 1
    monkeypatch.setenv("H3M_CONFIG", _config(tmp_path / "env.json", body))
    assert main(["train", "--panel", str(root / "panel"), "--out", str(tmp_path / "a")]) == 0
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["train"]["epochs"] == 1 and manifest["model"]["dim"] == 8
    assert main(["--seed", "4", "train", "--panel", str(root / "panel"), "--out", str(tmp_path / "b"),
                 "--epochs", "2"]) == 0
    manifest = json.loads((tmp_path / "b" / "manifest.json").read_text())
    assert manifest["train"]["epochs"] == 2 and manifest["train"]["seed"] == 4


def test_missing_config_file(tmp_path, capsys):
    assert main(["--config", str(tmp_path / "none.json"), "ingest", "--prices", "x", "--out", "y"]) == 2
    assert "not found" in capsys.readouterr().err
