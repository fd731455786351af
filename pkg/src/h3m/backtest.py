"""Dynamic d-day trading strategy, portfolio accounting, metrics and grid search.

Prices are a days x stocks close matrix. Predictions are one row of up-move
probabilities per rebalance day (days 0, d, 2d, ... of the price window).
Trades execute at the rebalance day's close; sells credit ``(1 - tau)`` of
their notional and buys debit ``(1 + tau)``.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

TRADING_DAYS = 252
RISK_FREE = 0.02
# relative slack on the branch thresholds, so 0.05 * 20 counts as 1
_THRESHOLD_EPS = 1e-9
# trades smaller than this fraction of the target value are skipped
DUST = 1e-9
ACCOUNTING_TOL = 1e-9


class BacktestError(ValueError):
    pass


class UndefinedMetricError(ArithmeticError):
    pass


class AccountingError(RuntimeError):
    pass


@dataclass(frozen=True)
class StrategyParams:
    p: float
    q: float
    r: float
    d: int
    tau: float = 0.0025
    initial_capital: float = 1_000_000.0

    def __post_init__(self):
        if not 0 < self.p <= 1:
            raise ValueError(f"p must lie in (0, 1], got {self.p}")
        if not 0 < self.q < 1:
            raise ValueError(f"q must lie in (0, 1), got {self.q}")
        if not 0 <= self.r <= 1:
            raise ValueError(f"r must lie in [0, 1], got {self.r}")
        if not isinstance(self.d, int) or isinstance(self.d, bool) or self.d < 1:
            raise ValueError(f"d must be a positive integer, got {self.d!r}")
        if not 0 <= self.tau < 1:
            raise ValueError(f"tau must lie in [0, 1), got {self.tau}")
        if not self.initial_capital > 0:
            raise ValueError(f"initial capital must be positive, got {self.initial_capital}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PortfolioState:
    cash: float
    shares: np.ndarray  # one entry per stock, fractional allowed

    def value(self, prices: np.ndarray) -> float:
        return float(self.cash + np.dot(self.shares, prices))

    def copy(self) -> "PortfolioState":
        return PortfolioState(self.cash, self.shares.copy())


@dataclass
class Trade:
    day: int
    stock: int
    side: str  # "buy" or "sell"
    shares: float
    price: float
    notional: float
    cost: float


@dataclass
class BacktestReport:
    params: StrategyParams
    equity: np.ndarray  # post-trade close value for every day
    cash: np.ndarray
    positions: np.ndarray  # days x stocks shares after that day's trades
    returns: np.ndarray  # r_t, the first one measured against initial capital
    trades: list[Trade]
    target_counts: list[int]
    metrics: dict = field(default_factory=dict)

    @property
    def terminal_value(self) -> float:
        return float(self.equity[-1])

    @property
    def curve(self) -> np.ndarray:
        """Initial capital followed by the daily equity."""
        return np.concatenate([[self.params.initial_capital], self.equity])


# ---------------------------------------------------------------------------
# strategy


def decide_target_count(m: int, n: int, p: float, q: float, r: float) -> int:
    """Number of stocks to hold given M rising predictions out of N."""
    if not 0 <= m <= n:
        raise ValueError(f"rising count M={m} must lie in [0, N={n}]")
    full = p * n
    if m >= full - _THRESHOLD_EPS * max(1.0, full):
        return math.floor(full + _THRESHOLD_EPS * max(1.0, full))
    floor_zone = full * q
    if m >= floor_zone - _THRESHOLD_EPS * max(1.0, floor_zone):
        return math.floor(r * m + _THRESHOLD_EPS * max(1.0, r * m))
    return 0


def rank_targets(probs: np.ndarray, n: int) -> np.ndarray:
    """Indices of the n highest probabilities; equal ones go to the lower index."""
    order = np.argsort(-np.asarray(probs, dtype=float), kind="stable")
    return order[:n]


def _check_prices(prices: np.ndarray, idx) -> None:
    sub = prices[idx]
    if not np.all(np.isfinite(sub)):
        raise BacktestError(f"missing price for stock(s) {np.flatnonzero(~np.isfinite(prices)).tolist()}")
    if np.any(sub < 0):
        raise BacktestError(f"negative price for stock(s) {np.flatnonzero(prices < 0).tolist()}")


def rebalance(
    state: PortfolioState,
    targets: Sequence[int],
    prices: np.ndarray,
    tau: float,
    day: int = 0,
) -> tuple[PortfolioState, list[Trade]]:
    """Liquidate non-targets, then move every target toward an equal share of value."""
    prices = np.asarray(prices, dtype=float)
    targets = [int(s) for s in targets]
    held = np.flatnonzero(state.shares != 0)
    _check_prices(prices, sorted(set(held.tolist()) | set(targets)))
    new = state.copy()
    trades: list[Trade] = []

    def sell(s: int, amount: float) -> None:
        notional = amount * prices[s]
        new.shares[s] -= amount
        new.cash += notional * (1 - tau)
        trades.append(Trade(day, s, "sell", amount, float(prices[s]), notional, notional * tau))

    target_set = set(targets)
    for s in held:
        if int(s) not in target_set:
            sell(int(s), new.shares[s])
            new.shares[s] = 0.0
    if not targets:
        return new, trades

    target_value = new.value(prices) / len(targets)
    gaps = {s: target_value - new.shares[s] * prices[s] for s in targets}
    for s in targets:
        if gaps[s] < -DUST * target_value:
            sell(s, -gaps[s] / prices[s])
    buys = [s for s in targets if gaps[s] > DUST * target_value and prices[s] > 0]
    need = sum(gaps[s] * (1 + tau) for s in buys)
    scale = 1.0 if need <= new.cash else new.cash / need
    for s in buys:
        notional = gaps[s] * scale
        amount = notional / prices[s]
        new.shares[s] += amount
        new.cash -= notional * (1 + tau)
        trades.append(Trade(day, s, "buy", amount, float(prices[s]), notional, notional * tau))
    if new.cash < 0:
        # pro-rata scaling can overshoot by a rounding error
        if new.cash < -ACCOUNTING_TOL * max(1.0, target_value):
            raise AccountingError(f"cash went negative: {new.cash}")
        new.cash = 0.0
    return new, trades


def rebalance_days(n_days: int, d: int) -> list[int]:
    return list(range(0, n_days, d))


def run_backtest(probs, prices, params: StrategyParams, labels=None) -> BacktestReport:
    """Run the strategy over a price window.

    probs: one row of N up-probabilities per rebalance day 0, d, 2d, ...
    prices: days x N close prices.
    labels: optional rebalance-days x N 0/1 outcomes for ACC/PRE; by default
        a stock's outcome is whether its close rose over the next d days, and
        cycles without a full horizon are left out of ACC/PRE.
    """
    prices = np.asarray(prices, dtype=float)
    probs = np.asarray(probs, dtype=float)
    if prices.ndim != 2 or prices.shape[0] < 1:
        raise BacktestError(f"prices must be days x stocks, got shape {prices.shape}")
    n_days, n = prices.shape
    days = rebalance_days(n_days, params.d)
    if probs.shape != (len(days), n):
        raise BacktestError(
            f"need {len(days)} x {n} predictions for rebalance days {days[:4]}..., got {probs.shape}"
        )
    if np.any(np.isnan(probs)):
        raise BacktestError("predictions contain NaN")

    state = PortfolioState(float(params.initial_capital), np.zeros(n))
    tracked = state.cash
    equity = np.empty(n_days)
    cash = np.empty(n_days)
    positions = np.empty((n_days, n))
    trades: list[Trade] = []
    counts: list[int] = []
    bought = np.zeros((len(days), n), dtype=bool)
    prev_prices = None
    for t in range(n_days):
        px = prices[t]
        if prev_prices is not None:
            held = state.shares != 0
            if held.any():
                _check_prices(px, np.flatnonzero(held))
                tracked += float(np.dot(state.shares[held], px[held] - prev_prices[held]))
        if t % params.d == 0:
            k = t // params.d
            m = int(np.sum(probs[k] > 0.5))
            n_t = decide_target_count(m, n, params.p, params.q, params.r)
            counts.append(n_t)
            targets = rank_targets(probs[k], n_t)
            bought[k, targets] = True
            state, done = rebalance(state, targets, px, params.tau, day=t)
            tracked -= sum(tr.cost for tr in done)
            trades.extend(done)
        actual = state.value(px)
        if abs(actual - tracked) > ACCOUNTING_TOL * max(abs(actual), 1.0):
            raise AccountingError(f"day {t}: tracked value {tracked!r} != cash + holdings {actual!r}")
        equity[t], cash[t], positions[t] = actual, state.cash, state.shares
        prev_prices = px

    curve = np.concatenate([[params.initial_capital], equity])
    report = BacktestReport(
        params=params,
        equity=equity,
        cash=cash,
        positions=positions,
        returns=curve[1:] / curve[:-1] - 1,
        trades=trades,
        target_counts=counts,
    )
    report.metrics = report_metrics(curve)
    if labels is None:
        complete = [k for k, t in enumerate(days) if t + params.d < n_days]
        labels_c = np.array(
            [prices[days[k] + params.d] > prices[days[k]] for k in complete], dtype=int
        ).reshape(len(complete), n)
    else:
        labels = np.asarray(labels)
        if labels.shape != probs.shape:
            raise BacktestError(f"labels shape {labels.shape} != predictions shape {probs.shape}")
        complete = list(range(len(days)))
        labels_c = labels
    if complete:
        acc, pre = metric_accuracy_precision(probs[complete], labels_c, bought[complete])
    else:
        acc, pre = None, None
    report.metrics.update(ACC=acc, PRE=pre, terminal_value=report.terminal_value)
    return report


# ---------------------------------------------------------------------------
# metrics


def metric_accuracy_precision(probs, labels, bought) -> tuple[float, float | None]:
    """ACC of ``probs > 0.5`` against labels; PRE over the bought entries (None if none)."""
    probs = np.asarray(probs, dtype=float)
    labels = np.asarray(labels).astype(bool)
    bought = np.asarray(bought, dtype=bool)
    if probs.size == 0:
        raise ValueError("no predictions to score")
    acc = float(np.mean((probs > 0.5) == labels))
    pre = float(np.mean(labels[bought])) if bought.any() else None
    return acc, pre


def daily_returns(equity) -> np.ndarray:
    equity = np.asarray(equity, dtype=float)
    if equity.ndim != 1 or equity.size < 2:
        raise ValueError("need at least two equity points")
    if np.any(equity <= 0):
        raise ValueError("equity must stay positive")
    return equity[1:] / equity[:-1] - 1


def annualized_return(equity) -> float:
    r = daily_returns(equity)
    growth = float(np.prod(1 + r))
    return growth ** (TRADING_DAYS / r.size) - 1


def annualized_volatility(equity) -> float:
    r = daily_returns(equity)
    if r.size < 2:
        return 0.0
    return float(np.std(r, ddof=1)) * math.sqrt(TRADING_DAYS)


def max_drawdown(equity) -> float:
    """Most negative (P_t - running max) / running max; 0 for a never-falling curve."""
    equity = np.asarray(equity, dtype=float)
    peak = np.maximum.accumulate(equity)
    return float(np.min((equity - peak) / peak))


def sharpe_ratio(equity) -> float:
    sigma = annualized_volatility(equity)
    if sigma == 0:
        raise UndefinedMetricError("Sharpe ratio undefined: zero return volatility")
    return (annualized_return(equity) - RISK_FREE) / sigma


def calmar_ratio(equity) -> float:
    mdd = max_drawdown(equity)
    if mdd == 0:
        raise UndefinedMetricError("Calmar ratio undefined: no drawdown")
    return annualized_return(equity) / abs(mdd)


def metric_returns(equity) -> tuple[float, float, float, float]:
    """(AR, SR, CR, MDD); raises UndefinedMetricError when SR or CR is undefined."""
    return annualized_return(equity), sharpe_ratio(equity), calmar_ratio(equity), max_drawdown(equity)


def report_metrics(equity) -> dict:
    """AR/SR/CR/MDD with None in place of undefined ratios."""
    out = {"AR": annualized_return(equity), "MDD": max_drawdown(equity)}
    for key, fn in (("SR", sharpe_ratio), ("CR", calmar_ratio)):
        try:
            out[key] = fn(equity)
        except UndefinedMetricError:
            out[key] = None
    return out


# ---------------------------------------------------------------------------
# grid search


def _steps(lo: int, hi: int) -> tuple[float, ...]:
    return tuple(round(k * 0.05, 10) for k in range(lo, hi + 1))


DEFAULT_GRID = {"p": _steps(1, 20), "q": _steps(1, 19), "r": _steps(0, 20)}


@dataclass
class GridResult:
    best: tuple[float, float, float]
    metrics: dict
    evaluated: int
    defined: int
    table: list[dict]


def grid_triples(grids: dict | None = None) -> list[tuple[float, float, float]]:
    g = DEFAULT_GRID if grids is None else grids
    return [(p, q, r) for p in g["p"] for q in g["q"] for r in g["r"]]


def _evaluate_chunk(args) -> list[dict]:
    triples, probs, prices, d, tau, capital = args
    n = prices.shape[1]
    rising = [int(np.sum(row > 0.5)) for row in probs]
    cache: dict[tuple, dict] = {}
    rows = []
    for p, q, r in triples:
        # runs that pick the same holding counts on every rebalance day are identical
        key = tuple(decide_target_count(m, n, p, q, r) for m in rising)
        if key not in cache:
            rep = run_backtest(probs, prices, StrategyParams(p, q, r, d, tau, capital))
            cache[key] = {k: rep.metrics[k] for k in ("AR", "SR", "CR", "MDD")}
        rows.append({"p": p, "q": q, "r": r, **cache[key]})
    return rows


def _rank_key(row: dict):
    cr = row["CR"] if row["CR"] is not None else -math.inf
    return (-row["SR"], -cr, abs(row["MDD"]), row["p"], row["q"], row["r"])


def grid_search(probs, prices, d: int, grids: dict | None = None, tau: float = 0.0025,
                initial_capital: float = 1_000_000.0, jobs: int = 1) -> GridResult:
    """Sharpe-maximizing (p, q, r) over the grid.

    Ties go to higher CR, then smaller |MDD|, then the lexicographically
    smallest triple. Combinations with undefined SR are skipped.
    """
    probs = np.asarray(probs, dtype=float)
    prices = np.asarray(prices, dtype=float)
    triples = grid_triples(grids)
    if not triples:
        raise ValueError("empty grid")
    for p, q, r in triples:
        StrategyParams(p, q, r, d, tau, initial_capital)
    jobs = max(1, int(jobs))
    if jobs == 1:
        rows = _evaluate_chunk((triples, probs, prices, d, tau, initial_capital))
    else:
        size = math.ceil(len(triples) / (jobs * 4))
        chunks = [triples[i : i + size] for i in range(0, len(triples), size)]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            parts = pool.map(
                _evaluate_chunk, [(c, probs, prices, d, tau, initial_capital) for c in chunks]
            )
            rows = [row for part in parts for row in part]
    defined = [row for row in rows if row["SR"] is not None]
    if not defined:
        raise UndefinedMetricError("every grid combination has an undefined Sharpe ratio")
    best = min(defined, key=_rank_key)
    return GridResult(
        best=(best["p"], best["q"], best["r"]),
        metrics={k: best[k] for k in ("AR", "SR", "CR", "MDD")},
        evaluated=len(rows),
        defined=len(defined),
        table=rows,
    )


# ---------------------------------------------------------------------------
# files


def read_predictions(path) -> pd.DataFrame:
    """``date,ticker,prob_up`` CSV pivoted to a dates x tickers frame."""
    frame = pd.read_csv(path, dtype={"date": str, "ticker": str})
    missing = {"date", "ticker", "prob_up"} - set(frame.columns)
    if missing:
        raise BacktestError(f"{path}: missing column(s) {sorted(missing)}")
    if frame.duplicated(["date", "ticker"]).any():
        raise BacktestError(f"{path}: duplicate (date, ticker) rows")
    probs = frame["prob_up"].astype(float)
    if ((probs < 0) | (probs > 1) | probs.isna()).any():
        raise BacktestError(f"{path}: prob_up must lie in [0, 1]")
    return frame.pivot(index="date", columns="ticker", values="prob_up").sort_index()


def write_predictions(path, dates: Sequence[str], tickers: Sequence[str], probs) -> None:
    probs = np.asarray(probs, dtype=float)
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["date", "ticker", "prob_up"])
        for i, day in enumerate(dates):
            for j, ticker in enumerate(tickers):
                out.writerow([day, ticker, repr(float(probs[i, j]))])


def align_predictions(pred: pd.DataFrame, price_days: Sequence[str], tickers: Sequence[str], d: int):
    """Slice the price window that starts at the first prediction date.

    The window runs to the last prediction date plus d (or the panel end).
    Returns (day indices into the panel, rebalance-day probability matrix).
    Every rebalance day needs a prediction for every ticker; predictions on
    other days are ignored.
    """
    price_days = list(price_days)
    pos = {day: i for i, day in enumerate(price_days)}
    dates = list(pred.index)
    for day in dates:
        if day not in pos:
            raise BacktestError(f"prediction date {day} is not a trading day of the price panel")
    missing = set(tickers) - set(pred.columns)
    if missing:
        raise BacktestError(f"predictions lack tickers {sorted(missing)}")
    start, last = pos[dates[0]], pos[dates[-1]]
    stop = min(len(price_days), last + d + 1)
    window = list(range(start, stop))
    rows = []
    for t in window[::d]:
        day = price_days[t]
        if day not in pred.index:
            raise BacktestError(f"no predictions for rebalance day {day}")
        row = pred.loc[day, list(tickers)].to_numpy(dtype=float)
        if np.isnan(row).any():
            raise BacktestError(f"incomplete predictions on rebalance day {day}")
        rows.append(row)
    return window, np.asarray(rows)


def write_report(outdir, report: BacktestReport, days: Sequence[str], tickers: Sequence[str], extra=None) -> Path:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    body = {"metrics": report.metrics, "params": report.params.to_dict(), "target_counts": report.target_counts}
    if extra:
        body.update(extra)
    (outdir / "report.json").write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
    with open(outdir / "equity.csv", "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["date", "value", "cash", "return"])
        for t, day in enumerate(days):
            out.writerow([day, repr(float(report.equity[t])), repr(float(report.cash[t])), repr(float(report.returns[t]))])
    with open(outdir / "trades.csv", "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["date", "ticker", "side", "shares", "price", "notional", "cost"])
        for tr in report.trades:
            out.writerow([days[tr.day], tickers[tr.stock], tr.side, repr(tr.shares), repr(tr.price),
                          repr(tr.notional), repr(tr.cost)])
    return outdir
