"""Price ingestion, indicator features, labels, splits and embedding providers."""

from __future__ import annotations

import csv
import datetime as dt
import json
import logging
import os
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .numerics import read_tensor

log = logging.getLogger(__name__)

OHLCV_HEADER = ("date", "ticker", "open", "high", "low", "close", "volume")
RAW_ATTRIBUTES = ("close", "high", "low", "open", "volume")
INDICATORS = ("return", "ma_ratio", "volatility", "volume_ratio", "rsi")
DEFAULT_WINDOWS = (5, 10, 20)


class DataError(ValueError):
    """Bad or insufficient input data."""


@dataclass(frozen=True)
class OhlcvRecord:
    date: dt.date
    ticker: str
    open: float
    high: float
    low: float
    close: float
    volume: float

    def validate(self) -> None:
        lo, hi = min(self.open, self.close), max(self.open, self.close)
        if not (self.low <= lo and hi <= self.high):
            raise DataError(
                f"OHLC invariant violated for {self.ticker} {self.date}: "
                f"low={self.low} open={self.open} close={self.close} high={self.high}"
            )
        if self.volume < 0:
            raise DataError(f"negative volume for {self.ticker} {self.date}")


@dataclass
class StockPanel:
    """Stocks aligned on one trading-day axis.

    ``ohlcv`` is N x T_total x 5 in RAW_ATTRIBUTES order. ``features``,
    ``news`` and ``time`` are filled in by later pipeline stages.
    """

    tickers: list[str]
    days: list[dt.date]
    ohlcv: np.ndarray
    features: np.ndarray | None = None
    feature_names: list[str] = field(default_factory=list)
    news: np.ndarray | None = None
    time: np.ndarray | None = None
    dropped_warmup: int = 0

    @property
    def closes(self) -> np.ndarray:
        return self.ohlcv[:, :, 0]

    @property
    def n_stocks(self) -> int:
        return len(self.tickers)

    @property
    def n_days(self) -> int:
        return len(self.days)

    def day_index(self, day: dt.date | str) -> int:
        if isinstance(day, str):
            day = dt.date.fromisoformat(day)
        try:
            return self.days.index(day)
        except ValueError:
            raise DataError(f"date {day.isoformat()} is not in the panel") from None


def _parse_row(row: list[str], lineno: int) -> OhlcvRecord:
    if len(row) != len(OHLCV_HEADER):
        raise DataError(f"line {lineno}: expected {len(OHLCV_HEADER)} fields, got {len(row)}")
    try:
        rec = OhlcvRecord(
            date=dt.date.fromisoformat(row[0].strip()),
            ticker=row[1].strip(),
            open=float(row[2]),
            high=float(row[3]),
            low=float(row[4]),
            close=float(row[5]),
            volume=float(row[6]),
        )
    except ValueError as exc:
        raise DataError(f"line {lineno}: {exc}") from None
    if not rec.ticker:
        raise DataError(f"line {lineno}: empty ticker")
    try:
        rec.validate()
    except DataError as exc:
        raise DataError(f"line {lineno}: {exc}") from None
    return rec


def load_ohlcv_csv(
    path: str | Path,
    min_days: int = 1,
    forward_fill: bool = False,
) -> StockPanel:
    """Read ``date,ticker,open,high,low,close,volume`` into an aligned panel.

    Tickers are aligned on the intersection of their trading days. With
    ``forward_fill`` the union of days is used instead and gaps after a
    ticker's first observation are filled from the previous row.
    """
    by_ticker: dict[str, dict[dt.date, OhlcvRecord]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip().lower() for h in header) != OHLCV_HEADER:
            raise DataError(f"line 1: header must be {','.join(OHLCV_HEADER)}, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            rec = _parse_row(row, lineno)
            days = by_ticker.setdefault(rec.ticker, {})
            if rec.date in days:
                raise DataError(f"line {lineno}: duplicate row for {rec.ticker} {rec.date}")
            days[rec.date] = rec
    if not by_ticker:
        raise DataError(f"{path}: no data rows")

    tickers = sorted(by_ticker)
    day_sets = [set(by_ticker[t]) for t in tickers]
    if forward_fill:
        start = max(min(s) for s in day_sets)
        days = sorted(d for d in set().union(*day_sets) if d >= start)
    else:
        days = sorted(set.intersection(*day_sets))
        for t, s in zip(tickers, day_sets):
            if len(s) != len(days):
                log.info("ticker %s: %d of %d days outside the shared axis", t, len(s) - len(days), len(s))

    ohlcv = np.empty((len(tickers), len(days), 5))
    for i, t in enumerate(tickers):
        rows = by_ticker[t]
        last = None
        filled = 0
        for j, d in enumerate(days):
            rec = rows.get(d)
            if rec is None:
                rec, filled = last, filled + 1
            ohlcv[i, j] = (rec.close, rec.high, rec.low, rec.open, rec.volume)
            last = rec
        if filled:
            log.warning("ticker %s: forward-filled %d missing days", t, filled)

    for t, s in zip(tickers, day_sets):
        usable = len(days) if forward_fill else len(s & set(days))
        if usable < min_days:
            raise DataError(f"ticker {t} has {usable} usable days, need at least {min_days}")
    return StockPanel(tickers=tickers, days=days, ohlcv=ohlcv)


# ---------------------------------------------------------------------------
# features


@dataclass(frozen=True)
class IndicatorConfig:
    indicators: tuple[str, ...] = INDICATORS
    windows: tuple[int, ...] = DEFAULT_WINDOWS

    def __post_init__(self):
        unknown = set(self.indicators) - set(INDICATORS)
        if unknown:
            raise ValueError(f"unknown indicators {sorted(unknown)}")
        if any(w < 1 for w in self.windows):
            raise ValueError("indicator windows must be >= 1")

    @property
    def warmup(self) -> int:
        return max(self.windows) if self.indicators and self.windows else 0

    @property
    def n_features(self) -> int:
        return len(RAW_ATTRIBUTES) + len(self.indicators) * len(self.windows)


def _rolling(x: np.ndarray, k: int) -> np.ndarray:
    """Windows of length k along the last axis: shape (..., T-k+1, k)."""
    return np.lib.stride_tricks.sliding_window_view(x, k, axis=-1)


def _indicator(name: str, close: np.ndarray, volume: np.ndarray, k: int) -> np.ndarray:
    """Indicator value for each day t >= k (NaN before), per stock row."""
    n, t_total = close.shape
    out = np.full((n, t_total), np.nan)
    if name == "return":
        out[:, k:] = close[:, k:] / close[:, :-k] - 1.0
    elif name == "ma_ratio":
        ma = _rolling(close, k).mean(axis=-1)
        out[:, k - 1 :] = close[:, k - 1 :] / ma - 1.0
    elif name == "volatility":
        r = np.full_like(close, np.nan)
        r[:, 1:] = close[:, 1:] / close[:, :-1] - 1.0
        out[:, k:] = _rolling(r[:, 1:], k).std(axis=-1)
    elif name == "volume_ratio":
        ma = _rolling(volume, k).mean(axis=-1)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(ma > 0, volume[:, k - 1 :] / np.where(ma > 0, ma, 1.0), 1.0)
        out[:, k - 1 :] = ratio - 1.0
    elif name == "rsi":
        diff = np.diff(close, axis=1)
        gains = _rolling(np.clip(diff, 0, None), k).mean(axis=-1)
        losses = _rolling(np.clip(-diff, 0, None), k).mean(axis=-1)
        total = gains + losses
        rsi = np.where(total > 0, gains / np.where(total > 0, total, 1.0), 0.5)
        out[:, k:] = rsi
    else:
        raise ValueError(f"unknown indicator {name!r}")
    return out


def compute_features(panel: StockPanel, config: IndicatorConfig | None = None) -> StockPanel:
    """Raw OHLCV attributes plus the configured indicators.

    Warm-up days (where any indicator is undefined) are dropped from the
    whole panel so every stock keeps the same day axis.
    """
    config = config or IndicatorConfig()
    warm = config.warmup
    if warm >= panel.n_days:
        raise DataError(
            f"indicator window {warm} needs more than the {panel.n_days} available days"
        )
    close, volume = panel.ohlcv[:, :, 0], panel.ohlcv[:, :, 4]
    columns = [panel.ohlcv[:, :, i] for i in range(5)]
    names = list(RAW_ATTRIBUTES)
    for name in config.indicators:
        for k in config.windows:
            columns.append(_indicator(name, close, volume, k))
            names.append(f"{name}_{k}")
    feats = np.stack(columns, axis=-1)[:, warm:, :]
    assert np.isfinite(feats).all(), "indicator produced non-finite values after warm-up"
    return StockPanel(
        tickers=list(panel.tickers),
        days=list(panel.days[warm:]),
        ohlcv=panel.ohlcv[:, warm:, :].copy(),
        features=feats,
        feature_names=names,
        news=None if panel.news is None else panel.news[:, warm:],
        time=None if panel.time is None else panel.time[warm:],
        dropped_warmup=panel.dropped_warmup + warm,
    )


def make_labels(closes: np.ndarray, d: int) -> np.ndarray:
    """1 where close[t+d] > close[t], else 0; shape N x (T_total - d)."""
    if d < 1:
        raise ValueError("horizon d must be >= 1")
    closes = np.asarray(closes, dtype=np.float64)
    return (closes[:, d:] > closes[:, :-d]).astype(np.int64)


# ---------------------------------------------------------------------------
# splits


@dataclass(frozen=True)
class DatasetSplit:
    """Contiguous day ranges ``[start, stop)`` per partition."""

    train: range
    val: range
    test: range

    def ranges(self) -> dict[str, range]:
        return {"train": self.train, "val": self.val, "test": self.test}

    def window_ends(self, name: str, lookback: int, horizon: int) -> list[int]:
        """Day indices t whose lookback [t-T+1, t] and label day t+d lie in ``name``."""
        r = self.ranges()[name]
        return list(range(r.start + lookback - 1, r.stop - horizon))

    def owner(self, t: int) -> str:
        for name, r in self.ranges().items():
            if t in r:
                return name
        raise IndexError(f"day index {t} lies outside every split")


def split_dataset(
    n_days: int,
    ratios: Sequence[float] = (7, 1, 2),
    lookback: int | None = None,
    horizon: int = 0,
) -> DatasetSplit:
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ValueError(f"ratios must be three positive numbers, got {ratios}")
    total = float(sum(ratios))
    n_train = int(np.floor(n_days * ratios[0] / total))
    n_val = int(np.floor(n_days * ratios[1] / total))
    split = DatasetSplit(
        train=range(0, n_train),
        val=range(n_train, n_train + n_val),
        test=range(n_train + n_val, n_days),
    )
    if lookback is not None:
        need = lookback + horizon
        for name, r in split.ranges().items():
            if len(r) < need:
                raise DataError(
                    f"{name} split has {len(r)} days, a window needs T + d = {need}"
                )
    return split


@dataclass
class SplitStats:
    mean: np.ndarray
    std: np.ndarray


def normalize_split(
    split: DatasetSplit, features: np.ndarray, eps: float = 1e-8
) -> tuple[np.ndarray, dict[str, SplitStats]]:
    """Per-feature population z-score, each split using only its own days."""
    out = np.empty_like(features, dtype=np.float64)
    stats = {}
    for name, r in split.ranges().items():
        block = features[:, r.start : r.stop, :]
        if block.shape[1] == 0:
            continue
        mean = block.mean(axis=(0, 1))
        std = block.std(axis=(0, 1))
        safe = np.where(std < eps, 1.0, std)
        out[:, r.start : r.stop, :] = np.where(std < eps, 0.0, (block - mean) / safe)
        stats[name] = SplitStats(mean=mean, std=std)
    return out, stats


# ---------------------------------------------------------------------------
# embedding providers

_MASK64 = (1 << 64) - 1
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for b in data:
        h ^= b
        h = (h * _FNV_PRIME) & _MASK64
    return h


def splitmix64_uniform(seed: int, n: int) -> np.ndarray:
    """n uniforms in [-1, 1) from a counter-based splitmix64 stream."""
    with np.errstate(over="ignore"):
        counter = np.arange(1, n + 1, dtype=np.uint64)
        z = np.uint64(seed) + counter * _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        z = z ^ (z >> np.uint64(31))
    unit = (z >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
    return 2.0 * unit - 1.0


def embedding_key(ticker: str, date: dt.date | str, text: str | None = None) -> str:
    if isinstance(date, dt.date):
        date = date.isoformat()
    return f"{ticker}|{date}|{text or ''}"


class EmbeddingProvider(Protocol):
    kind: str
    dim: int

    def embed(self, ticker: str, date, text: str | None = None) -> np.ndarray: ...


class MockEmbeddingProvider:
    """Deterministic pseudo-embeddings: FNV-1a of the key seeds splitmix64."""

    kind = "mock"

    def __init__(self, dim: int = 2048):
        self.dim = int(dim)

    def embed(self, ticker, date, text=None) -> np.ndarray:
        seed = fnv1a64(embedding_key(ticker, date, text).encode("utf-8"))
        return splitmix64_uniform(seed, self.dim)


class FileEmbeddingProvider:
    """Rows of a tensor file addressed by a ``{"ticker|date": row}`` manifest."""

    kind = "file"

    def __init__(self, tensor_path: str | Path, manifest_path: str | Path | None = None):
        tensor_path = Path(tensor_path)
        if manifest_path is None:
            manifest_path = tensor_path.with_suffix(".json")
        self.table = read_tensor(tensor_path)
        if self.table.ndim != 2:
            raise DataError(f"{tensor_path}: embedding table must be 2-D, got {self.table.shape}")
        with open(manifest_path) as fh:
            self.index = {str(k): int(v) for k, v in json.load(fh).items()}
        self.dim = self.table.shape[1]
        bad = [k for k, v in self.index.items() if not 0 <= v < self.table.shape[0]]
        if bad:
            raise DataError(f"{manifest_path}: rows out of range for keys {bad[:5]}")

    def embed(self, ticker, date, text=None) -> np.ndarray:
        if isinstance(date, dt.date):
            date = date.isoformat()
        key = f"{ticker}|{date}"
        try:
            return self.table[self.index[key]].copy()
        except KeyError:
            raise DataError(f"no embedding stored for {key!r}") from None


class RemoteEmbeddingProvider:
    """POSTs ``{ticker, date, text}`` and expects a JSON float array back."""

    kind = "remote"

    def __init__(self, url: str | None, dim: int, timeout: float = 10.0, retries: int = 2):
        url = os.environ.get("H3M_EMBEDDING_URL", url)
        if not url:
            raise ValueError("remote embedding provider needs embedding.remote.url")
        self.url, self.dim, self.timeout, self.retries = url, int(dim), timeout, retries

    def embed(self, ticker, date, text=None) -> np.ndarray:
        if isinstance(date, dt.date):
            date = date.isoformat()
        body = json.dumps({"ticker": ticker, "date": date, "text": text or ""}).encode()
        payload = post_json(self.url, body, self.timeout, self.retries)
        if isinstance(payload, dict):
            payload = payload.get("embedding")
        vec = np.asarray(payload, dtype=np.float64)
        if vec.shape != (self.dim,):
            raise DataError(f"remote embedding has shape {vec.shape}, expected ({self.dim},)")
        return vec


def post_json(url: str, body: bytes, timeout: float, retries: int):
    last = None
    for attempt in range(retries + 1):
        req = urllib.request.Request(
            url, data=body, headers={"Content-Type": "application/json"}, method="POST"
        )
        try:
            with urllib.request.urlopen(req, timeout=timeout) as resp:
                return json.loads(resp.read().decode("utf-8"))
        except (urllib.error.URLError, OSError, json.JSONDecodeError) as exc:
            last = exc
            log.warning("POST %s failed (attempt %d/%d): %s", url, attempt + 1, retries + 1, exc)
            if attempt < retries:
                time.sleep(min(0.1 * 2**attempt, 2.0))
    raise ConnectionError(f"POST {url} failed after {retries + 1} attempts: {last}")


def make_provider(kind: str, dim: int, **options) -> EmbeddingProvider:
    if kind == "mock":
        return MockEmbeddingProvider(dim)
    if kind == "file":
        return FileEmbeddingProvider(options["path"], options.get("manifest"))
    if kind == "remote":
        return RemoteEmbeddingProvider(
            options.get("url"), dim, options.get("timeout", 10.0), options.get("retries", 2)
        )
    raise ValueError(f"unknown embedding provider kind {kind!r}")


def attach_embeddings(
    panel: StockPanel,
    news: EmbeddingProvider,
    time_provider: EmbeddingProvider | None = None,
    texts: dict[tuple[str, str], str] | None = None,
) -> StockPanel:
    """Fill ``panel.news`` (N x T x D_news) and ``panel.time`` (T x D_time).

    Timestamps are embedded with an empty ticker, mirroring one date string
    per trading day shared across stocks.
    """
    time_provider = time_provider or news
    texts = texts or {}
    iso = [d.isoformat() for d in panel.days]
    panel.news = np.stack(
        [np.stack([news.embed(t, d, texts.get((t, d))) for d in iso]) for t in panel.tickers]
    )
    panel.time = np.stack([time_provider.embed("", d, d) for d in iso])
    if panel.news.shape[-1] != news.dim:
        raise DataError("news provider returned vectors of the wrong width")
    return panel
