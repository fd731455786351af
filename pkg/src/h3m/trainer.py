"""Composite loss, AdamW with warmup/linear decay, the training loop and checkpoints."""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .dataio import DatasetSplit, StockPanel, make_labels, normalize_split, split_dataset
from .model import ABLATIONS, H3MModel, ModelConfig, ModelOutput
from .numerics import DTYPE, NonFiniteError, read_tensor, write_tensor
from .ssmoes import aux_balance_loss

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-7
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    epochs: int = 40
    lr: float = 1e-4
    weight_decay: float = 0.05
    warmup_frac: float = 0.10
    alpha: float = 0.1
    beta: float = 0.1
    lookback: int = 20
    horizon: int = 10
    seed: int = 0
    split_ratios: tuple[float, float, float] = (7, 1, 2)
    shuffle: bool = True
    grad_clip: float | None = None

    def __post_init__(self):
        self.split_ratios = tuple(self.split_ratios)
        self.validate()

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValueError("train.epochs must be >= 1")
        if self.lr <= 0:
            raise ValueError("train.lr must be positive")
        if self.weight_decay < 0:
            raise ValueError("train.weight_decay must be >= 0")
        if not 0 < self.warmup_frac < 1:
            raise ValueError("train.warmup_frac must lie in (0, 1)")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("train.alpha and train.beta must be >= 0")
        if self.lookback < 1 or self.horizon < 1:
            raise ValueError("train.lookback and train.horizon must be >= 1")
        if len(self.split_ratios) != 3 or any(r <= 0 for r in self.split_ratios):
            raise ValueError("train.split_ratios must be three positive numbers")

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split_ratios"] = list(self.split_ratios)
        return d


# ---------------------------------------------------------------------------
# losses


def classification_loss(prob_up: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    p = prob_up.clamp(PROB_CLAMP, 1 - PROB_CLAMP)
    y = labels.to(p.dtype)
    return -(y * torch.log(p) + (1 - y) * torch.log(1 - p)).mean()


def total_loss(cls, aux_mkt, aux_ind, alpha: float, beta: float):
    return cls + alpha * aux_mkt + beta * aux_ind


def model_loss(out: ModelOutput, labels: torch.Tensor, alpha: float, beta: float):
    """Returns (total, cls, aux_mkt, aux_ind)."""
    cls = classification_loss(out.prob_up, labels)
    zero = torch.zeros((), dtype=cls.dtype)
    aux_mkt = aux_balance_loss(out.market.gates, out.market.probs) if out.market else zero
    aux_ind = aux_balance_loss(out.industry.gates, out.industry.probs) if out.industry else zero
    return total_loss(cls, aux_mkt, aux_ind, alpha, beta), cls, aux_mkt, aux_ind


# ---------------------------------------------------------------------------
# optimizer


def warmup_steps(total_steps: int, warmup_frac: float) -> int:
    return max(1, min(total_steps - 1, round(total_steps * warmup_frac))) if total_steps > 1 else 1


def lr_at(step: int, base_lr: float, total_steps: int, n_warmup: int) -> float:
    """Linear warmup to ``base_lr`` at ``n_warmup`` then linear decay to 0 at ``total_steps``.

    ``step`` counts updates from 1.
    """
    if total_steps <= n_warmup:
        return base_lr * min(1.0, step / n_warmup)
    return base_lr * max(0.0, min(step / n_warmup, (total_steps - step) / (total_steps - n_warmup)))


def make_optimizer(params, config: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(
        params, lr=config.lr, betas=ADAM_BETAS, eps=ADAM_EPS, weight_decay=config.weight_decay
    )


def optimizer_step(model: torch.nn.Module, optimizer: torch.optim.Optimizer, lr: float) -> None:
    """One AdamW update at learning rate ``lr``; aborts on a non-finite gradient."""
    for name, p in model.named_parameters():
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise NonFiniteError(f"non-finite gradient in {name}; step aborted")
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.step()


# ---------------------------------------------------------------------------
# data


@dataclass
class WindowData:
    """Normalized model inputs over the full day axis plus labels and split.

    features: N x T_total x F, news: N x T_total x D_news, time: T_total x D_time,
    labels: N x (T_total - d).
    """

    features: np.ndarray
    news: np.ndarray
    time: np.ndarray
    labels: np.ndarray
    split: DatasetSplit
    lookback: int
    horizon: int
    days: list = field(default_factory=list)
    tickers: list = field(default_factory=list)

    def ends(self, name: str) -> list[int]:
        return self.split.window_ends(name, self.lookback, self.horizon)

    def window(self, t: int, with_labels: bool = True):
        lo, hi = t - self.lookback + 1, t + 1
        if lo < 0 or t >= self.features.shape[1]:
            raise IndexError(f"window ending at day {t} does not fit the panel")
        xq = torch.as_tensor(self.features[:, lo:hi], dtype=DTYPE)
        xn = torch.as_tensor(self.news[:, lo:hi], dtype=DTYPE)
        xt = torch.as_tensor(self.time[lo:hi], dtype=DTYPE)
        y = None
        if with_labels and t < self.labels.shape[1]:
            y = torch.as_tensor(self.labels[:, t])
        return xq, xn, xt, y

    @classmethod
    def from_panel(cls, panel: StockPanel, lookback: int, horizon: int, ratios=(7, 1, 2)):
        if panel.features is None or panel.news is None or panel.time is None:
            raise ValueError("panel needs features, news and time embeddings")
        split = split_dataset(panel.n_days, ratios, lookback, horizon)
        feats, _ = normalize_split(split, panel.features)
        return cls(
            features=feats,
            news=panel.news,
            time=panel.time,
            labels=make_labels(panel.closes, horizon),
            split=split,
            lookback=lookback,
            horizon=horizon,
            days=[d.isoformat() for d in panel.days],
            tickers=list(panel.tickers),
        )


# ---------------------------------------------------------------------------
# training


@dataclass
class FitResult:
    model: H3MModel
    log: list[dict]
    best_epoch: int
    best_val_acc: float
    step: int


def build_model(config: ModelConfig, seed: int) -> H3MModel:
    torch.manual_seed(seed)
    return H3MModel(config)


@torch.no_grad()
def predict_window(model: H3MModel, data: WindowData, t: int) -> ModelOutput:
    model.eval()
    xq, xn, xt, _ = data.window(t, with_labels=False)
    return model(xq, xn, xt)


@torch.no_grad()
def accuracy(model: H3MModel, data: WindowData, name: str) -> float:
    ends = data.ends(name)
    if not ends:
        return float("nan")
    correct = total = 0
    for t in ends:
        out = predict_window(model, data, t)
        y = torch.as_tensor(data.labels[:, t])
        correct += int(((out.prob_up > 0.5).long() == y).sum())
        total += y.numel()
    return correct / total


def fit(data: WindowData, model_config: ModelConfig, train_config: TrainConfig, log_path=None) -> FitResult:
    """Train on every train-split window; keep the best-validation-accuracy weights."""
    cfg = train_config
    model = build_model(model_config, cfg.seed)
    optimizer = make_optimizer(model.parameters(), cfg)
    rng = np.random.default_rng(cfg.seed)
    torch.manual_seed(cfg.seed)
    train_ends = np.asarray(data.ends("train"))
    if train_ends.size == 0:
        raise ValueError("training split holds no complete window")
    total_steps = cfg.epochs * len(train_ends)
    n_warm = warmup_steps(total_steps, cfg.warmup_frac)

    history: list[dict] = []
    best_acc, best_epoch, best_state = -1.0, -1, None
    step = 0
    sink = open(log_path, "w") if log_path else None
    try:
        for epoch in range(1, cfg.epochs + 1):
            order = rng.permutation(train_ends) if cfg.shuffle else train_ends
            model.train()
            sums = np.zeros(4)
            for batch_index, t in enumerate(order):
                xq, xn, xt, y = data.window(int(t))
                out = model(xq, xn, xt)
                loss, cls, aux_m, aux_i = model_loss(out, y, cfg.alpha, cfg.beta)
                if not torch.isfinite(loss):
                    raise NonFiniteError(
                        f"non-finite loss at epoch {epoch}, batch {batch_index} (window end {int(t)})"
                    )
                optimizer.zero_grad(set_to_none=True)
                loss.backward()
                if cfg.grad_clip:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
                step += 1
                optimizer_step(model, optimizer, lr_at(step, cfg.lr, total_steps, n_warm))
                sums += [loss.item(), cls.item(), aux_m.item(), aux_i.item()]
            n = len(order)
            entry = {
                "epoch": epoch,
                "step": step,
                "train_loss": sums[0] / n,
                "cls_loss": sums[1] / n,
                "aux_market": sums[2] / n,
                "aux_industry": sums[3] / n,
                # contributions to the total loss (zero when alpha or beta is 0)
                "aux_market_term": cfg.alpha * sums[2] / n,
                "aux_industry_term": cfg.beta * sums[3] / n,
                "train_acc": accuracy(model, data, "train"),
                "val_acc": accuracy(model, data, "val"),
            }
            history.append(entry)
            if sink:
                sink.write(json.dumps(entry) + "\n")
                sink.flush()
            log.info("epoch %d: %s", epoch, entry)
            val = entry["val_acc"]
            score = -math.inf if math.isnan(val) else val
            if best_state is None or score > best_acc:
                best_acc, best_epoch = score, epoch
                best_state = copy.deepcopy(model.state_dict())
    finally:
        if sink:
            sink.close()
    model.load_state_dict(best_state)
    model.eval()
    return FitResult(model, history, best_epoch, best_acc, step)


# ---------------------------------------------------------------------------
# checkpoints

MANIFEST = "manifest.json"


def _group(name: str) -> str:
    return name.split(".", 1)[0]


def save_checkpoint(path, model: H3MModel, train_config: TrainConfig | None = None, step: int = 0, extra=None):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    state = model.state_dict()
    groups: dict[str, list[tuple[str, torch.Tensor]]] = {}
    for name, tensor in state.items():
        groups.setdefault(_group(name), []).append((name, tensor))
    entries = []
    for group, items in groups.items():
        flat = np.concatenate([t.detach().cpu().numpy().reshape(-1) for _, t in items])
        fname = f"{group}.tensor"
        write_tensor(path / fname, flat, dtype="f64")
        offset = 0
        for name, t in items:
            entries.append({"name": name, "shape": list(t.shape), "file": fname, "offset": offset})
            offset += t.numel()
    manifest = {
        "format": "h3m-checkpoint/1",
        "step": step,
        "model": model.config.to_dict(),
        "train": train_config.to_dict() if train_config else None,
        "tensors": entries,
        "extra": extra or {},
    }
    with open(path / MANIFEST, "w") as fh:
        json.dump(manifest, fh, indent=2)
    return path


def load_checkpoint(path):
    """Returns (model, manifest)."""
    path = Path(path)
    with open(path / MANIFEST) as fh:
        manifest = json.load(fh)
    model = H3MModel(ModelConfig.from_dict(manifest["model"]))
    cache: dict[str, np.ndarray] = {}
    state = {}
    for entry in manifest["tensors"]:
        if entry["file"] not in cache:
            cache[entry["file"]] = read_tensor(path / entry["file"])
        size = int(np.prod(entry["shape"], dtype=np.int64))
        values = cache[entry["file"]][entry["offset"] : entry["offset"] + size]
        state[entry["name"]] = torch.as_tensor(values.reshape(entry["shape"]).copy(), dtype=DTYPE)
    model.load_state_dict(state)
    model.eval()
    return model, manifest


__all__ = [
    "ABLATIONS",
    "FitResult",
    "TrainConfig",
    "WindowData",
    "accuracy",
    "classification_loss",
    "fit",
    "load_checkpoint",
    "lr_at",
    "make_optimizer",
    "model_loss",
    "optimizer_step",
    "predict_window",
    "save_checkpoint",
    "total_loss",
]
