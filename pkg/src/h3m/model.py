"""End-to-end stock movement model: projection, LCH, GCH, fusion backbone, SSMoEs."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import NamedTuple

import torch
from torch import nn

from .encoder import BackboneSpec, FusionBackbone, ModalityProjector, add_temporal, pass_news
from .hypergraph import GlobalContextHypergraph, LocalContextHypergraph
from .numerics import FFN
from .ssmoes import DenseReplacement, MoEOutput, SSMoE

ABLATIONS = ("lch", "llm", "ssmoes")

# E1/E2, N_mkt, N_ind per market
MARKET_PRESETS = {
    "djia": {"n_edges_local": 64, "n_edges_global": 64, "n_market": 3, "n_industry": 10},
    "nasdaq100": {"n_edges_local": 32, "n_edges_global": 32, "n_market": 5, "n_industry": 6},
    "sp100": {"n_edges_local": 32, "n_edges_global": 32, "n_market": 3, "n_industry": 8},
}


@dataclass
class ModelConfig:
    n_stocks: int
    n_features: int = 20
    lookback: int = 20
    dim: int = 256
    d_news: int = 2048
    d_time: int = 2048
    d_llm: int = 2048
    n_edges_local: int = 64
    n_edges_global: int = 64
    heads: int = 2
    market_dim: int = 16
    style_dim: int = 16
    n_market: int = 3
    n_industry: int = 10
    top_k: int = 2
    ffn_depth: int = 2
    projector_depth: int = 1
    activation: str = "gelu"
    dropout: float = 0.1
    backbone: str = "frozen_orthogonal"
    backbone_seed: int = 0
    backbone_url: str | None = None
    lch_cross_uses_mj: bool = True
    residual: bool = False
    gch_theta_rank: int | None = None
    ablate: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        positive = (
            "n_stocks", "n_features", "lookback", "dim", "d_news", "d_time", "d_llm",
            "n_edges_local", "n_edges_global", "heads", "market_dim", "style_dim",
            "n_market", "n_industry", "top_k", "ffn_depth", "projector_depth",
        )
        for name in positive:
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ValueError(f"model.{name} must be a positive integer, got {value!r}")
        if not isinstance(self.dropout, (int, float)) or not 0 <= self.dropout < 1:
            raise ValueError(f"model.dropout must lie in [0, 1), got {self.dropout!r}")
        unknown = set(self.ablate) - set(ABLATIONS)
        if unknown:
            raise ValueError(f"unknown ablation {sorted(unknown)}; choose from {ABLATIONS}")
        if (self.lookback * self.dim) % self.heads:
            raise ValueError(
                f"T*D = {self.lookback * self.dim} is not divisible by {self.heads} attention heads"
            )
        if self.top_k > min(self.n_market, self.n_industry):
            raise ValueError(
                f"top_k={self.top_k} exceeds an expert pool size "
                f"(n_market={self.n_market}, n_industry={self.n_industry})"
            )
        BackboneSpec(self.backbone, self.d_llm)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)

    def uses(self, part: str) -> bool:
        return part not in self.ablate


class ModelOutput(NamedTuple):
    probs: torch.Tensor  # N x 2
    market: MoEOutput | None
    industry: MoEOutput | None
    h_local: torch.Tensor | None
    w_local: torch.Tensor | None
    h_global: torch.Tensor
    w_global: torch.Tensor

    @property
    def prob_up(self) -> torch.Tensor:
        return self.probs[:, 1]


class H3MModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = c = config
        self.projector = ModalityProjector(c.n_features, c.d_news, c.d_time, c.dim, c.projector_depth)
        self.lch = (
            LocalContextHypergraph(
                c.n_stocks * c.lookback, c.dim, c.n_edges_local, c.ffn_depth, c.activation,
                c.lch_cross_uses_mj, c.residual,
            )
            if c.uses("lch")
            else None
        )
        self.gch = GlobalContextHypergraph(
            c.n_stocks, c.lookback * c.dim, c.n_edges_global, c.heads, c.ffn_depth,
            c.activation, c.gch_theta_rank, c.residual,
        )
        if c.uses("llm"):
            spec = BackboneSpec(c.backbone, c.d_llm, c.backbone_seed, c.backbone_url)
        else:
            spec = BackboneSpec("identity", c.dim)
        self.fusion = FusionBackbone(c.dim, spec, c.ffn_depth)
        width = spec.dim
        if c.uses("ssmoes"):
            self.moe = SSMoE(
                c.lookback * width, c.n_stocks, c.dim, c.n_edges_global, c.market_dim,
                c.style_dim, c.n_market, c.n_industry, c.top_k, c.ffn_depth,
            )
        else:
            self.moe = DenseReplacement(c.lookback * width, c.dim, c.ffn_depth)
        # dropout on the hidden activations of every FFN; inactive in eval mode
        for module in self.modules():
            if isinstance(module, FFN):
                module.dropout = nn.Dropout(c.dropout) if c.dropout > 0 else None

    def forward(self, x_quant: torch.Tensor, x_news: torch.Tensor, x_time: torch.Tensor) -> ModelOutput:
        """One window: x_quant N x T x F, x_news N x T x D_news, x_time T x D_time."""
        h_quant, h_news, h_time = self.projector(x_quant, x_news, x_time)
        z_quant = add_temporal(h_quant, h_time)
        z_news = pass_news(h_news)
        h_local = w_local = None
        if self.lch is not None:
            z_quant, z_news, h_local, w_local = self.lch(z_quant, z_news)
        z_quant, z_news, h_global, w_global = self.gch(z_quant, z_news)
        z_llm = self.fusion(z_quant, z_news)
        probs, mkt, ind = self.moe(z_llm, h_global)
        return ModelOutput(probs, mkt, ind, h_local, w_local, h_global, w_global)
