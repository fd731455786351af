"""Local (stock-time) and global (stock) context hypergraphs.

Both layers learn four sub-hypergraphs, one per ordered modality pair
(quant/quant, news/news, quant/news, news/quant), fuse them into a single
column-stochastic incidence matrix that is shared by the two modalities,
weight its hyperedges by average Jensen-Shannon distinctiveness, and run one
hypergraph convolution per modality.
"""

from __future__ import annotations

from typing import NamedTuple, Sequence

import torch
from torch import nn

from .numerics import DTYPE, FFN, MultiHeadAttention, get_activation, pairwise_jsd, softmax, zscore

PAIRS = (("quant", "quant"), ("news", "news"), ("quant", "news"), ("news", "quant"))


class HypergraphOutput(NamedTuple):
    quant: torch.Tensor
    news: torch.Tensor
    incidence: torch.Tensor
    weights: torch.Tensor


def pair_key(mi: str, mj: str) -> str:
    return f"{mi}_{mj}"


def normalize_incidence(h: torch.Tensor) -> torch.Tensor:
    """Column z-score then column softmax: every hyperedge becomes a distribution over nodes."""
    return softmax(zscore(h, axis=0), axis=0)


def build_lch_subgraph(z_i: torch.Tensor, z_j: torch.Tensor, ffn: nn.Module) -> torch.Tensor:
    """``Z_i @ FFN(Z_j^T)``: the FFN maps the instance axis (NT) to E hyperedges."""
    if z_i.shape != z_j.shape:
        raise ValueError(f"instance counts differ: {tuple(z_i.shape)} vs {tuple(z_j.shape)}")
    return z_i @ ffn(z_j.transpose(0, 1))


def fuse_and_normalize(subgraphs: Sequence[torch.Tensor], fusion: nn.Module) -> torch.Tensor:
    if len({tuple(s.shape) for s in subgraphs}) != 1:
        raise ValueError("sub-hypergraphs must share one shape")
    return normalize_incidence(fusion(torch.cat(list(subgraphs), dim=1)))


def jsd_edge_weights(h: torch.Tensor) -> torch.Tensor:
    """Mean pairwise JSD of each hyperedge against the others, rescaled to mean 1.

    A single hyperedge, or a hypergraph whose edges are all identical, gets
    unit weights.
    """
    n_edges = h.shape[1]
    if n_edges == 1:
        return torch.ones(1, dtype=h.dtype)
    pair = pairwise_jsd(h)
    # diagonal is exactly zero, so the row sum skips self-pairs
    score = pair.sum(dim=1) / (n_edges - 1)
    mean = score.mean()
    # branch-free so the function stays traceable under vmap
    degenerate = mean <= 1e-300
    safe = torch.where(degenerate, torch.ones_like(mean), mean)
    return torch.where(degenerate, torch.ones_like(score), score / safe)


def hypergraph_conv(
    h: torch.Tensor,
    w: torch.Tensor,
    z: torch.Tensor,
    theta: torch.Tensor,
    activation="gelu",
) -> torch.Tensor:
    """``act(H diag(w) H^T Z Theta)``."""
    act = get_activation(activation) if isinstance(activation, str) else activation
    edge_msg = w.unsqueeze(1) * (h.transpose(0, 1) @ z)
    return act((h @ edge_msg) @ theta)


def _theta(dim: int, gain: float = 1.0) -> nn.Parameter:
    t = torch.empty(dim, dim, dtype=DTYPE)
    nn.init.orthogonal_(t, gain=gain)
    return nn.Parameter(t)


def propagation_gain(n_nodes: int, n_edges: int) -> float:
    """Init gain for Theta that undoes the contraction of ``H W H^T``.

    With column-stochastic H and mean(w) = 1 the propagation operator has
    spectral radius about E / n (exactly so for uniform H), so an
    unscaled Theta shrinks activations by n / E on every layer.
    """
    return n_nodes / n_edges


class LowRankTheta(nn.Module):
    def __init__(self, dim: int, rank: int, gain: float = 1.0):
        super().__init__()
        self.u = nn.Parameter(torch.randn(dim, rank, dtype=DTYPE) * (gain / rank**0.5))
        self.v = nn.Parameter(torch.randn(rank, dim, dtype=DTYPE) / dim**0.5)

    def forward(self) -> torch.Tensor:
        return self.u @ self.v


class LocalContextHypergraph(nn.Module):
    """Hypergraph over the N*T stock-time instances."""

    def __init__(
        self,
        n_instances: int,
        dim: int,
        n_edges: int,
        ffn_depth: int = 2,
        activation: str = "gelu",
        cross_uses_mj: bool = True,
        residual: bool = False,
    ):
        super().__init__()
        self.n_instances, self.dim, self.n_edges = n_instances, dim, n_edges
        self.cross_uses_mj = cross_uses_mj
        self.residual = residual
        self.activation = activation
        hidden = [n_edges] * (ffn_depth - 1)
        self.pair_ffn = nn.ModuleDict(
            {pair_key(a, b): FFN([n_instances, *hidden, n_edges]) for a, b in PAIRS}
        )
        self.fusion = FFN([4 * n_edges, *hidden, n_edges])
        gain = propagation_gain(n_instances, n_edges)
        self.theta = nn.ParameterDict({"quant": _theta(dim, gain), "news": _theta(dim, gain)})

    def forward(self, z_quant: torch.Tensor, z_news: torch.Tensor) -> HypergraphOutput:
        n, t, d = z_quant.shape
        if n * t != self.n_instances:
            raise ValueError(
                f"LCH was built for {self.n_instances} instances, got N*T = {n * t}"
            )
        flat = {"quant": z_quant.reshape(n * t, d), "news": z_news.reshape(n * t, d)}
        subs = []
        for a, b in PAIRS:
            inner = flat[b] if self.cross_uses_mj else flat[a]
            subs.append(build_lch_subgraph(flat[a], inner, self.pair_ffn[pair_key(a, b)]))
        h = fuse_and_normalize(subs, self.fusion)
        w = jsd_edge_weights(h)
        out = {}
        for m in ("quant", "news"):
            conv = hypergraph_conv(h, w, flat[m], self.theta[m], self.activation)
            if self.residual:
                conv = conv + flat[m]
            out[m] = conv.reshape(n, t, d)
        return HypergraphOutput(out["quant"], out["news"], h, w)


def gch_attention_pairs(
    flat: dict[str, torch.Tensor], attention: nn.ModuleDict
) -> dict[str, torch.Tensor]:
    """Head-averaged N x N weights: queries from m_i, keys from m_j."""
    mats = {}
    for a, b in PAIRS:
        key = pair_key(a, b)
        weights = attention[key].attention_weights(flat[a], flat[b])
        mats[key] = weights.mean(dim=0)
    return mats


class GlobalContextHypergraph(nn.Module):
    """Hypergraph over the N stocks, built from attention between stock histories."""

    def __init__(
        self,
        n_stocks: int,
        seq_dim: int,
        n_edges: int,
        heads: int = 2,
        ffn_depth: int = 2,
        activation: str = "gelu",
        theta_rank: int | None = None,
        residual: bool = False,
    ):
        super().__init__()
        self.n_stocks, self.seq_dim, self.n_edges = n_stocks, seq_dim, n_edges
        self.activation = activation
        self.residual = residual
        hidden = [n_edges] * (ffn_depth - 1)
        self.attention = nn.ModuleDict(
            {
                pair_key(a, b): MultiHeadAttention(seq_dim, heads, output_projection=False)
                for a, b in PAIRS
            }
        )
        self.pair_ffn = nn.ModuleDict(
            {pair_key(a, b): FFN([n_stocks, *hidden, n_edges]) for a, b in PAIRS}
        )
        self.fusion = FFN([4 * n_edges, *hidden, n_edges])
        gain = propagation_gain(n_stocks, n_edges)
        if theta_rank:
            self.theta = nn.ModuleDict(
                {m: LowRankTheta(seq_dim, theta_rank, gain) for m in ("quant", "news")}
            )
        else:
            self.theta = nn.ParameterDict({m: _theta(seq_dim, gain) for m in ("quant", "news")})

    def _theta_matrix(self, m: str) -> torch.Tensor:
        theta = self.theta[m]
        return theta() if isinstance(theta, LowRankTheta) else theta

    def forward(self, z_quant: torch.Tensor, z_news: torch.Tensor) -> HypergraphOutput:
        n, t, d = z_quant.shape
        if n != self.n_stocks or t * d != self.seq_dim:
            raise ValueError(
                f"GCH was built for N={self.n_stocks}, T*D={self.seq_dim}; got N={n}, T*D={t * d}"
            )
        flat = {"quant": z_quant.reshape(n, t * d), "news": z_news.reshape(n, t * d)}
        attn = gch_attention_pairs(flat, self.attention)
        subs = [
            normalize_incidence(self.pair_ffn[pair_key(a, b)](attn[pair_key(a, b)]))
            for a, b in PAIRS
        ]
        h = fuse_and_normalize(subs, self.fusion)
        w = jsd_edge_weights(h)
        out = {}
        for m in ("quant", "news"):
            conv = hypergraph_conv(h, w, flat[m], self._theta_matrix(m), self.activation)
            if self.residual:
                conv = conv + flat[m]
            out[m] = conv.reshape(n, t, d)
        return HypergraphOutput(out["quant"], out["news"], h, w)
