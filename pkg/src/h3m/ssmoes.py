"""Style-structured sparse mixture of experts.

Two pools share one mechanism: a market pool routed on ``[z_i, m]`` where
``m`` is a learned cross-stock market state, and an industry pool routed on
``[z_i, I_i]`` where ``I`` is an embedding of the global incidence matrix.
Each expert owns a trainable style vector appended to its input.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass

import torch
from torch import nn

from .numerics import DTYPE, FFN, gelu, softmax


@dataclass
class MoEOutput:
    """Pooled expert output plus what the balance loss and routing dumps need.

    Attributes:
        h: N x D gate-weighted expert outputs.
        gates: N x N_e, exactly K nonzeros per row.
        selected: N x K selected expert indices, best first.
        probs: N x N_e full softmax of the routing logits (before masking).
        logits: N x N_e raw routing logits.
    """

    h: torch.Tensor
    gates: torch.Tensor
    selected: torch.Tensor
    probs: torch.Tensor
    logits: torch.Tensor


def topk_indices(logits: torch.Tensor, k: int) -> torch.Tensor:
    """Indices of the k largest entries along the last axis; ties go to the lower index."""
    n_e = logits.shape[-1]
    if not 1 <= k <= n_e:
        raise ValueError(f"K must lie in [1, {n_e}], got {k}")
    # stable descending sort keeps equal logits in index order
    order = torch.sort(logits.detach(), dim=-1, descending=True, stable=True).indices
    return order[..., :k]


def route_topk(
    logits: torch.Tensor, k: int, indices: torch.Tensor | None = None
) -> tuple[torch.Tensor, torch.Tensor]:
    """Softmax over the top-k logits with everything else masked to -inf.

    ``indices`` overrides the selection (used to hold routing fixed while
    probing gradients by finite differences).
    """
    idx = topk_indices(logits, k) if indices is None else indices
    mask = torch.zeros_like(logits, dtype=torch.bool).scatter(-1, idx, True)
    sparse = logits.masked_fill(~mask, float("-inf"))
    gates = softmax(sparse, axis=-1)
    # exp(-inf) is already 0; the where keeps masked entries exactly zero under autograd too
    gates = torch.where(mask, gates, torch.zeros_like(gates))
    return gates, idx


class Expert(nn.Module):
    def __init__(self, dim: int, style_dim: int, depth: int = 2):
        super().__init__()
        self.style = nn.Parameter(torch.randn(style_dim, dtype=DTYPE) * 0.1)
        self.ffn = FFN([dim + style_dim, *[dim] * (depth - 1), dim])

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        style = self.style.expand(*z.shape[:-1], self.style.shape[0])
        return self.ffn(torch.cat([z, style], dim=-1))


def expert_forward(expert: Expert, z: torch.Tensor) -> torch.Tensor:
    return expert(z)


class ExpertPool(nn.Module):
    def __init__(self, dim: int, context_dim: int, n_experts: int, k: int, style_dim: int, depth: int = 2):
        super().__init__()
        if not 1 <= k <= n_experts:
            raise ValueError(f"top-K {k} must lie in [1, {n_experts}]")
        self.k = k
        self.fixed_selection: torch.Tensor | None = None
        self.router = nn.Linear(dim + context_dim, n_experts, dtype=DTYPE)
        self.experts = nn.ModuleList(Expert(dim, style_dim, depth) for _ in range(n_experts))

    @property
    def n_experts(self) -> int:
        return len(self.experts)

    def forward(self, z_flat: torch.Tensor, context: torch.Tensor) -> MoEOutput:
        """``context`` is N x C, or a single C vector shared by every stock."""
        if context.dim() == 1:
            context = context.expand(z_flat.shape[0], context.shape[0])
        logits = self.router(torch.cat([z_flat, context], dim=-1))
        gates, idx = route_topk(logits, self.k, self.fixed_selection)
        # experts see z_i only; the context shapes routing
        outs = torch.stack([e(z_flat) for e in self.experts], dim=1)
        h = (gates.unsqueeze(-1) * outs).sum(dim=1)
        return MoEOutput(h=h, gates=gates, selected=idx, probs=softmax(logits, axis=-1), logits=logits)


@contextmanager
def frozen_routing(model: nn.Module, *inputs):
    """Run ``model(*inputs)`` once and pin every pool's top-K selection to that pass."""
    pools = [m for m in model.modules() if isinstance(m, ExpertPool)]
    with torch.no_grad():
        captured: dict[int, torch.Tensor] = {}
        hooks = [
            pool.register_forward_hook(lambda mod, args, out: captured.__setitem__(id(mod), out.selected))
            for pool in pools
        ]
        try:
            model(*inputs)
        finally:
            for h in hooks:
                h.remove()
    for pool in pools:
        pool.fixed_selection = captured.get(id(pool))
    try:
        yield
    finally:
        for pool in pools:
            pool.fixed_selection = None


def selection_margin(logits: torch.Tensor, k: int) -> float:
    """Smallest gap between the K-th and (K+1)-th logit over all rows (inf when K = N_e)."""
    if k >= logits.shape[-1]:
        return float("inf")
    s = torch.sort(logits.detach(), dim=-1, descending=True).values
    return (s[..., k - 1] - s[..., k]).min().item()


def moe_pool_forward(pool: ExpertPool, z_flat, context) -> MoEOutput:
    return pool(z_flat, context)


def project_flat(z_llm: torch.Tensor, proj: nn.Linear) -> torch.Tensor:
    n = z_llm.shape[0]
    return proj(z_llm.reshape(n, -1))


def market_state(z_flat: torch.Tensor, w_left: torch.Tensor, w_right: torch.Tensor) -> torch.Tensor:
    """``W_l Z W_r`` with W_l: 1 x N and W_r: D x D_m; returns a D_m vector."""
    return (w_left @ z_flat @ w_right).reshape(-1)


def industry_embed(h_global: torch.Tensor, ffn: nn.Module) -> torch.Tensor:
    return ffn(h_global)


def aggregate_pools(h_mkt, h_ind, w_mkt: nn.Linear, w_ind: nn.Linear) -> torch.Tensor:
    return gelu(w_mkt(h_mkt) + w_ind(h_ind))


def predict_head(z: torch.Tensor, head: nn.Module) -> torch.Tensor:
    """N x 2 class probabilities; column 1 is the up-move probability."""
    return softmax(head(z), axis=-1)


def aux_balance_loss(gates: torch.Tensor, probs: torch.Tensor) -> torch.Tensor:
    """``sum_i f_i P_i``: f = share of stocks routing to expert i, P = mean routing probability."""
    f = (gates.detach() != 0).to(probs.dtype).mean(dim=0)
    p = probs.mean(dim=0)
    return (f * p).sum()


class SSMoE(nn.Module):
    """Both expert pools, their aggregation and the prediction head."""

    def __init__(
        self,
        in_dim: int,
        n_stocks: int,
        dim: int,
        n_edges: int,
        market_dim: int = 16,
        style_dim: int = 16,
        n_market: int = 3,
        n_industry: int = 10,
        k: int = 2,
        ffn_depth: int = 2,
    ):
        super().__init__()
        self.proj = nn.Linear(in_dim, dim, bias=False, dtype=DTYPE)
        self.w_left = nn.Parameter(torch.full((1, n_stocks), 1.0 / n_stocks, dtype=DTYPE))
        w_right = torch.empty(dim, market_dim, dtype=DTYPE)
        nn.init.xavier_uniform_(w_right)
        self.w_right = nn.Parameter(w_right)
        self.industry = FFN([n_edges, *[n_edges] * (ffn_depth - 1), n_edges])
        self.market_pool = ExpertPool(dim, market_dim, n_market, min(k, n_market), style_dim, ffn_depth)
        self.industry_pool = ExpertPool(dim, n_edges, n_industry, min(k, n_industry), style_dim, ffn_depth)
        self.w_mkt = nn.Linear(dim, dim, bias=False, dtype=DTYPE)
        self.w_ind = nn.Linear(dim, dim, bias=False, dtype=DTYPE)
        self.head = FFN([dim, dim, 2])

    def forward(self, z_llm: torch.Tensor, h_global: torch.Tensor):
        z_flat = project_flat(z_llm, self.proj)
        m = market_state(z_flat, self.w_left, self.w_right)
        mkt = self.market_pool(z_flat, m)
        ind = self.industry_pool(z_flat, industry_embed(h_global, self.industry))
        z = aggregate_pools(mkt.h, ind.h, self.w_mkt, self.w_ind)
        probs = predict_head(z, self.head)
        return probs, mkt, ind


class DenseReplacement(nn.Module):
    """Plain FFN standing in for the whole mixture (the w/o-SSMoEs ablation)."""

    def __init__(self, in_dim: int, dim: int, ffn_depth: int = 2):
        super().__init__()
        self.proj = nn.Linear(in_dim, dim, bias=False, dtype=DTYPE)
        self.ffn = FFN([dim, *[dim] * (ffn_depth - 1), dim], final_activation="gelu")
        self.head = FFN([dim, dim, 2])

    def forward(self, z_llm: torch.Tensor, h_global: torch.Tensor | None = None):
        z = self.ffn(project_flat(z_llm, self.proj))
        return predict_head(z, self.head), None, None
