"""Modality projection, temporal injection and the fusion + frozen backbone layer."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .dataio import post_json
from .numerics import DTYPE, FFN, seeded_orthogonal

BACKBONE_KINDS = ("identity", "frozen_orthogonal", "remote")


@dataclass(frozen=True)
class BackboneSpec:
    kind: str = "frozen_orthogonal"
    dim: int = 2048
    seed: int = 0
    url: str | None = None
    timeout: float = 30.0
    retries: int = 2

    def __post_init__(self):
        if self.kind not in BACKBONE_KINDS:
            raise ValueError(f"backbone kind must be one of {BACKBONE_KINDS}, got {self.kind!r}")


class ModalityProjector(nn.Module):
    """Per-modality FFNs into the shared width D."""

    def __init__(self, n_features: int, d_news: int, d_time: int, dim: int, depth: int = 1):
        super().__init__()
        hidden = [dim] * (depth - 1)
        self.quant = FFN([n_features, *hidden, dim])
        self.news = FFN([d_news, *hidden, dim])
        self.time = FFN([d_time, *hidden, dim])

    def forward(self, x_quant, x_news, x_time):
        return self.quant(x_quant), self.news(x_news), self.time(x_time)


def project_modalities(x_quant, x_news, x_time, projector: ModalityProjector):
    return projector(x_quant, x_news, x_time)


def add_temporal(h_quant: torch.Tensor, h_time: torch.Tensor) -> torch.Tensor:
    """Broadcast the T x D timestamp encoding over the stock axis."""
    if h_quant.shape[-2:] != h_time.shape[-2:]:
        raise ValueError(f"time encoding {tuple(h_time.shape)} does not match {tuple(h_quant.shape)}")
    return h_quant + h_time.unsqueeze(0)


def pass_news(h_news: torch.Tensor) -> torch.Tensor:
    return h_news


class FrozenBackbone(nn.Module):
    """Fixed transform standing in for the pretrained language model.

    The orthogonal matrix is a buffer, so it is saved with the model but never
    seen by the optimizer and never receives a gradient.
    """

    def __init__(self, spec: BackboneSpec):
        super().__init__()
        self.spec = spec
        if spec.kind == "frozen_orthogonal":
            self.register_buffer("matrix", seeded_orthogonal(spec.dim, spec.seed))
        else:
            self.matrix = None

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if self.spec.kind == "identity":
            return z
        if self.spec.kind == "frozen_orthogonal":
            return z @ self.matrix.detach()
        return self._remote(z)

    def _remote(self, z: torch.Tensor) -> torch.Tensor:
        flat = z.detach().reshape(-1, z.shape[-1]).cpu().numpy()
        body = json.dumps({"embeddings": flat.tolist(), "dim": self.spec.dim}).encode()
        reply = post_json(self.spec.url, body, self.spec.timeout, self.spec.retries)
        out = np.asarray(reply.get("outputs") if isinstance(reply, dict) else None, dtype=np.float64)
        if out.shape != (flat.shape[0], self.spec.dim):
            raise ValueError(
                f"remote backbone returned shape {out.shape}, expected {(flat.shape[0], self.spec.dim)}"
            )
        # the remote model is frozen: its output enters the graph as a constant
        return torch.as_tensor(out, dtype=DTYPE).reshape(*z.shape[:-1], self.spec.dim)


class FusionBackbone(nn.Module):
    """Concatenate both modalities, fuse into the backbone width, apply the backbone."""

    def __init__(self, dim: int, backbone: BackboneSpec, depth: int = 2):
        super().__init__()
        hidden = [backbone.dim] * (depth - 1)
        self.fusion = FFN([2 * dim, *hidden, backbone.dim])
        self.backbone = FrozenBackbone(backbone)

    def forward(self, z_quant: torch.Tensor, z_news: torch.Tensor) -> torch.Tensor:
        if z_quant.shape != z_news.shape:
            raise ValueError(f"modality shapes differ: {tuple(z_quant.shape)} vs {tuple(z_news.shape)}")
        fused = self.fusion(torch.cat([z_quant, z_news], dim=-1))
        return self.backbone(fused)


def fuse_and_backbone(z_quant, z_news, layer: FusionBackbone) -> torch.Tensor:
    return layer(z_quant, z_news)
