"""Dense tensor primitives shared by every model component.

All model math runs on ``torch`` tensors in float64; the autograd tape comes
from torch, everything numerical on top of it (normalizations, divergences,
attention, feed-forward stacks, gradient checking, tensor files) lives here.
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

DTYPE = torch.float64
ZSCORE_EPS = 1e-8


class NonFiniteError(FloatingPointError):
    """Raised when an operation that promises finite output produced NaN/inf."""


class DivergenceError(ValueError):
    """Raised when KL(p||q) is infinite because q has a zero where p does not."""


def check_finite(x: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not torch.isfinite(x).all():
        bad = (~torch.isfinite(x)).sum().item()
        raise NonFiniteError(f"{what} has {bad} non-finite entries (shape {tuple(x.shape)})")
    return x


def softmax(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    if x.shape[axis] == 0:
        raise ValueError("softmax over an empty axis")
    shifted = x - x.amax(dim=axis, keepdim=True).detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=axis, keepdim=True)


def zscore(x: torch.Tensor, axis: int = 0, eps: float = ZSCORE_EPS) -> torch.Tensor:
    """Standardize along ``axis`` with the population std.

    Slices whose std falls below ``eps`` map to zeros.
    """
    mean = x.mean(dim=axis, keepdim=True)
    centered = x - mean
    var = (centered * centered).mean(dim=axis, keepdim=True)
    # mask before sqrt: sqrt'(0) would put NaN into the backward pass
    degenerate = var < eps * eps
    safe_std = torch.sqrt(torch.where(degenerate, torch.ones_like(var), var))
    return torch.where(degenerate, torch.zeros_like(centered), centered / safe_std)


def _as_tensor(p) -> torch.Tensor:
    if isinstance(p, torch.Tensor):
        return p
    return torch.as_tensor(np.asarray(p, dtype=np.float64), dtype=DTYPE)


def _check_distribution(p: torch.Tensor, name: str) -> None:
    if (p < 0).any():
        raise ValueError(f"{name} has negative entries")
    total = float(p.detach().sum(dim=-1).max()), float(p.detach().sum(dim=-1).min())
    if abs(total[0] - 1.0) > 1e-6 or abs(total[1] - 1.0) > 1e-6:
        raise ValueError(f"{name} does not sum to 1 (got {total})")


def kl_div(p, q, *, validate: bool = True) -> torch.Tensor:
    """KL(p||q) in nats along the last axis, with 0*log(0/q) = 0."""
    p, q = _as_tensor(p), _as_tensor(q)
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch {tuple(p.shape)} vs {tuple(q.shape)}")
    if validate:
        _check_distribution(p, "p")
        _check_distribution(q, "q")
    support = p > 0
    if validate and (support & (q <= 0)).any():
        raise DivergenceError("q is zero where p has mass")
    safe_p = torch.where(support, p, torch.ones_like(p))
    safe_q = torch.where(support, q, torch.ones_like(q))
    terms = torch.where(support, p * (torch.log(safe_p) - torch.log(safe_q)), torch.zeros_like(p))
    return terms.sum(dim=-1)


def jsd(p, q, *, validate: bool = True) -> torch.Tensor:
    """Jensen-Shannon divergence in nats; bounded by ln 2."""
    p, q = _as_tensor(p), _as_tensor(q)
    m = 0.5 * (p + q)
    return 0.5 * (kl_div(p, m, validate=validate) + kl_div(q, m, validate=validate))


def pairwise_jsd(h: torch.Tensor) -> torch.Tensor:
    """JSD between every pair of columns of a column-stochastic matrix, E x E."""
    cols = h.transpose(0, 1)
    p = cols.unsqueeze(1)
    q = cols.unsqueeze(0)
    p, q = torch.broadcast_tensors(p, q)
    return jsd(p, q, validate=False)


def gelu(x: torch.Tensor) -> torch.Tensor:
    return F.gelu(x)


ACTIVATIONS: dict[str, Callable[[torch.Tensor], torch.Tensor]] = {
    "gelu": gelu,
    "relu": F.relu,
    "tanh": torch.tanh,
    "identity": lambda x: x,
}


def get_activation(name: str) -> Callable[[torch.Tensor], torch.Tensor]:
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise ValueError(f"unknown activation {name!r}; choose from {sorted(ACTIVATIONS)}") from None


class FFN(nn.Module):
    """Stack of affine maps with an activation between consecutive layers.

    ``sizes`` lists the widths including input and output, so ``FFN([4, 8, 2])``
    is two layers. No activation follows the last layer unless
    ``final_activation`` is set.
    """

    def __init__(
        self,
        sizes: Sequence[int],
        activation: str = "gelu",
        final_activation: str | None = None,
        bias: bool = True,
        dropout: float = 0.0,
    ):
        super().__init__()
        if len(sizes) < 2:
            raise ValueError("FFN needs at least an input and an output width")
        self.sizes = list(sizes)
        self.layers = nn.ModuleList(
            nn.Linear(a, b, bias=bias, dtype=DTYPE) for a, b in zip(sizes[:-1], sizes[1:])
        )
        self.activation = get_activation(activation)
        self.final_activation = get_activation(final_activation) if final_activation else None
        self.dropout = nn.Dropout(dropout) if dropout > 0 else None

    @property
    def in_features(self) -> int:
        return self.sizes[0]

    @property
    def out_features(self) -> int:
        return self.sizes[-1]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return ffn_forward(x, self.layers, self.activation, self.final_activation, self.dropout)


def ffn_forward(
    x: torch.Tensor,
    layers: Iterable[nn.Linear],
    activation: Callable[[torch.Tensor], torch.Tensor] = gelu,
    final_activation: Callable[[torch.Tensor], torch.Tensor] | None = None,
    dropout: nn.Module | None = None,
) -> torch.Tensor:
    layers = list(layers)
    for i, layer in enumerate(layers):
        if x.shape[-1] != layer.in_features:
            raise ValueError(
                f"layer {i} expects last extent {layer.in_features}, got {x.shape[-1]}"
            )
        x = layer(x)
        if i < len(layers) - 1:
            x = activation(x)
            if dropout is not None:
                x = dropout(x)
    if final_activation is not None:
        x = final_activation(x)
    return x


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention over row sets (N x features).

    Self-attention is the special case ``queries is keys``; the module does
    not care. ``forward`` returns the projected output and the head-averaged
    N_q x N_k weight matrix.
    """

    def __init__(self, dim: int, heads: int = 2, output_projection: bool = True):
        super().__init__()
        if heads < 1 or dim % heads:
            raise ValueError(f"feature extent {dim} not divisible by {heads} heads")
        self.dim, self.heads = dim, heads
        self.q_proj = nn.Linear(dim, dim, dtype=DTYPE)
        self.k_proj = nn.Linear(dim, dim, dtype=DTYPE)
        # unit-variance projections; the default Linear init leaves scores near 0
        # and the averaged weights nearly uniform
        nn.init.xavier_normal_(self.q_proj.weight)
        nn.init.xavier_normal_(self.k_proj.weight)
        self.v_proj = nn.Linear(dim, dim, dtype=DTYPE) if output_projection else None
        self.out_proj = nn.Linear(dim, dim, dtype=DTYPE) if output_projection else None

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        n = x.shape[0]
        return x.reshape(n, self.heads, self.dim // self.heads).transpose(0, 1)

    def attention_weights(self, queries: torch.Tensor, keys: torch.Tensor) -> torch.Tensor:
        """Per-head weights, shape heads x N_q x N_k."""
        q = self._split(self.q_proj(queries))
        k = self._split(self.k_proj(keys))
        scores = q @ k.transpose(1, 2) / math.sqrt(self.dim // self.heads)
        return softmax(scores, axis=-1)

    def forward(self, queries, keys, values):
        weights = self.attention_weights(queries, keys)
        avg = weights.mean(dim=0)
        if self.out_proj is None:
            return None, avg
        v = self._split(self.v_proj(values))
        out = (weights @ v).transpose(0, 1).reshape(queries.shape[0], self.dim)
        return self.out_proj(out), avg


def mh_attention(queries, keys, values, heads: int = 1, module: MultiHeadAttention | None = None):
    """Functional wrapper; builds a default-initialized module when none is given."""
    if module is None:
        module = MultiHeadAttention(queries.shape[-1], heads)
    return module(queries, keys, values)


def seeded_orthogonal(dim: int, seed: int) -> torch.Tensor:
    """Fixed orthogonal matrix from the QR decomposition of a seeded Gaussian."""
    rng = np.random.Generator(np.random.PCG64(seed))
    g = rng.standard_normal((dim, dim))
    q, r = np.linalg.qr(g)
    q = q * np.sign(np.diag(r))
    return torch.as_tensor(q, dtype=DTYPE)


# ---------------------------------------------------------------------------
# gradient checking


def module_loss_fn(module: nn.Module, fn: Callable[[nn.Module, Callable], torch.Tensor]):
    """Adapt a module to the functional form ``grad_check`` expects.

    ``fn(call)`` receives a callable that runs ``module`` with substituted
    parameters, e.g. ``lambda call: loss(call(x))``. Returns
    ``(loss_fn, params)``.
    """
    from torch.func import functional_call

    buffers = dict(module.named_buffers())
    params = {k: v.detach() for k, v in module.named_parameters()}

    def loss_fn(p):
        def call(*args, **kwargs):
            return functional_call(module, {**p, **buffers}, args, kwargs)

        return fn(call)

    return loss_fn, params


def _ridders(values: torch.Tensor, steps: Sequence[float], shrink: float) -> torch.Tensor:
    """Ridders' polynomial extrapolation of central differences, per row.

    ``values`` is n x 2L holding f(x+h_i), f(x-h_i) for the L shrinking steps.
    Each entry keeps the tableau element with the smallest internal error
    estimate and stops once higher orders start to degrade.
    """
    n, levels = values.shape[0], len(steps)
    central = [(values[:, 2 * i] - values[:, 2 * i + 1]) / (2 * steps[i]) for i in range(levels)]
    best = central[0].clone()
    err = torch.full((n,), math.inf, dtype=DTYPE)
    active = torch.ones(n, dtype=torch.bool)
    prev = [central[0]]
    c2 = shrink * shrink
    for i in range(1, levels):
        row = [central[i]]
        fac = c2
        for j in range(1, i + 1):
            row.append((row[j - 1] * fac - prev[j - 1]) / (fac - 1.0))
            fac *= c2
            errt = torch.maximum((row[j] - row[j - 1]).abs(), (row[j] - prev[j - 1]).abs())
            better = active & (errt <= err)
            best = torch.where(better, row[j], best)
            err = torch.where(better, errt, err)
        active = active & ((row[i] - prev[i - 1]).abs() < 2.0 * err)
        prev = row
    return best


def _probe_offsets(method: str, epsilon: float, levels: int, shrink: float):
    if method == "central":
        return [epsilon, -epsilon]
    if method == "five_point":
        return [epsilon, -epsilon, 2 * epsilon, -2 * epsilon]
    if method == "ridders":
        out = []
        for i in range(levels):
            h = epsilon / shrink**i
            out += [h, -h]
        return out
    raise ValueError(f"unknown finite-difference method {method!r}")


def grad_check(
    loss_fn: Callable[[dict[str, torch.Tensor]], torch.Tensor],
    params,
    epsilon: float = 1e-5,
    *,
    method: str = "central",
    levels: int = 8,
    shrink: float = 2.0,
    vectorize: bool = False,
    chunk: int = 256,
    return_details: bool = False,
):
    """Compare autograd gradients with finite differences.

    ``params`` maps names to tensors (a plain sequence is named ``param0``,
    ``param1``, ...); ``loss_fn`` receives a dict with the same keys and
    must return a scalar. Every entry of every parameter is probed.

    Methods:
        central: ``(f(x+e) - f(x-e)) / 2e``.
        five_point: the O(e^4) central stencil.
        ridders: central differences at ``levels`` steps starting from
            ``epsilon`` and shrinking by ``shrink``, extrapolated to zero
            step (Ridders 1982). Robust when one model mixes entries of very
            different curvature and gradient magnitude.

    With ``vectorize`` the probes for one parameter run as a batch under
    ``torch.func.vmap``, so ``loss_fn`` must be vmap-compatible.

    Returns the max of ``|a - b| / max(1e-8, |a| + |b|)`` (and, with
    ``return_details``, the per-parameter maxima).
    """
    offsets = _probe_offsets(method, epsilon, levels, shrink)
    if not isinstance(params, dict):
        params = {f"param{i}": p for i, p in enumerate(params)}
    base = {k: v.detach().clone() for k, v in params.items()}

    leaves = {k: v.clone().requires_grad_(True) for k, v in base.items()}
    loss = loss_fn(leaves)
    if loss.numel() != 1:
        raise ValueError("loss_fn must return a scalar")
    with torch.no_grad():
        again = loss_fn(base)
    if again.item() != loss.item():
        raise RuntimeError(f"loss_fn is not deterministic: {loss.item()!r} vs {again.item()!r}")
    names = list(leaves)
    grads = torch.autograd.grad(loss, [leaves[k] for k in names], allow_unused=True)
    grads = {k: torch.zeros_like(base[k]) if g is None else g.detach() for k, g in zip(names, grads)}

    offsets_t = torch.tensor(offsets, dtype=DTYPE)
    per_param = {}
    with torch.no_grad():
        for name in names:
            if vectorize:
                vals = _fd_vectorized(loss_fn, base, name, offsets_t, chunk)
            else:
                vals = _fd_loop(loss_fn, base, name, offsets_t)
            if method == "central":
                fd = (vals[:, 0] - vals[:, 1]) / (2 * epsilon)
            elif method == "five_point":
                fd = (8 * (vals[:, 0] - vals[:, 1]) - (vals[:, 2] - vals[:, 3])) / (12 * epsilon)
            else:
                fd = _ridders(vals, offsets[0::2], shrink)
            a = grads[name].reshape(-1)
            rel = (a - fd).abs() / torch.clamp(a.abs() + fd.abs(), min=1e-8)
            per_param[name] = rel.max().item() if rel.numel() else 0.0
    worst = max(per_param.values(), default=0.0)
    if return_details:
        return worst, per_param
    return worst


def _fd_loop(loss_fn, base, name, offsets):
    flat = base[name].view(-1)
    out = torch.empty(flat.numel(), len(offsets), dtype=DTYPE)
    for k in range(flat.numel()):
        orig = flat[k].clone()
        for s, off in enumerate(offsets):
            flat[k] = orig + off
            out[k, s] = loss_fn(base).item()
        flat[k] = orig
    return out


def _fd_vectorized(loss_fn, base, name, offsets, chunk):
    from torch.func import vmap

    value = base[name]
    n, n_off = value.numel(), len(offsets)
    out = torch.empty(n, n_off, dtype=DTYPE)

    def probe(t):
        return loss_fn({**base, name: t})

    batched = vmap(probe)
    per_chunk = max(1, chunk // n_off)
    for lo in range(0, n, per_chunk):
        idx = torch.arange(lo, min(n, lo + per_chunk))
        delta = torch.zeros(len(idx), n_off, n, dtype=DTYPE)
        delta[torch.arange(len(idx)), :, idx] = offsets
        stack = value.reshape(1, 1, n) + delta
        res = batched(stack.reshape(-1, *value.shape))
        out[lo : lo + len(idx)] = res.reshape(len(idx), n_off)
    return out


# ---------------------------------------------------------------------------
# tensor files

_DTYPES = {"f32": "<f4", "f64": "<f8"}


def write_tensor(path: str | Path, array, dtype: str = "f32") -> None:
    """Write a JSON header line followed by raw little-endian row-major floats."""
    if dtype not in _DTYPES:
        raise ValueError(f"unsupported dtype {dtype!r}")
    if isinstance(array, torch.Tensor):
        array = array.detach().cpu().numpy()
    arr = np.ascontiguousarray(np.asarray(array), dtype=_DTYPES[dtype])
    header = json.dumps({"shape": list(arr.shape), "dtype": dtype, "order": "row-major"})
    with open(path, "wb") as fh:
        fh.write(header.encode("utf-8") + b"\n")
        fh.write(arr.tobytes(order="C"))


def read_tensor(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        payload = fh.read()
    if header.get("order", "row-major") != "row-major":
        raise ValueError(f"{path}: unsupported order {header['order']!r}")
    dtype = header.get("dtype", "f32")
    if dtype not in _DTYPES:
        raise ValueError(f"{path}: unsupported dtype {dtype!r}")
    shape = tuple(int(s) for s in header["shape"])
    arr = np.frombuffer(payload, dtype=_DTYPES[dtype])
    if arr.size != int(np.prod(shape, dtype=np.int64)):
        raise ValueError(f"{path}: payload holds {arr.size} values, header shape {shape}")
    return arr.reshape(shape).astype(np.float64)
