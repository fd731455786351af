import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from torch import nn

from h3m.numerics import DTYPE, FFN, gelu, softmax
from h3m.ssmoes import (
    DenseReplacement,
    Expert,
    ExpertPool,
    SSMoE,
    aggregate_pools,
    aux_balance_loss,
    expert_forward,
    frozen_routing,
    industry_embed,
    market_state,
    moe_pool_forward,
    predict_head,
    project_flat,
    route_topk,
    selection_margin,
)

f64 = torch.float64
T = lambda x: torch.tensor(x, dtype=f64)  # noqa: E731


def _set(linear, weight, bias=None):
    with torch.no_grad():
        linear.weight.copy_(T(weight))
        if bias is not None:
            linear.bias.copy_(T(bias))
        elif linear.bias is not None:
            linear.bias.zero_()


# --- projection and market state ---------------------------------------------


def test_project_flat_examples():
    proj = nn.Linear(2, 1, bias=False, dtype=DTYPE)
    _set(proj, [[1.0, 1.0]])
    assert project_flat(T([[[1.0, 2.0]]]), proj).tolist() == [[3.0]]
    proj = nn.Linear(6, 4, bias=False, dtype=DTYPE)
    assert torch.equal(project_flat(torch.zeros(3, 2, 3, dtype=f64), proj), torch.zeros(3, 4, dtype=f64))
    ident = nn.Linear(3, 3, bias=False, dtype=DTYPE)
    _set(ident, np.eye(3).tolist())
    z = torch.randn(2, 1, 3, dtype=f64)
    assert torch.equal(project_flat(z, ident), z[:, 0])


def test_market_state_examples():
    assert market_state(T([[2.0], [4.0]]), T([[0.5, 0.5]]), T([[3.0]])).tolist() == [9.0]
    z = torch.randn(3, 4, dtype=f64)
    wr = torch.randn(4, 2, dtype=f64)
    assert torch.allclose(market_state(z, T([[1.0, 0.0, 0.0]]), wr), z[0] @ wr)
    assert torch.equal(market_state(torch.zeros(3, 4, dtype=f64), torch.ones(1, 3, dtype=f64), wr),
                       torch.zeros(2, dtype=f64))


# --- routing -----------------------------------------------------------------


def test_route_topk_examples():
    gates, idx = route_topk(T([2.0, 1.0, 0.5]), 2)
    assert gates.tolist() == pytest.approx([0.7310585786300049, 0.2689414213699951, 0.0], abs=1e-12)
    assert gates[2].item() == 0.0
    assert idx.tolist() == [0, 1]
    logits = torch.randn(5, dtype=f64)
    gates, _ = route_topk(logits, 5)
    assert torch.allclose(gates, softmax(logits, axis=-1), atol=1e-15)
    gates, idx = route_topk(T([1.0, 1.0, 1.0]), 2)
    assert sorted(idx.tolist()) == [0, 1]
    assert gates.tolist() == [0.5, 0.5, 0.0]
    with pytest.raises(ValueError):
        route_topk(T([1.0, 2.0]), 3)
    with pytest.raises(ValueError):
        route_topk(T([1.0, 2.0]), 0)


def test_route_topk_fixed_indices_override():
    gates, idx = route_topk(T([3.0, 2.0, 1.0]), 2, torch.tensor([1, 2]))
    assert idx.tolist() == [1, 2]
    assert gates[0].item() == 0.0 and gates[1] > gates[2]


logit_rows = arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 8)),
                    elements=st.floats(-30, 30, allow_nan=False))


@given(logit_rows, st.data())
def test_route_topk_properties(x, data):
    n_e = x.shape[1]
    k = data.draw(st.integers(1, n_e))
    logits = torch.from_numpy(x)
    gates, idx = route_topk(logits, k)
    nz = gates != 0
    assert (nz.sum(-1) == k).all()
    assert (gates[nz] > 0).all()
    assert torch.allclose(gates.sum(-1), torch.ones(x.shape[0], dtype=f64), atol=1e-9)
    # the selection is the K largest, ties to the lower index
    for r in range(x.shape[0]):
        ref = sorted(range(n_e), key=lambda j: (-x[r, j], j))[:k]
        assert idx[r].tolist() == ref
    shift = data.draw(st.floats(-50, 50, allow_nan=False))
    _, idx2 = route_topk(logits + shift, k)
    # shifting may merge nearly equal logits through rounding; compare sets on well separated rows
    for r in range(x.shape[0]):
        vals = np.sort(x[r])[::-1]
        if k == n_e or vals[k - 1] - vals[k] > 1e-9 * (1 + abs(shift)):
            assert set(idx2[r].tolist()) == set(idx[r].tolist())


def test_selection_margin():
    assert selection_margin(T([[3.0, 1.0, 0.5]]), 1) == 2.0
    assert selection_margin(T([[3.0, 1.0]]), 2) == math.inf


# --- experts and pools -------------------------------------------------------


def test_expert_forward_examples():
    e = Expert(1, 1, depth=1)
    with torch.no_grad():
        e.style.fill_(2.0)
    _set(e.ffn.layers[0], [[1.0, 1.0]], [0.0])
    assert expert_forward(e, T([[1.0]])).tolist() == [[3.0]]
    e = Expert(3, 2, depth=1)
    _set(e.ffn.layers[0], np.zeros((3, 5)).tolist(), [0.1, 0.2, 0.3])
    out = expert_forward(e, torch.randn(4, 3, dtype=f64))
    assert torch.allclose(out, T([0.1, 0.2, 0.3]).expand(4, 3))
    a, b = Expert(3, 2, depth=1), Expert(3, 2, depth=1)
    b.ffn.load_state_dict(a.ffn.state_dict())
    with torch.no_grad():
        a.style.copy_(T([1.0, 0.0]))
        b.style.copy_(T([0.0, 1.0]))
    z = torch.randn(2, 3, dtype=f64)
    assert not torch.allclose(expert_forward(a, z), expert_forward(b, z))
    assert a.style is not b.style and a.style.requires_grad


def test_pool_k1_equals_selected_expert():
    torch.manual_seed(0)
    pool = ExpertPool(4, 2, 3, 1, 2)
    z, ctx = torch.randn(5, 4, dtype=f64), torch.randn(2, dtype=f64)
    out = moe_pool_forward(pool, z, ctx)
    for i in range(5):
        j = out.selected[i, 0].item()
        assert torch.allclose(out.h[i], pool.experts[j](z[i : i + 1])[0], atol=1e-15)


def test_pool_identical_experts_ignore_routing():
    torch.manual_seed(0)
    pool = ExpertPool(4, 2, 3, 2, 2)
    for e in pool.experts[1:]:
        e.load_state_dict(pool.experts[0].state_dict())
    z = torch.randn(5, 4, dtype=f64)
    a = pool(z, torch.randn(2, dtype=f64)).h
    b = pool(z, torch.randn(2, dtype=f64)).h
    assert torch.allclose(a, pool.experts[0](z), atol=1e-14)
    assert torch.allclose(a, b, atol=1e-14)


def test_pool_hand_evaluation():
    pool = ExpertPool(1, 1, 2, 2, 1, depth=1)
    _set(pool.router, [[1.0, 0.0], [0.0, 1.0]], [0.0, 0.0])  # logits = [z, c]
    for e, (w, s) in zip(pool.experts, [([[1.0, 0.0]], 0.0), ([[0.0, 1.0]], 5.0)]):
        _set(e.ffn.layers[0], w, [0.0])
        with torch.no_grad():
            e.style.fill_(s)
    out = pool(T([[2.0]]), T([1.0]))
    g0 = 1 / (1 + math.exp(-1.0))
    assert out.gates[0].tolist() == pytest.approx([g0, 1 - g0], abs=1e-12)
    assert out.h.item() == pytest.approx(g0 * 2.0 + (1 - g0) * 5.0, abs=1e-12)
    assert out.probs.shape == (1, 2) and out.logits.tolist() == [[2.0, 1.0]]


def test_pool_contexts_shape_routing_only():
    torch.manual_seed(0)
    pool = ExpertPool(3, 2, 4, 2, 2)
    z = torch.randn(6, 3, dtype=f64)
    per_stock = pool(z, torch.randn(6, 2, dtype=f64))
    assert per_stock.h.shape == (6, 3) and per_stock.gates.shape == (6, 4)
    with pytest.raises(ValueError):
        ExpertPool(3, 2, 4, 5, 2)


def test_frozen_routing_pins_selection():
    torch.manual_seed(0)
    pool = ExpertPool(3, 2, 4, 2, 2)
    z, c = torch.randn(6, 3, dtype=f64), torch.randn(2, dtype=f64)
    ref = pool(z, c).selected
    with frozen_routing(pool, z, c):
        assert torch.equal(pool.fixed_selection, ref)
        moved = pool(z, -50 * c).selected
        assert torch.equal(moved, ref)
    assert pool.fixed_selection is None


# --- industry, aggregation, head ---------------------------------------------


def test_industry_embed_examples():
    ffn = FFN([2, 2])
    _set(ffn.layers[0], [[1.0, 0.0], [0.0, 1.0]], [0.0, 0.0])
    assert industry_embed(T([[0.3, 0.7]]), ffn).tolist() == [[0.3, 0.7]]
    _set(ffn.layers[0], [[0.0, 0.0], [0.0, 0.0]], [1.5, -2.0])
    assert industry_embed(torch.rand(3, 2, dtype=f64), ffn).tolist() == [[1.5, -2.0]] * 3


def test_aggregate_pools_examples():
    wm, wi = nn.Linear(1, 1, bias=False, dtype=DTYPE), nn.Linear(1, 1, bias=False, dtype=DTYPE)
    _set(wm, [[1.0]])
    _set(wi, [[1.0]])
    out = aggregate_pools(T([[1.0]]), T([[2.0]]), wm, wi)
    assert out.item() == pytest.approx(3 * 0.5 * (1 + math.erf(3 / math.sqrt(2))), abs=1e-12)
    assert out.item() == pytest.approx(gelu(T(3.0)).item(), abs=1e-15)
    assert aggregate_pools(T([[0.0]]), T([[0.0]]), wm, wi).item() == 0.0
    _set(wi, [[0.0]])
    a = aggregate_pools(T([[1.0]]), T([[2.0]]), wm, wi)
    b = aggregate_pools(T([[1.0]]), T([[-7.0]]), wm, wi)
    assert torch.equal(a, b)


def test_predict_head_examples():
    head = FFN([1, 2])
    _set(head.layers[0], [[0.0], [0.0]], [0.0, math.log(3)])
    assert predict_head(T([[4.0]]), head)[0].tolist() == pytest.approx([0.25, 0.75], abs=1e-12)
    _set(head.layers[0], [[0.0], [0.0]], [0.0, 0.0])
    assert predict_head(T([[4.0]]), head)[0].tolist() == [0.5, 0.5]
    head = FFN([5, 5, 2])
    p = predict_head(torch.randn(7, 5, dtype=f64), head)
    assert torch.allclose(p.sum(-1), torch.ones(7, dtype=f64), atol=1e-9)


# --- balance loss ------------------------------------------------------------


def test_aux_loss_examples():
    uniform_probs = torch.full((2, 4), 0.25, dtype=f64)
    gates = T([[0.5, 0.5, 0, 0], [0, 0, 0.5, 0.5]])
    assert abs(aux_balance_loss(gates, uniform_probs).item() - 0.5) < 1e-12
    collapsed = T([[0.5, 0.5, 0, 0], [0.5, 0.5, 0, 0]])
    probs = T([[0.499, 0.499, 0.001, 0.001]] * 2)
    loss = aux_balance_loss(collapsed, probs).item()
    assert loss == pytest.approx(0.998, abs=1e-12) and loss > 0.5
    logits = torch.randn(5, 3, dtype=f64)
    gates, _ = route_topk(logits, 3)
    assert aux_balance_loss(gates, softmax(logits, axis=-1)).item() == pytest.approx(1.0, abs=1e-12)


def test_aux_loss_gradient_flows_through_probs_only():
    logits = torch.randn(4, 3, dtype=f64, requires_grad=True)
    gates, _ = route_topk(logits, 2)
    probs = softmax(logits, axis=-1)
    loss = aux_balance_loss(gates, probs)
    (g,) = torch.autograd.grad(loss, [logits], retain_graph=True)
    f = (gates.detach() != 0).double().mean(0)
    (ref,) = torch.autograd.grad((f * probs.mean(0)).sum(), [logits])
    assert torch.allclose(g, ref)


# --- full module -------------------------------------------------------------


def test_ssmoe_shapes_and_contract():
    torch.manual_seed(0)
    moe = SSMoE(in_dim=3 * 16, n_stocks=4, dim=8, n_edges=5, market_dim=4, style_dim=4,
                n_market=3, n_industry=6, k=2)
    probs, mkt, ind = moe(torch.randn(4, 3, 16, dtype=f64), torch.rand(4, 5, dtype=f64))
    assert probs.shape == (4, 2)
    assert torch.allclose(probs.sum(-1), torch.ones(4, dtype=f64), atol=1e-9)
    assert mkt.gates.shape == (4, 3) and ind.gates.shape == (4, 6)
    assert ((mkt.gates != 0).sum(-1) == 2).all() and ((ind.gates != 0).sum(-1) == 2).all()
    assert moe.w_right.shape == (8, 4) and moe.w_left.shape == (1, 4)


def test_dense_replacement_matches_shapes():
    torch.manual_seed(0)
    dense = DenseReplacement(3 * 16, 8)
    z = torch.randn(4, 3, 16, dtype=f64, requires_grad=True)
    probs, mkt, ind = dense(z)
    assert probs.shape == (4, 2) and mkt is None and ind is None
    loss = -torch.log(probs[:, 1]).mean()
    loss.backward()
    assert z.grad is not None and torch.isfinite(z.grad).all()
