import pytest
import torch

from palm.backbone import Backbone, UntaggedTokenError, build_structured_mask
from palm.config import BackboneConfig
from palm.encoders import ACTION_QUERY, AFFORDANCE_QUERY, CONTEXT, ContextSequence

C, A, Q = CONTEXT, AFFORDANCE_QUERY, ACTION_QUERY


def mini_layout():
    # 2 timesteps x 2 context tokens, then 4 affordance queries and 1 action query at t=1
    roles = torch.tensor([C, C, C, C, A, A, A, A, Q])
    times = torch.tensor([0, 0, 1, 1, 1, 1, 1, 1, 1])
    return roles, times


def enumerated_mask():
    roles, times = mini_layout()
    S = len(roles)
    M = [[False] * S for _ in range(S)]
    for q in range(S):
        for k in range(S):
            rq, rk = int(roles[q]), int(roles[k])
            if rq == C and rk == C:
                M[q][k] = int(times[k]) <= int(times[q])  # rule 1
            elif rq == A and rk == C:
                M[q][k] = True  # rule 2
            elif rq == A and rk == A:
                M[q][k] = q == k  # rule 3
            elif rq == A and rk == Q:
                M[q][k] = False  # rule 4
            elif rq == Q and rk == C:
                M[q][k] = True  # rule 5
            elif rq == Q and rk == A:
                M[q][k] = True  # rule 6
            elif rq == C:
                M[q][k] = False  # rule 7
            elif rq == Q and rk == Q:
                M[q][k] = q == k  # rule 8
    return torch.tensor(M)


def test_mask_equals_enumeration():
    roles, times = mini_layout()
    assert torch.equal(build_structured_mask(roles, times), enumerated_mask())


def test_mask_named_entries():
    roles, times = mini_layout()
    m = build_structured_mask(roles, times)
    g, l, s = 4, 5, 6
    assert not m[g, l]
    assert m[8, s]
    r2 = torch.tensor([C] * 6)
    t2 = torch.arange(6)
    m2 = build_structured_mask(r2, t2)
    assert not m2[2, 5] and m2[5, 2]


def test_untagged_token():
    with pytest.raises(UntaggedTokenError):
        build_structured_mask(torch.tensor([0, 7]), torch.tensor([0, 0]))
    with pytest.raises(UntaggedTokenError):
        build_structured_mask(torch.tensor([0, 0]), torch.tensor([0, -1]))


def make(seq_len_ctx=4, d=16, seed=0):
    torch.manual_seed(seed)
    bb = Backbone(BackboneConfig(d_model=d, layers=2, heads=2)).double()
    roles, times = mini_layout()
    ctx = torch.randn(1, seq_len_ctx, d, dtype=torch.float64)
    return bb, roles, times, ctx


def forward(bb, roles, times, ctx, queries):
    seq = ContextSequence(torch.cat([ctx, queries[None]], dim=1), times, roles)
    return bb(seq), bb.run(seq)


def test_zeroing_context_changes_all_outputs():
    bb, roles, times, ctx = make()
    (lat, act), _ = forward(bb, roles, times, ctx, bb.queries)
    (lat0, act0), _ = forward(bb, roles, times, torch.zeros_like(ctx), bb.queries)
    for a, b in zip(lat.stacked()[0], lat0.stacked()[0]):
        assert not torch.allclose(a, b)
    assert not torch.allclose(act, act0)


def test_zeroing_local_query_changes_only_local_and_action():
    bb, roles, times, ctx = make()
    q = bb.queries.detach().clone()
    (lat, act), _ = forward(bb, roles, times, ctx, q)
    q2 = q.clone()
    q2[1] = 0
    (lat2, act2), _ = forward(bb, roles, times, ctx, q2)
    assert torch.equal(lat.global_, lat2.global_)
    assert torch.equal(lat.spatial, lat2.spatial)
    assert torch.equal(lat.dynamic, lat2.dynamic)
    assert not torch.allclose(lat.local, lat2.local)
    assert not torch.allclose(act, act2)


def test_causality_perturbation():
    bb, roles, times, ctx = make()
    _, out = forward(bb, roles, times, ctx, bb.queries)
    ctx2 = ctx.clone()
    ctx2[:, 3] += 1.0  # a token at the last timestep
    _, out2 = forward(bb, roles, times, ctx2, bb.queries)
    assert torch.equal(out[:, :2], out2[:, :2])


def test_deterministic():
    bb, roles, times, ctx = make()
    (a, x), _ = forward(bb, roles, times, ctx, bb.queries)
    (b, y), _ = forward(bb, roles, times, ctx, bb.queries)
    assert torch.equal(a.stacked(), b.stacked()) and torch.equal(x, y)


def test_gradient_disentanglement_and_causality():
    bb, roles, times, ctx = make()
    q = bb.queries.detach().clone().requires_grad_(True)
    ctx = ctx.clone().requires_grad_(True)
    (lat, act), out = forward(bb, roles, times, ctx, q)
    # fixed random read-outs: a plain sum of a layer-normed output has zero gradient everywhere
    w = torch.randn(*out.shape[1:], dtype=torch.float64, generator=torch.Generator().manual_seed(1))
    gq = torch.autograd.grad((lat.global_ * w[0]).sum(), q, retain_graph=True)[0]
    assert gq[0].abs().sum() > 0 and torch.all(gq[1] == 0)
    ga = torch.autograd.grad((act * w[0]).sum(), q, retain_graph=True)[0]
    assert all(ga[k].abs().sum() > 0 for k in range(4))
    gc = torch.autograd.grad((out[:, :2] * w[:2]).sum(), ctx, retain_graph=True)[0]
    assert gc[:, :2].abs().sum() > 0 and torch.all(gc[:, 2:] == 0)


def test_backbone_gradcheck(gradcheck):
    bb, roles, times, ctx = make()
    w = torch.randn(5, 16, dtype=torch.float64)

    def fn(xs):
        (lat, act), _ = forward(bb, roles, times, xs[0], bb.queries)
        return (torch.cat([lat.stacked()[0], act], 0) * w).sum()

    assert gradcheck(fn, [ctx]) <= 1e-4


def test_non_finite_reported():
    bb, roles, times, ctx = make()
    ctx = ctx.clone()
    ctx[0, 0, 0] = float("nan")
    with pytest.raises(FloatingPointError):
        forward(bb, roles, times, ctx, bb.queries)


def test_width_heads_invariant():
    with pytest.raises(ValueError):
        Backbone(BackboneConfig(d_model=10, heads=3))
