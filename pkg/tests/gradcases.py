"""Finite-difference gradient cases: every numkernel op and every composed model layer.

Each builder takes a Generator and returns ``(loss_fn, tensors)``. The loss is
a fixed random projection of the op output so every output element carries a
distinct weight.
"""
import numpy as np

from cvtraffic import numkernel as nk
from cvtraffic.model import (Forecaster, GraphMeta, ModelConfig, adaptive_adjacency, diffusion_packed,
                             gated_fusion, graph_diffusion, predict_head, smooth_l1_masked_mean)
from cvtraffic.numkernel import Tensor

FD_TOL = 1e-4
N_SEEDS = 50


def _p(rng, *shape, scale=1.0):
    return Tensor(scale * rng.standard_normal(shape), requires_grad=True)


def _away_from_zero(rng, *shape, margin=0.05):
    """Values with |x| >= margin, so a kink at 0 is never inside the difference stencil."""
    x = rng.standard_normal(shape)
    return Tensor(np.sign(x) * (np.abs(x) + margin), requires_grad=True)


def _proj(fn, rng):
    """Wrap ``fn`` (returning a tensor) as a scalar loss with fixed random weights."""
    w = {}

    def loss():
        out = fn()
        if "w" not in w:
            w["w"] = rng.standard_normal(out.shape)
        return nk.reduce_sum(out * w["w"])

    return loss


def _unary(op, kink=False):
    def build(rng):
        x = _away_from_zero(rng, 3, 4) if kink else _p(rng, 3, 4, scale=2.0)
        return _proj(lambda: op(x), rng), [x]
    return build


def _binary(op, sa, sb):
    def build(rng):
        a, b = _p(rng, *sa), _p(rng, *sb)
        return _proj(lambda: op(a, b), rng), [a, b]
    return build


def _smooth_l1(rng):
    beta = 0.7
    target = rng.standard_normal((4, 5))
    e = rng.uniform(0.05, 2.0, (4, 5)) * rng.choice([-1, 1], (4, 5))
    e = np.where(np.abs(np.abs(e) - beta) < 0.05, e + 0.2 * np.sign(e), e)  # keep off the beta kink
    pred = Tensor(target + e, requires_grad=True)
    return _proj(lambda: nk.smooth_l1(pred, target, beta), rng), [pred]


def _dropout(rng):
    x = _p(rng, 5, 6)
    seed = int(rng.integers(1 << 30))
    return _proj(lambda: nk.dropout(x, 0.3, np.random.default_rng(seed)), rng), [x]


def _softmax(rng):
    x = _p(rng, 3, 5, scale=2.0)
    return _proj(lambda: nk.row_softmax(x), rng), [x]


def _concat(axis):
    def build(rng):
        a, b, c = _p(rng, 2, 3, 2), _p(rng, 2, 3, 4), _p(rng, 2, 3, 1)
        if axis == 0:
            a, b, c = _p(rng, 1, 3, 2), _p(rng, 2, 3, 2), _p(rng, 3, 3, 2)
        return _proj(lambda: nk.concat([a, b, c], axis=axis), rng), [a, b, c]
    return build


def _reshape(rng):
    x = _p(rng, 2, 3, 4)
    return _proj(lambda: nk.reshape(x, (4, 6)), rng), [x]


def _transpose(rng):
    x = _p(rng, 2, 3, 4)
    return _proj(lambda: nk.transpose(x, (2, 0, 1)), rng), [x]


def _getitem_basic(rng):
    x = _p(rng, 4, 5, 3)
    return _proj(lambda: x[1:3, ::2, -1], rng), [x]


def _getitem_fancy(rng):
    x = _p(rng, 4, 5)
    idx = np.array([0, 2, 2, 3, 0])
    return _proj(lambda: x[idx], rng), [x]


def _embedding(rng):
    table = _p(rng, 6, 3)
    codes = rng.integers(0, 6, (4, 5))
    return _proj(lambda: nk.embedding(table, codes), rng), [table]


def _reduce(kind, axis, keepdims):
    op = nk.reduce_sum if kind == "sum" else nk.reduce_mean

    def build(rng):
        x = _p(rng, 2, 3, 4)
        if axis is None:
            return (lambda: op(x) * 1.7), [x]
        return _proj(lambda: op(x, axis=axis, keepdims=keepdims), rng), [x]
    return build


def _conv(k, d):
    def build(rng):
        x, f = _p(rng, 2, 7, 3, 2), _p(rng, 4, 2, k)
        return _proj(lambda: nk.conv_time_last(x, f, d, time_axis=1), rng), [x, f]
    return build


def _causal_conv(rng):
    x, f = _p(rng, 2, 3, 6), _p(rng, 2, 3, 3)
    return _proj(lambda: nk.dilated_causal_conv(x, f, 2), rng), [x, f]


def _operators(rng):
    a, b = _p(rng, 3, 3), _p(rng, 3, 3)
    return _proj(lambda: (2.0 - a) * (a + 1.0) - (-b) @ a + 3.0 * b, rng), [a, b]


# -- model layers ------------------------------------------------------------


def _row_norm(a):
    return a / a.sum(axis=1, keepdims=True)


def _adaptive_adjacency(rng):
    e1, e2 = _p(rng, 5, 3), _p(rng, 5, 3)
    # the relu kink sits at zero products; push the logits off it
    m = e1.data @ e2.data.T
    while np.abs(m).min() < 0.02:
        e1.data[...] = rng.standard_normal(e1.shape)
        m = e1.data @ e2.data.T
    return _proj(lambda: adaptive_adjacency(e1, e2), rng), [e1, e2]


def _graph_diffusion(rng):
    n, d = 4, 3
    a_fix = _row_norm(rng.random((n, n)) + 0.1)
    e1, e2 = _p(rng, n, 2), _p(rng, n, 2)
    h = _p(rng, 2, n, d)
    ws = [(_p(rng, d, 2), _p(rng, d, 2)), (_p(rng, d, 2), None), (None, _p(rng, d, 2))]
    flat = [w for pair in ws for w in pair if w is not None]

    def fn():
        a_apt = nk.row_softmax(nk.matmul(e1, nk.transpose(e2)))
        return graph_diffusion(h, a_fix, a_apt, ws)

    return _proj(fn, rng), [h, e1, e2] + flat


def _diffusion_packed(rng):
    n, d, order = 4, 3, 2
    a_fix = _row_norm(rng.random((n, n)) + 0.1)
    e1, e2 = _p(rng, n, 2), _p(rng, n, 2)
    h = _p(rng, 2, 3, n, d)
    w = _p(rng, (1 + 2 * order) * d, 2)

    def fn():
        a_apt = nk.row_softmax(nk.matmul(e1, nk.transpose(e2)))
        return diffusion_packed(h, [a_fix, a_apt], order, w)

    return _proj(fn, rng), [h, e1, e2, w]


def _gated_fusion(rng):
    d = 3
    ts = [_p(rng, 2, 4, d), _p(rng, 2, 4, d), _p(rng, 2 * d, d), _p(rng, d), _p(rng, d, d), _p(rng, d),
          _p(rng, d, d), _p(rng, d)]
    return _proj(lambda: gated_fusion(*ts)[0], rng), ts


def _predict_head(rng):
    d, horizon = 3, 2
    h = _p(rng, 2, 4, d)
    w1, b1 = _p(rng, d, d), _p(rng, d)
    w2, b2 = _p(rng, d, horizon * 2), _p(rng, horizon * 2)
    ts = [h, w1, b1, w2, b2]

    def fn():
        return predict_head(h, w1, b1, w2, b2, horizon)

    # both relus must be away from their kinks at the drawn point
    while True:
        z = h.data @ w1.data + b1.data
        out = np.maximum(z, 0) @ w2.data + b2.data
        if np.abs(z).min() > 0.02 and np.abs(out).min() > 0.02:
            break
        for t in ts:
            t.data[...] = rng.standard_normal(t.shape)
    return _proj(fn, rng), ts


def _smooth_l1_masked(rng):
    target = rng.standard_normal((2, 3, 2, 2))
    e = rng.choice([-1, 1], target.shape) * rng.choice([rng.uniform(0.1, 0.8), rng.uniform(1.2, 3.0)], target.shape)
    pred = Tensor(target + e, requires_grad=True)
    mask = rng.random(target.shape) < 0.6
    mask.flat[0] = True
    return (lambda: smooth_l1_masked_mean(pred, target, mask, 1.0)), [pred]


# tiny forecaster: every parameter tensor is covered across the seeds

# unit head scale keeps upstream gradients far above finite-difference roundoff
TINY = ModelConfig(hidden_dim=4, embed_dims=(2, 2, 2), node_dim=2, dropout=0.0, blocks=2, dilations=(1, 2),
                   head_init_scale=1.0)


def tiny_meta(n=3, rng=None):
    rng = rng or np.random.default_rng(0)
    return GraphMeta(n, _row_norm(rng.random((n, n)) + 0.1), (3, 3, 2), horizon=2,
                     target_mean=rng.uniform(0.5, 2.0, (2, 2)))


def tiny_batch(rng, n=3, b=2, t=2, p=2):
    codes = np.stack([rng.integers(0, v, (b, t, n)) for v in (96, 7, 2, 2, 2, 2)], axis=-1)
    return {
        "x_rt": rng.standard_normal((b, t, n, 6)), "c_rt": codes,
        "x_hist": rng.standard_normal((b, t, n, 6)), "c_hist": codes.copy(),
        "road": np.stack([rng.integers(0, 3, n), rng.integers(0, 3, n), rng.integers(0, 2, n)], axis=1),
        "y": rng.uniform(0, 3, (b, n, p, 2)), "y_mask": rng.random((b, n, p)) < 0.9,
        "flags": rng.random((b, n, 2)) < 0.4,
    }


def _forecaster(variant, n_tensors):
    def build(rng):
        cfg = ModelConfig(**{**TINY.to_dict(), "variant": variant, "seed": int(rng.integers(1 << 30))})
        model = Forecaster(cfg, tiny_meta(rng=rng))
        # zero-initialised biases put relus exactly on their kink; check at a generic point instead
        for name in model.params.names():
            t = model.params[name]
            t.data[...] += 0.3 * rng.standard_normal(t.shape)
        batch = tiny_batch(rng)
        names = model.params.names()
        pick = rng.choice(len(names), size=min(n_tensors, len(names)), replace=False)
        return (lambda: model.loss(model.forward(batch), batch)), [model.params[names[i]] for i in pick]
    return build


CASES = {
    "add_broadcast": _binary(nk.add, (3, 4), (4,)),
    "sub_broadcast": _binary(nk.sub, (2, 3, 4), (3, 1)),
    "mul_broadcast": _binary(nk.mul, (2, 3, 4), (1, 4)),
    "operators": _operators,
    "sigmoid": _unary(nk.sigmoid),
    "tanh": _unary(nk.tanh),
    "relu": _unary(nk.relu, kink=True),
    "elementwise": _unary(lambda x: nk.elementwise("tanh", x) * nk.elementwise("sigmoid", x)),
    "smooth_l1": _smooth_l1,
    "dropout": _dropout,
    "matmul_2d": _binary(nk.matmul, (3, 4), (4, 2)),
    "matmul_batched": _binary(nk.matmul, (2, 3, 4), (2, 4, 5)),
    "matmul_broadcast_batch": _binary(nk.matmul, (1, 3, 4), (2, 4, 2)),
    "matmul_right_2d": _binary(nk.matmul, (2, 3, 3, 4), (4, 2)),
    "matmul_left_2d": _binary(nk.matmul, (3, 4), (2, 2, 4, 3)),
    "row_softmax": _softmax,
    "concat_last": _concat(-1),
    "concat_first": _concat(0),
    "reshape": _reshape,
    "transpose": _transpose,
    "getitem_basic": _getitem_basic,
    "getitem_fancy": _getitem_fancy,
    "embedding": _embedding,
    "reduce_sum_all": _reduce("sum", None, False),
    "reduce_sum_axis": _reduce("sum", 1, False),
    "reduce_sum_keepdims": _reduce("sum", 2, True),
    "reduce_mean_axes": _reduce("mean", (0, 2), False),
    "conv_k2_d1": _conv(2, 1),
    "conv_k3_d2": _conv(3, 2),
    "conv_k1": _conv(1, 1),
    "dilated_causal_conv": _causal_conv,
    "adaptive_adjacency": _adaptive_adjacency,
    "graph_diffusion": _graph_diffusion,
    "diffusion_packed": _diffusion_packed,
    "gated_fusion": _gated_fusion,
    "predict_head": _predict_head,
    "smooth_l1_masked_mean": _smooth_l1_masked,
    "forecaster_full": _forecaster("full", 3),
    "forecaster_only_R": _forecaster("only_R", 3),
    "forecaster_no_gate": _forecaster("no_gate", 2),
    "forecaster_no_embedding": _forecaster("no_embedding", 2),
    "forecaster_no_gcn": _forecaster("no_gcn", 2),
}


def run_case(name, seeds=range(N_SEEDS)):
    """Worst relative error of ``name`` over ``seeds``."""
    worst = 0.0
    for s in seeds:
        loss_fn, tensors = CASES[name](np.random.default_rng(1000 * s + 7))
        worst = max(worst, max(nk.finite_difference_check(loss_fn, tensors)))
    return worst
