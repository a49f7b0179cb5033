"""Gradient-check cases: every differentiable op and every composite loss.

A case builder takes a random generator and returns ``(arrays, loss_fn)``;
``loss_fn`` maps a list of Tensors (one per array) to a scalar Tensor.
``check`` compares reverse-mode gradients with central differences.
"""
from __future__ import annotations

import numpy as np

from heartpfl import akt, hda
from heartpfl import tensor as T
from heartpfl.data import generate_gaussian_mixture
from heartpfl.models import pretrain_and_freeze
from heartpfl.tensor import Tensor

from conftest import randomized, tiny_spec
from oracles import central_differences, relative_error


def check(case, rng) -> float:
    arrays, loss_fn = case(rng)
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    T.backward(loss_fn(leaves))
    analytic = [l.grad if l.grad is not None else np.zeros_like(l.data) for l in leaves]
    numeric = central_differences(lambda: loss_fn([Tensor(a) for a in arrays]).item(), arrays)
    return relative_error(analytic, numeric)


def _weighted(out: Tensor, rng) -> Tensor:
    return T.sum(T.mul(out, rng.normal(size=out.shape)))


def _simplex_logits(rng, shape):
    return rng.normal(size=shape)


def _unary(op):
    def case(rng):
        x = rng.normal(size=(3, 4))
        w = rng.normal(size=(3, 4))
        return [x], lambda ts: T.sum(T.mul(op(ts[0]), w))
    return case


def _binary(op, shape_a=(3, 4), shape_b=(3, 4)):
    def case(rng):
        a, b = rng.normal(size=shape_a), rng.normal(size=shape_b)
        w = rng.normal(size=np.broadcast_shapes(shape_a, shape_b))
        return [a, b], lambda ts: T.sum(T.mul(op(ts[0], ts[1]), w))
    return case


def _matmul(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    w = rng.normal(size=(3, 2))
    return [a, b], lambda ts: T.sum(T.mul(T.matmul(ts[0], ts[1]), w))


def _reduce(op, axis):
    def case(rng):
        x = rng.normal(size=(3, 4))
        out_shape = np.sum(x, axis=axis).shape
        w = rng.normal(size=out_shape)
        return [x], lambda ts: T.sum(T.mul(op(ts[0], axis=axis), w))
    return case


def _feature_norm(rng):
    x, s, b = rng.normal(size=(3, 5)), rng.normal(size=5), rng.normal(size=5)
    w = rng.normal(size=(3, 5))
    return [x, s, b], lambda ts: T.sum(T.mul(T.feature_norm_layer(*ts), w))


def _dropout(rng):
    x = rng.normal(size=(4, 5))
    w = rng.normal(size=(4, 5))
    seed = int(rng.integers(1 << 30))
    return [x], lambda ts: T.sum(T.mul(T.dropout(ts[0], 0.3, True, np.random.default_rng(seed)), w))


def _cross_entropy(rng):
    z = rng.normal(size=(4, 3))
    y = rng.integers(0, 3, size=4)
    return [z], lambda ts: T.cross_entropy(ts[0], y)


def _kl(rng):
    zp, zq = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    return [zp, zq], lambda ts: T.kl_divergence(T.softmax(ts[0]), T.softmax(ts[1]))


def _symmetric_kl(rng):
    zp, zq = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    return [zp, zq], lambda ts: T.symmetric_kl(T.softmax(ts[0]), T.softmax(ts[1]))


def _distill(reverse):
    def case(rng):
        teacher = T.softmax_array(rng.normal(size=(3, 4)))
        z = rng.normal(size=(3, 4))
        return [z], lambda ts: T.distill_kl(teacher, ts[0], reverse=reverse)
    return case


def _mse(rng):
    a, b = rng.normal(size=(2, 5)), rng.normal(size=(2, 5))
    return [a, b], lambda ts: T.mse(ts[0], ts[1])


def _cosine(rng):
    a, b = rng.normal(size=6), rng.normal(size=6)
    return [a, b], lambda ts: T.cosine_similarity(ts[0], ts[1])


def _cosine_rows(rng):
    a, b = rng.normal(size=(3, 6)), rng.normal(size=(3, 6))
    w = rng.normal(size=3)
    return [a, b], lambda ts: T.sum(T.mul(T.cosine_similarity(ts[0], ts[1]), w))


OP_CASES = {
    "add": _binary(T.add),
    "add_broadcast": _binary(T.add, (3, 4), (4,)),
    "mul": _binary(T.mul),
    "mul_broadcast": _binary(T.mul, (3, 4), (4,)),
    "neg": _unary(T.neg),
    "square": _unary(T.square),
    "relu": _unary(T.relu),
    "matmul": _matmul,
    "sum_all": _reduce(T.sum, None),
    "sum_axis1": _reduce(T.sum, 1),
    "mean_all": _reduce(T.mean, None),
    "mean_axis0": _reduce(T.mean, 0),
    "normalize_rows": _unary(T.normalize_rows),
    "standardize_rows": _unary(T.standardize_rows),
    "feature_norm_layer": _feature_norm,
    "dropout": _dropout,
    "log_softmax": _unary(T.log_softmax),
    "softmax": _unary(T.softmax),
    "cross_entropy": _cross_entropy,
    "kl_divergence": _kl,
    "symmetric_kl": _symmetric_kl,
    "distill_kl_forward": _distill(False),
    "distill_kl_reverse": _distill(True),
    "mse": _mse,
    "cosine_similarity": _cosine,
    "cosine_similarity_rows": _cosine_rows,
}


# ---------------------------------------------------------------- composite losses


# kept small so that every adapter coordinate can be differenced
GRAD_SPEC = tiny_spec(widths=(3, 3, 3), proto_dim=2)


def _models(rng, n_locals=2):
    spec = GRAD_SPEC
    data = generate_gaussian_mixture(3, 4, 24, 2.0, seed=int(rng.integers(1 << 30)))
    base = pretrain_and_freeze(spec, data.X, data.y, epochs=0, seed=int(rng.integers(1 << 30)))
    g = randomized(base, rng)
    locals_ = [randomized(base, rng) for _ in range(n_locals)]
    return g, locals_, data


def _adapter_case(model, loss_of_params):
    keys = list(model.adapter)
    arrays = [model.adapter[k].copy() for k in keys]
    return arrays, lambda ts: loss_of_params(dict(zip(keys, ts)))


def _alignment(early):
    def case(rng):
        f, p = rng.normal(size=5), rng.normal(size=5)
        stages = hda.StagePartition.split(2, 1)
        layer = 0 if early else 1
        return [f, p], lambda ts: hda.alignment_term(ts[0], ts[1], layer, stages)
    return case


def _objective(mode, lam_hda=1.0, lam_prox=1.0):
    def case(rng):
        g, (personal,), data = _models(rng, 1)
        cfg = hda.HdaConfig(lambda_hda=lam_hda, lambda_prox=lam_prox, prototype_mode=mode)
        X, y = data.X[:8], data.y[:8]
        protos = hda.extract_prototypes(personal, X, y) if mode == "epoch_snapshot" else None
        return _adapter_case(personal, lambda ps: hda.personalized_objective(
            X, y, personal, g, protos, cfg, ps, train=False)[0])
    return case


def _hda_loss_global(rng):
    # HDA as a function of the global adapter (prototypes fixed)
    g, (personal,), data = _models(rng, 1)
    X, y = data.X[:8], data.y[:8]
    protos = hda.extract_prototypes(personal, X, y)
    stages = hda.StagePartition.split(3)

    def loss(ps):
        feats = hda.forward_with_features(g, X, params=ps).features
        rows, targets = hda._lookup(protos, y)
        return hda._hda_from_features(feats, [Tensor(t) for t in targets], rows, len(y), stages)

    return _adapter_case(g, loss)


def _proximal(rng):
    g, (personal,), _ = _models(rng, 1)
    return _adapter_case(personal, lambda ps: hda.proximal_term(ps, g.adapter))


def _server(loss_name):
    def case(rng):
        g, locals_, data = _models(rng, 2)
        X = data.X[:6]
        fn = akt.ekt_loss if loss_name == "ekt" else akt.symmetric_kl_loss
        return _adapter_case(g, lambda ps: fn(g, locals_, X, ps))
    return case


def _akt_views(rng):
    g, locals_, data = _models(rng, 2)
    X, y = data.X[:6], data.y[:6]
    cfg = akt.AktConfig(pgd=akt.PgdConfig(epsilon=0.2, steps=2))
    views = akt.build_proxy_views(X, y, locals_, g, cfg, rng)
    teachers = [akt.ensemble_probs(locals_, v) for v in views]

    def loss(ps):
        terms = [akt.symmetric_kl_loss(g, locals_, v, ps, t) for v, t in zip(views, teachers)]
        total = terms[0]
        for t in terms[1:]:
            total = total + t
        return total * (1.0 / len(terms))

    return _adapter_case(g, loss)


def _pgd_input(rng):
    g, _, data = _models(rng, 0)
    X, y = data.X[:5].copy(), data.y[:5]
    return [X], lambda ts: T.cross_entropy(hda.forward_with_features(g, ts[0]).logits, y)


LOSS_CASES = {
    "alignment_early": _alignment(True),
    "alignment_deep": _alignment(False),
    "hda_loss_global_adapter": _hda_loss_global,
    "objective_epoch_snapshot": _objective("epoch_snapshot"),
    "objective_per_batch": _objective("per_batch"),
    "proximal_term": _proximal,
    "ekt_loss": _server("ekt"),
    "symmetric_kl_loss": _server("skl"),
    "akt_loss_all_views": _akt_views,
    "pgd_input_gradient": _pgd_input,
}
