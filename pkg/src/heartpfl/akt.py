"""Server-side adversarial knowledge transfer into the global adapter."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .models import Model, forward_with_features
from .tensor import Tensor

LogitFn = Callable[[Tensor], Tensor]


@dataclass
class PgdConfig:
    epsilon: float = 0.1
    # None -> epsilon / 4
    step_size: float | None = None
    steps: int = 5
    random_init: bool = True
    allow_large_step: bool = False

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if self.steps < 1:
            raise ValueError("PGD needs at least one step")
        if self.step_size is not None:
            if self.step_size <= 0:
                raise ValueError("step_size must be positive")
            if self.epsilon > 0 and self.step_size > self.epsilon and not self.allow_large_step:
                raise ValueError("step_size exceeds epsilon (set allow_large_step to override)")

    @property
    def alpha(self) -> float:
        return self.epsilon / 4 if self.step_size is None else self.step_size


@dataclass
class AktConfig:
    use_clean: bool = True
    use_adversarial: bool = True
    use_symmetric_kl: bool = True
    epochs: int = 5
    batch_size: int = 2048
    lr: float = 1e-3
    reduction: str = "mean"
    pgd: PgdConfig = field(default_factory=PgdConfig)

    def __post_init__(self):
        if not (self.use_clean or self.use_adversarial):
            raise ValueError("AKT needs clean or adversarial views (or both)")
        if self.reduction not in ("mean", "sum"):
            raise ValueError("reduction must be 'mean' or 'sum'")
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("invalid AKT epochs / batch_size / lr")


def _logit_fn(model: Model | LogitFn) -> LogitFn:
    if isinstance(model, Model):
        return lambda x: forward_with_features(model, x, train=False).logits
    return model


def ensemble_probs(models: Sequence[Model], X: np.ndarray) -> np.ndarray:
    """Mean of the models' softmax outputs."""
    if not models:
        raise ValueError("ensemble needs at least one model")
    probs = [T.softmax_array(forward_with_features(m, X, train=False).logits.data) for m in models]
    if len({p.shape for p in probs}) != 1:
        raise T.ShapeError("ensemble_probs", *[p.shape for p in probs])
    total = probs[0].copy()
    for p in probs[1:]:
        total += p
    return total / len(probs)


def _student_logits(global_model: Model, X: np.ndarray, params=None) -> Tensor:
    return forward_with_features(global_model, X, train=False, params=params).logits


def ekt_loss(global_model: Model, locals_: Sequence[Model], X: np.ndarray, params=None,
             teacher: np.ndarray | None = None, reduction: str = "mean") -> Tensor:
    """KL(ensemble || global) on a proxy batch."""
    teacher = ensemble_probs(locals_, X) if teacher is None else teacher
    return T.distill_kl(teacher, _student_logits(global_model, X, params), reduction=reduction)


def symmetric_kl_loss(global_model: Model, locals_: Sequence[Model], X: np.ndarray, params=None,
                      teacher: np.ndarray | None = None, reduction: str = "mean") -> Tensor:
    """KL(ensemble || global) + KL(global || ensemble) on a proxy batch."""
    teacher = ensemble_probs(locals_, X) if teacher is None else teacher
    z = _student_logits(global_model, X, params)
    return T.distill_kl(teacher, z, reduction=reduction) + T.distill_kl(teacher, z, reverse=True, reduction=reduction)


def _project(x: np.ndarray, center: np.ndarray, eps: float) -> np.ndarray:
    """Clip into the eps-ball so that ``abs(x - center) <= eps`` holds as computed."""
    x = np.clip(x, center - eps, center + eps)
    # center +- eps can round outward; step such entries back one ulp at a time
    bad = np.abs(x - center) > eps
    while bad.any():
        x[bad] = np.nextafter(x[bad], center[bad])
        bad = np.abs(x - center) > eps
    return x


def pgd_generate(X: np.ndarray, y: np.ndarray, model: Model | LogitFn, cfg: PgdConfig,
                 rng: np.random.Generator) -> np.ndarray:
    """l-infinity PGD ascent on cross-entropy, starting from a uniform random offset."""
    f = _logit_fn(model)
    X = np.asarray(X, dtype=np.float64)
    eps = cfg.epsilon
    x = _project(X + rng.uniform(-eps, eps, X.shape), X, eps) if cfg.random_init else X.copy()
    for _ in range(cfg.steps):
        xt = Tensor(x, requires_grad=True)
        T.backward(T.cross_entropy(f(xt), y))
        g = xt.grad if xt.grad is not None else np.zeros_like(x)
        if not np.all(np.isfinite(g)):
            raise T.NumericFault("pgd_generate: non-finite input gradient")
        x = _project(x + cfg.alpha * np.sign(g), X, eps)
    return x


def proxy_labels(proxy_y: np.ndarray, in_domain: bool, global_model: Model, X: np.ndarray) -> np.ndarray:
    """True labels for in-domain proxies, global-model pseudo-labels otherwise."""
    if in_domain:
        return np.asarray(proxy_y)
    return np.argmax(_student_logits(global_model, X).data, axis=1)


def build_proxy_views(X: np.ndarray, y: np.ndarray, locals_: Sequence[Model], global_model: Model,
                      cfg: AktConfig, rng: np.random.Generator) -> list[np.ndarray]:
    """Clean view, then PGD views against each local model (in order) and the global model."""
    views = [X] if cfg.use_clean else []
    if cfg.use_adversarial:
        for m in [*locals_, global_model]:
            views.append(pgd_generate(X, y, m, cfg.pgd, rng))
    return views


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def akt_update(global_model: Model, locals_: Sequence[Model], X: np.ndarray, y: np.ndarray,
               in_domain: bool, cfg: AktConfig, rng: np.random.Generator) -> tuple[dict[str, np.ndarray], list[float]]:
    """Distill the local ensemble into the global adapter over clean/adversarial proxy views.

    Views are generated once against the post-averaging global model.  Each
    step averages one (symmetric or one-way) KL term per view and takes an
    Adam step on the global adapter.
    """
    labels = proxy_labels(y, in_domain, global_model, X)
    views = build_proxy_views(X, labels, locals_, global_model, cfg, rng)
    teachers = [ensemble_probs(locals_, v) for v in views]
    loss_fn = symmetric_kl_loss if cfg.use_symmetric_kl else ekt_loss
    adapter = {k: v.copy() for k, v in global_model.adapter.items()}
    opt = T.Adam(cfg.lr)
    trace = []
    for _ in range(cfg.epochs):
        for idx in _batches(len(X), cfg.batch_size, rng):
            params = T.parameters(adapter)
            terms = [loss_fn(global_model, locals_, v[idx], params, t[idx], cfg.reduction)
                     for v, t in zip(views, teachers)]
            loss = terms[0]
            for term in terms[1:]:
                loss = loss + term
            loss = loss * (1.0 / len(terms))
            opt.step(adapter, T.grad(loss, params))
            trace.append(loss.item())
    return adapter, trace


def ekt_update(global_model: Model, locals_: Sequence[Model], X: np.ndarray, cfg: AktConfig,
               rng: np.random.Generator) -> tuple[dict[str, np.ndarray], list[float]]:
    """One-way ensemble distillation on clean proxy data (the plain EKT baseline)."""
    teacher = ensemble_probs(locals_, X)
    adapter = {k: v.copy() for k, v in global_model.adapter.items()}
    opt = T.Adam(cfg.lr)
    trace = []
    for _ in range(cfg.epochs):
        for idx in _batches(len(X), cfg.batch_size, rng):
            params = T.parameters(adapter)
            loss = ekt_loss(global_model, locals_, X[idx], params, teacher[idx], cfg.reduction)
            opt.step(adapter, T.grad(loss, params))
            trace.append(loss.item())
    return adapter, trace
