"""Small float64 tensor engine with reverse-mode autodiff.

Each differentiable op builds a result ``Tensor`` that remembers its
parents and a closure mapping the upstream gradient to per-parent
gradients.  ``backward`` walks that graph once in reverse topological
order.  Everything the federated protocol needs (MLP forward pass,
cross-entropy, KL distillation, cosine/MSE alignment, PGD input
gradients) is expressed with the ops in this module.
"""
from __future__ import annotations

from typing import Callable, Mapping, Sequence

import numpy as np

KL_EPS = 1e-12
NORM_EPS = 1e-5
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


class ShapeError(ValueError):
    """Input shapes do not conform to an op's signature."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {', '.join(str(s) for s in shapes)}")


class NumericFault(ArithmeticError):
    """A forward op produced NaN or Inf."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(as_tensor(other), self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(op: str, data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    # a sum is finite only if every element is (overflow also counts as a fault)
    if not np.isfinite(np.add.reduce(data, axis=None)):
        raise NumericFault(f"{op}: non-finite values in result")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    if any([p.requires_grad for p in parents]):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _binary(op: str, fn, a: Tensor, b: Tensor) -> np.ndarray:
    try:
        return fn(a.data, b.data)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _binary("add", np.add, a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result("add", out, (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result("neg", -a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _binary("mul", np.multiply, a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result("mul", out, (a, b), backward)


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0)
    return _result("relu", out, (a,), lambda g: (g * (out > 0),))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _result("square", a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


# ---------------------------------------------------------------- reductions


def sum(a, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result("sum", np.sum(a.data, axis=axis), (a,), backward)


def mean(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _result("mean", np.mean(a.data, axis=axis), (a,), backward)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _result("matmul", a.data @ b.data, (a, b), backward)


def normalize_rows(a) -> Tensor:
    """Scale each row (or a single vector) to unit l2 norm; zero rows stay zero."""
    a = as_tensor(a)
    x = np.atleast_2d(a.data)
    norms = np.sqrt(np.sum(x * x, axis=1, keepdims=True))
    nonzero = norms > 0
    safe = np.where(nonzero, norms, 1.0)
    u = np.where(nonzero, x / safe, 0.0)

    def backward(g):
        g2 = np.atleast_2d(g)
        dot = np.sum(g2 * u, axis=1, keepdims=True)
        gx = np.where(nonzero, (g2 - u * dot) / safe, 0.0)
        return (gx.reshape(a.shape),)

    return _result("normalize_rows", u.reshape(a.shape), (a,), backward)


def standardize_rows(a, eps: float = NORM_EPS) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError("standardize_rows", a.shape)
    mu = a.data.mean(axis=1, keepdims=True)
    xc = a.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps)
    xhat = xc * inv

    def backward(g):
        gm = g.mean(axis=1, keepdims=True)
        gxm = (g * xhat).mean(axis=1, keepdims=True)
        return (inv * (g - gm - xhat * gxm),)

    return _result("standardize_rows", xhat, (a,), backward)


def feature_norm_layer(x, scale, shift, eps: float = NORM_EPS) -> Tensor:
    """Per-sample feature normalization followed by a learned affine map."""
    x, scale, shift = as_tensor(x), as_tensor(scale), as_tensor(shift)
    if x.ndim != 2 or scale.shape != (x.shape[1],) or shift.shape != (x.shape[1],):
        raise ShapeError("feature_norm_layer", x.shape, scale.shape, shift.shape)
    return add(mul(standardize_rows(x, eps), scale), shift)


def dropout(x, p: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    x = as_tensor(x)
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout: rate must lie in [0, 1), got {p}")
    if not train or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout: a random generator is required in training mode")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return _result("dropout", x.data * mask, (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------- softmax family


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_array(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(a) -> Tensor:
    a = as_tensor(a)
    out = _log_softmax(a.data)
    s = np.exp(out)

    def backward(g):
        return (g - s * g.sum(axis=-1, keepdims=True),)

    return _result("log_softmax", out, (a,), backward)


def softmax(a) -> Tensor:
    a = as_tensor(a)
    s = softmax_array(a.data)

    def backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _result("softmax", s, (a,), backward)


# ---------------------------------------------------------------- losses


def _check_labels(labels, batch: int, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != batch:
        raise ShapeError("cross_entropy", (batch, num_classes), labels.shape)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"cross_entropy: labels must lie in [0, {num_classes})")
    return labels


def cross_entropy(logits, labels) -> Tensor:
    """Batch-mean negative log-likelihood of integer ``labels``."""
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError("cross_entropy", logits.shape)
    b, v = logits.shape
    labels = _check_labels(labels, b, v)
    logp = _log_softmax(logits.data)
    rows = np.arange(b)
    value = -logp[rows, labels].mean()

    def backward(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0
        return (grad * (g / b),)

    return _result("cross_entropy", np.asarray(value), (logits,), backward)


def _check_simplex(op: str, p: np.ndarray) -> None:
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=-1) - 1.0) > 1e-6):
        raise ValueError(f"{op}: rows must be probability vectors summing to 1")


def _floored_log(p: np.ndarray, eps: float) -> np.ndarray:
    return np.log(np.maximum(p, eps))


def kl_divergence(p, q, eps: float = KL_EPS) -> Tensor:
    """Row-mean KL(p || q) with ``log`` floored at ``eps`` on both arguments.

    A vector input is treated as a single row.
    """
    p, q = as_tensor(p), as_tensor(q)
    if p.shape != q.shape:
        raise ShapeError("kl_divergence", p.shape, q.shape)
    _check_simplex("kl_divergence", p.data)
    _check_simplex("kl_divergence", q.data)
    lp, lq = _floored_log(p.data, eps), _floored_log(q.data, eps)
    rows = 1 if p.ndim == 1 else p.shape[0]
    value = np.sum(p.data * (lp - lq)) / rows

    def backward(g):
        gp = (lp - lq + (p.data > eps)) * (g / rows)
        gq = -np.where(q.data > eps, p.data / np.maximum(q.data, eps), 0.0) * (g / rows)
        return gp, gq

    return _result("kl_divergence", np.asarray(value), (p, q), backward)


def symmetric_kl(p, q, eps: float = KL_EPS) -> Tensor:
    return add(kl_divergence(p, q, eps), kl_divergence(q, p, eps))


def distill_kl(teacher: np.ndarray, student_logits, reverse: bool = False,
               eps: float = KL_EPS, reduction: str = "mean") -> Tensor:
    """KL between fixed teacher probabilities and ``softmax(student_logits)``.

    ``reverse=False`` gives KL(teacher || student), ``reverse=True`` gives
    KL(student || teacher).  Both use the same floored logs as
    ``kl_divergence`` so the two directions add up to ``symmetric_kl``
    exactly.  The logit gradients are written in closed form and vanish
    exactly when student and teacher probabilities coincide.
    """
    z = as_tensor(student_logits)
    teacher = np.asarray(teacher, dtype=np.float64)
    if z.ndim != 2 or teacher.shape != z.shape:
        raise ShapeError("distill_kl", teacher.shape, z.shape)
    _check_simplex("distill_kl", teacher)
    s = softmax_array(z.data)
    lt, ls = _floored_log(teacher, eps), _floored_log(s, eps)
    scale = z.shape[0] if reduction == "mean" else 1
    if reverse:
        value = np.sum(s * (ls - lt)) / scale
    else:
        value = np.sum(teacher * (lt - ls)) / scale

    def backward(g):
        if reverse:
            d = ls - lt
            grad = s * (d - np.sum(s * d, axis=1, keepdims=True))
        else:
            grad = s - teacher
        return (grad * (g / scale),)

    return _result("distill_kl", np.asarray(value), (z,), backward)


def mse(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("mse", a.shape, b.shape)
    return mean(square(a - b))


def cosine_similarity(a, b) -> Tensor:
    """Cosine along the last axis: a scalar for vectors, one value per row for matrices.

    A zero vector has cosine 0 with anything.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape or a.ndim not in (1, 2):
        raise ShapeError("cosine_similarity", a.shape, b.shape)
    prod = mul(normalize_rows(a), normalize_rows(b))
    return sum(prod, axis=a.ndim - 1)


# ---------------------------------------------------------------- autodiff


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1 or loss.ndim > 1:
        raise ShapeError("backward", loss.shape)
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def grad(loss: Tensor, params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Gradients of ``loss`` for each named leaf; zeros for leaves it does not touch."""
    for p in params.values():
        p.grad = None
    backward(loss)
    return {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}


def parameters(arrays: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}


# ---------------------------------------------------------------- optimizers


class SGD:
    """Plain gradient descent with a per-call multiplicative rate decay."""

    kind = "sgd"

    def __init__(self, lr: float, decay: float = 1.0):
        if lr < 0:
            raise ValueError("learning rate must be non-negative")
        self.lr = lr
        self.decay = decay
        self.steps = 0

    def step(self, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
        _require_grads(params, grads)
        for k in params:
            params[k] = params[k] - self.lr * grads[k]
        self.steps += 1
        return params

    def end_round(self) -> None:
        self.lr *= self.decay


class Adam:
    kind = "adam"

    def __init__(self, lr: float, betas: tuple[float, float] = ADAM_BETAS, eps: float = ADAM_EPS):
        if lr < 0:
            raise ValueError("learning rate must be non-negative")
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.steps = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
        _require_grads(params, grads)
        b1, b2 = self.betas
        self.steps += 1
        c1 = 1.0 - b1 ** self.steps
        c2 = 1.0 - b2 ** self.steps
        for k in params:
            g = grads[k]
            m = b1 * self.m.get(k, 0.0) + (1.0 - b1) * g
            v = b2 * self.v.get(k, 0.0) + (1.0 - b2) * g * g
            self.m[k], self.v[k] = m, v
            params[k] = params[k] - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return params


def _require_grads(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
    missing = [k for k in params if k not in grads]
    if missing:
        raise KeyError(f"optimizer step: missing gradients for {missing}")
    for k in params:
        if grads[k].shape != params[k].shape:
            raise ShapeError("optimizer_step", params[k].shape, grads[k].shape)

