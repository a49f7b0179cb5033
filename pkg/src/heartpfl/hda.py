"""Hierarchical directional alignment on the client.

Class prototypes are taken layer by layer from the personalized model;
the global model's features on the same samples are pulled towards them
with ``1 - cos`` on early layers and MSE on deep layers.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import tensor as T
from .models import Model, forward_with_features
from .tensor import Tensor

PROTOTYPE_MODES = ("epoch_snapshot", "per_batch")


@dataclass(frozen=True)
class StagePartition:
    """Tap layers (0-based) aligned by direction (early) or by value (deep)."""

    early: frozenset[int]
    deep: frozenset[int]

    def __post_init__(self):
        if self.early & self.deep:
            raise ValueError("early and deep layer sets overlap")

    @classmethod
    def split(cls, num_layers: int, num_early: int | None = None) -> StagePartition:
        if num_early is None:
            num_early = math.ceil(num_layers / 2)
        if not 0 <= num_early <= num_layers:
            raise ValueError(f"num_early must lie in [0, {num_layers}]")
        return cls(frozenset(range(num_early)), frozenset(range(num_early, num_layers)))

    @property
    def num_layers(self) -> int:
        return len(self.early) + len(self.deep)


@dataclass
class HdaConfig:
    lambda_hda: float = 1.0
    lambda_prox: float = 1.0
    # None -> first ceil(L/2) tap layers are early
    num_early: int | None = None
    prototype_mode: str = "epoch_snapshot"

    def __post_init__(self):
        if self.lambda_hda < 0 or self.lambda_prox < 0:
            raise ValueError("HDA loss weights must be non-negative")
        if self.prototype_mode not in PROTOTYPE_MODES:
            raise ValueError(f"prototype_mode must be one of {PROTOTYPE_MODES}")

    def stages(self, num_layers: int) -> StagePartition:
        return StagePartition.split(num_layers, self.num_early)


@dataclass
class PrototypeSet:
    """(layer, class) -> mean pooled feature, with the per-class sample counts."""

    vectors: dict[tuple[int, int], np.ndarray]
    counts: dict[int, int]
    num_layers: int
    dim: int

    def classes(self) -> list[int]:
        return sorted(self.counts)

    def get(self, layer: int, cls: int) -> np.ndarray | None:
        return self.vectors.get((layer, cls))

    def to_dict(self) -> dict:
        return {
            "num_layers": self.num_layers,
            "dim": self.dim,
            "counts": {str(c): n for c, n in sorted(self.counts.items())},
            "prototypes": {f"{l}:{c}": v.tolist() for (l, c), v in sorted(self.vectors.items())},
        }


@dataclass
class UpdateStats:
    losses: list[float] = field(default_factory=list)
    skipped: int = 0
    steps: int = 0


# ---------------------------------------------------------------- prototypes


def extract_prototypes(model: Model, X: np.ndarray, y: np.ndarray) -> PrototypeSet:
    bundle = forward_with_features(model, X, train=False)
    classes, inverse, counts = np.unique(y, return_inverse=True, return_counts=True)
    vectors = {}
    for layer, feat in enumerate(bundle.features):
        sums = np.zeros((classes.size, feat.shape[1]))
        np.add.at(sums, inverse, feat.data)
        means = sums / counts[:, None]
        for j, c in enumerate(classes):
            vectors[(layer, int(c))] = means[j]
    return PrototypeSet(vectors, {int(c): int(n) for c, n in zip(classes, counts)},
                        bundle.num_layers, model.spec.proto_dim)


def _batch_prototypes(features: list[Tensor], y: np.ndarray) -> list[Tensor]:
    """Differentiable class means inside a batch, gathered back to one row per sample."""
    classes, inverse, counts = np.unique(y, return_inverse=True, return_counts=True)
    averaging = np.zeros((classes.size, y.size))
    averaging[inverse, np.arange(y.size)] = 1.0 / counts[inverse]
    gather = np.zeros((y.size, classes.size))
    gather[np.arange(y.size), inverse] = 1.0
    route = Tensor(gather @ averaging)
    return [T.matmul(route, f) for f in features]


# ---------------------------------------------------------------- alignment


def alignment_term(f_global, prototype, layer: int, stages: StagePartition) -> Tensor:
    if layer in stages.early:
        return 1.0 - T.cosine_similarity(f_global, prototype)
    if layer in stages.deep:
        return T.mse(f_global, prototype)
    raise ValueError(f"layer {layer} is in neither stage")


def _alignment_rows(f: Tensor, p, layer: int, stages: StagePartition) -> Tensor:
    """Per-row alignment values for a (rows, d) block, summed over rows."""
    if layer in stages.early:
        return T.sum(1.0 - T.cosine_similarity(f, p))
    if layer in stages.deep:
        return T.sum(T.mean(T.square(f - p), axis=1))
    raise ValueError(f"layer {layer} is in neither stage")


def _hda_from_features(global_feats: list[Tensor], targets: list, rows: np.ndarray,
                       batch_size: int, stages: StagePartition) -> Tensor:
    if rows.size == 0:
        return Tensor(0.0)
    total = None
    for layer, (f, p) in enumerate(zip(global_feats, targets)):
        f_rows = T.matmul(Tensor(np.eye(f.shape[0])[rows]), f) if rows.size != f.shape[0] else f
        term = _alignment_rows(f_rows, p, layer, stages)
        total = term if total is None else total + term
    return total * (1.0 / (len(global_feats) * batch_size))


def _lookup(prototypes: PrototypeSet, y: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    rows = np.array([i for i, c in enumerate(y) if int(c) in prototypes.counts], dtype=np.int64)
    targets = [np.array([prototypes.vectors[(l, int(y[i]))] for i in rows]).reshape(rows.size, prototypes.dim)
               for l in range(prototypes.num_layers)]
    return rows, targets


def hda_loss(global_model: Model, prototypes: PrototypeSet, X: np.ndarray, y: np.ndarray,
             stages: StagePartition) -> tuple[Tensor, int]:
    """Batch-mean of layer-averaged alignment between global features and prototypes.

    Samples whose class has no prototype contribute zero; their number is
    returned alongside the loss.
    """
    y = np.asarray(y)
    if stages.num_layers != prototypes.num_layers:
        raise ValueError("stage partition and prototype set disagree on the number of layers")
    rows, targets = _lookup(prototypes, y)
    if rows.size == 0:
        return Tensor(0.0), int(y.size)
    feats = forward_with_features(global_model, X, train=False).features
    return _hda_from_features(feats, [Tensor(t) for t in targets], rows, y.size, stages), int(y.size - rows.size)


def proximal_term(params: Mapping[str, Tensor], anchor: Mapping[str, np.ndarray]) -> Tensor:
    """0.5 * squared l2 distance between adapter tensors and a fixed adapter."""
    total = None
    for k, p in params.items():
        term = T.sum(T.square(p - Tensor(anchor[k])))
        total = term if total is None else total + term
    return 0.5 * total


def personalized_objective(X: np.ndarray, y: np.ndarray, personal: Model, global_model: Model,
                           prototypes: PrototypeSet | None, cfg: HdaConfig,
                           params: Mapping[str, Tensor], rng: np.random.Generator | None = None,
                           train: bool = True) -> tuple[Tensor, int]:
    """Cross-entropy + lambda_prox * proximal + lambda_hda * HDA for one batch.

    Gradients reach only ``params`` (the personalized adapter).  In
    ``epoch_snapshot`` mode the prototypes are constants, so the HDA term
    is a value without gradient; in ``per_batch`` mode prototypes are the
    batch class means of the personalized features and carry gradient.
    """
    out = forward_with_features(personal, X, train=train, rng=rng, params=params)
    loss = T.cross_entropy(out.logits, y)
    skipped = 0
    if cfg.lambda_prox:
        loss = loss + cfg.lambda_prox * proximal_term(params, global_model.adapter)
    if cfg.lambda_hda:
        stages = cfg.stages(out.num_layers)
        if cfg.prototype_mode == "per_batch":
            feats = forward_with_features(global_model, X, train=False).features
            targets = _batch_prototypes(out.features, y)
            hda = _hda_from_features(feats, targets, np.arange(len(y)), len(y), stages)
        else:
            if prototypes is None:
                raise ValueError("epoch_snapshot mode needs a prototype set")
            hda, skipped = hda_loss(global_model, prototypes, X, y, stages)
        loss = loss + cfg.lambda_hda * hda
    return loss, skipped


def client_personalized_update(personal: Model, global_model: Model, X: np.ndarray, y: np.ndarray,
                               epochs: int, cfg: HdaConfig, lr: float, batch_size: int,
                               rng: np.random.Generator) -> tuple[dict[str, np.ndarray], UpdateStats]:
    """Minibatch SGD on ``personalized_objective``; returns the new adapter."""
    adapter = {k: v.copy() for k, v in personal.adapter.items()}
    opt = T.SGD(lr)
    stats = UpdateStats()
    for _ in range(epochs):
        current = personal.with_adapter(adapter)
        prototypes = None
        if cfg.lambda_hda and cfg.prototype_mode == "epoch_snapshot":
            prototypes = extract_prototypes(current, X, y)
        order = rng.permutation(len(y))
        for start in range(0, len(y), batch_size):
            idx = order[start:start + batch_size]
            params = T.parameters(adapter)
            loss, skipped = personalized_objective(X[idx], y[idx], current, global_model, prototypes,
                                                   cfg, params, rng)
            opt.step(adapter, T.grad(loss, params))
            stats.losses.append(loss.item())
            stats.skipped += skipped
            stats.steps += 1
    return adapter, stats
