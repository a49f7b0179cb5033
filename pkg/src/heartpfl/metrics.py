"""Accuracy, representation diagnostics and the two-direction loss-landscape probe."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from . import tensor as T
from .hda import PrototypeSet
from .models import Model, flatten, forward_with_features, predict, unflatten


@dataclass
class LandscapeGrid:
    direction1: np.ndarray
    direction2: np.ndarray
    offsets: np.ndarray
    losses: np.ndarray  # losses[i, j] at (offsets[i], offsets[j])

    def rows(self):
        for i, a in enumerate(self.offsets):
            for j, b in enumerate(self.offsets):
                yield float(a), float(b), float(self.losses[i, j])

    @property
    def center(self) -> float:
        c = len(self.offsets) // 2
        return float(self.losses[c, c])


def accuracy(model: Model, X: np.ndarray, y: np.ndarray) -> float:
    if len(y) == 0:
        raise ValueError("accuracy needs at least one sample")
    return float(np.mean(predict(model, X) == np.asarray(y)))


def mean_loss(model: Model, X: np.ndarray, y: np.ndarray) -> float:
    return T.cross_entropy(forward_with_features(model, X).logits, y).item()


def representation_alignment(global_model: Model, prototypes: PrototypeSet, X: np.ndarray,
                             y: np.ndarray) -> tuple[float, list[float]]:
    """Mean cosine between global features and the matching class prototype.

    Returns the average over (sample, layer) and the per-layer averages.
    Samples whose class has no prototype are skipped; NaN if none remain.
    """
    keep = np.array([int(c) in prototypes.counts for c in y], dtype=bool)
    if not keep.any():
        return float("nan"), [float("nan")] * prototypes.num_layers
    feats = forward_with_features(global_model, X[keep]).features
    ys = np.asarray(y)[keep]
    per_layer = []
    for layer, f in enumerate(feats):
        protos = np.array([prototypes.vectors[(layer, int(c))] for c in ys])
        per_layer.append(float(np.mean(T.cosine_similarity(f.data, protos).data)))
    return float(np.mean(per_layer)), per_layer


def feature_norm_variance(model: Model, X: np.ndarray) -> float:
    """Population standard deviation of per-sample l2 norms at the last tap layer."""
    if len(X) == 0:
        raise ValueError("probe data is empty")
    last = forward_with_features(model, X).features[-1].data
    return float(np.std(np.linalg.norm(last, axis=1)))


def grid_offsets(half_width: float, resolution: int) -> np.ndarray:
    if resolution < 3 or resolution % 2 == 0:
        raise ValueError("resolution must be odd and >= 3")
    half = resolution // 2
    return half_width * (np.arange(resolution) - half) / half


def landscape(params: Mapping[str, np.ndarray], loss_fn: Callable[[dict[str, np.ndarray]], float],
              half_width: float = 1.0, resolution: int = 21, seed: int = 0) -> LandscapeGrid:
    """Evaluate ``loss_fn`` at params + a*d1 + b*d2 for two random unit directions.

    ``params`` is never modified; every grid point gets fresh arrays.
    """
    offsets = grid_offsets(half_width, resolution)
    base = flatten(params)
    rng = np.random.default_rng([seed, 0x1A])
    d1 = rng.normal(size=base.size)
    d2 = rng.normal(size=base.size)
    d1 /= np.linalg.norm(d1)
    d2 /= np.linalg.norm(d2)
    losses = np.empty((resolution, resolution))
    for i, a in enumerate(offsets):
        for j, b in enumerate(offsets):
            losses[i, j] = loss_fn(unflatten(base + a * d1 + b * d2, params))
    return LandscapeGrid(d1, d2, offsets, losses)


def loss_landscape(model: Model, X: np.ndarray, y: np.ndarray, half_width: float = 1.0,
                   resolution: int = 21, seed: int = 0) -> LandscapeGrid:
    """Mean cross-entropy around ``model``'s adapter."""
    return landscape(model.adapter, lambda a: mean_loss(model.with_adapter(a), X, y),
                     half_width, resolution, seed)


def client_average_landscape(model: Model, splits, half_width: float = 1.0, resolution: int = 21,
                             seed: int = 0) -> LandscapeGrid:
    """Like ``loss_landscape`` but the loss is the unweighted mean over (X, y) client splits."""
    splits = [(X, y) for X, y in splits if len(y)]
    if not splits:
        raise ValueError("no non-empty client split")

    def loss_fn(a):
        m = model.with_adapter(a)
        return float(np.mean([mean_loss(m, X, y) for X, y in splits]))

    return landscape(model.adapter, loss_fn, half_width, resolution, seed)


def write_landscape_csv(path: Path | str, grid: LandscapeGrid, header: Mapping[str, object] | None = None) -> None:
    with open(path, "w", newline="") as fh:
        for k, v in (header or {}).items():
            fh.write(f"# {k}: {v}\n")
        w = csv.writer(fh)
        w.writerow(["a", "b", "loss"])
        for a, b, loss in grid.rows():
            w.writerow([repr(a), repr(b), repr(loss)])
