"""Frozen MLP backbone with per-stage residual adapters and feature taps.

Each stage is ``depth_per_stage`` frozen ``relu(h @ W + b)`` layers followed
by a trainable adapter block::

    h <- h + dropout(norm(h) * scale + shift) @ A + c

The stage output is tapped, mean-pooled to ``proto_dim`` and returned as
that layer's feature.  The classifier head is part of the trainable
adapter.
"""
from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from . import tensor as T
from .tensor import Tensor

CHECKPOINT_VERSION = 1


class Role(str, enum.Enum):
    GLOBAL = "global"
    PERSONALIZED = "personalized"
    LOCAL = "local"


@dataclass(frozen=True)
class BackboneSpec:
    input_dim: int
    num_classes: int
    widths: tuple[int, ...] = (64, 64, 64, 64)
    depth_per_stage: int = 2
    proto_dim: int = 32
    dropout: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 2:
            raise ValueError("backbone needs at least two stages (one early, one deep tap)")
        if min(self.widths) <= 0 or self.input_dim <= 0 or self.num_classes <= 0:
            raise ValueError("input_dim, num_classes and widths must be positive")
        if self.depth_per_stage < 1 or self.proto_dim < 1:
            raise ValueError("depth_per_stage and proto_dim must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    @property
    def num_layers(self) -> int:
        return len(self.widths)

    def layer_shapes(self) -> list[tuple[int, int]]:
        """(fan_in, fan_out) of every frozen linear layer, in forward order."""
        shapes, fan_in = [], self.input_dim
        for w in self.widths:
            for _ in range(self.depth_per_stage):
                shapes.append((fan_in, w))
                fan_in = w
        return shapes


@dataclass(frozen=True)
class Backbone:
    spec: BackboneSpec
    weights: tuple[tuple[np.ndarray, np.ndarray], ...]

    def checksum(self) -> str:
        h = hashlib.sha256()
        for w, b in self.weights:
            h.update(w.tobytes())
            h.update(b.tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class Model:
    backbone: Backbone
    adapter: dict[str, np.ndarray]
    role: Role = Role.GLOBAL

    @property
    def spec(self) -> BackboneSpec:
        return self.backbone.spec

    def with_adapter(self, adapter: Mapping[str, np.ndarray], role: Role | None = None) -> Model:
        return Model(self.backbone, dict(adapter), self.role if role is None else role)


@dataclass
class FeatureBundle:
    features: list[Tensor]
    logits: Tensor

    @property
    def num_layers(self) -> int:
        return len(self.features)


# ---------------------------------------------------------------- construction


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.flags.writeable = False
    return a


def init_backbone(spec: BackboneSpec, rng: np.random.Generator) -> list[list[np.ndarray]]:
    return [[rng.normal(0.0, np.sqrt(2.0 / fi), (fi, fo)), np.zeros(fo)] for fi, fo in spec.layer_shapes()]


def init_head(spec: BackboneSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    w = spec.widths[-1]
    return rng.normal(0.0, np.sqrt(1.0 / w), (w, spec.num_classes)), np.zeros(spec.num_classes)


def fresh_adapter(spec: BackboneSpec, head: tuple[np.ndarray, np.ndarray]) -> dict[str, np.ndarray]:
    """Identity adapter blocks (zero linear map) plus a copy of ``head``."""
    adapter = {}
    for i, w in enumerate(spec.widths):
        adapter[f"block{i}.scale"] = np.ones(w)
        adapter[f"block{i}.shift"] = np.zeros(w)
        adapter[f"block{i}.weight"] = np.zeros((w, w))
        adapter[f"block{i}.bias"] = np.zeros(w)
    adapter["head.weight"] = np.array(head[0], dtype=np.float64)
    adapter["head.bias"] = np.array(head[1], dtype=np.float64)
    return adapter


def pool_matrix(width: int, out_dim: int) -> np.ndarray:
    """Adaptive mean pooling over contiguous segments as a (width, out_dim) matrix."""
    m = np.zeros((width, out_dim))
    for i in range(out_dim):
        lo = (i * width) // out_dim
        hi = -(-((i + 1) * width) // out_dim)
        m[lo:hi, i] = 1.0 / (hi - lo)
    return m


_POOL_CACHE: dict[tuple[int, int], np.ndarray] = {}


def _pool(width: int, out_dim: int) -> np.ndarray:
    key = (width, out_dim)
    if key not in _POOL_CACHE:
        _POOL_CACHE[key] = _freeze(pool_matrix(width, out_dim))
    return _POOL_CACHE[key]


# ---------------------------------------------------------------- forward


def _stage_forward(h: Tensor, layers) -> Tensor:
    for w, b in layers:
        h = T.relu(T.matmul(h, Tensor(w)) + Tensor(b))
    return h


def forward_with_features(model: Model, x, train: bool = False,
                          rng: np.random.Generator | None = None,
                          params: Mapping[str, Tensor] | None = None) -> FeatureBundle:
    """Run the model, returning pooled per-stage features and logits.

    ``params`` substitutes tensors for the adapter arrays so gradients can
    be taken with respect to them; the backbone never requires grad.
    """
    spec = model.spec
    x = T.as_tensor(x)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise T.ShapeError("forward_with_features", x.shape, (None, spec.input_dim))
    p = params if params is not None else {k: Tensor(v) for k, v in model.adapter.items()}
    layers = model.backbone.weights
    d = spec.depth_per_stage
    h, feats = x, []
    for i, width in enumerate(spec.widths):
        h = _stage_forward(h, layers[i * d:(i + 1) * d])
        z = T.feature_norm_layer(h, p[f"block{i}.scale"], p[f"block{i}.shift"])
        z = T.dropout(z, spec.dropout, train, rng)
        h = h + (T.matmul(z, p[f"block{i}.weight"]) + p[f"block{i}.bias"])
        feats.append(T.matmul(h, Tensor(_pool(width, spec.proto_dim))))
    logits = T.matmul(h, p["head.weight"]) + p["head.bias"]
    return FeatureBundle(feats, logits)


def logits(model: Model, x, params: Mapping[str, Tensor] | None = None) -> Tensor:
    return forward_with_features(model, x, train=False, params=params).logits


def predict(model: Model, x: np.ndarray, batch_size: int = 4096) -> np.ndarray:
    out = [np.argmax(logits(model, x[i:i + batch_size]).data, axis=1) for i in range(0, len(x), batch_size)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def _plain_forward(layers, head, x: Tensor) -> Tensor:
    h = x
    for w, b in layers:
        h = T.relu(T.matmul(h, w) + b)
    return T.matmul(h, head[0]) + head[1]


# ---------------------------------------------------------------- training entry points


def pretrain_and_freeze(spec: BackboneSpec, X: np.ndarray, y: np.ndarray, epochs: int, seed: int,
                        lr: float = 1e-3, batch_size: int = 32) -> Model:
    """Supervised pretraining of backbone + head, then freeze the backbone.

    The returned global model carries identity adapter blocks and the
    pretrained head as its trainable part.
    """
    if len(X) == 0:
        raise ValueError("pretraining data is empty")
    rng = np.random.default_rng([seed, 0x5EED])
    layers = init_backbone(spec, rng)
    head = init_head(spec, rng)
    arrays = {f"l{i}.{n}": a for i, wb in enumerate(layers) for n, a in zip("wb", wb)}
    arrays["head.w"], arrays["head.b"] = head
    opt = T.Adam(lr)
    for _ in range(epochs):
        order = rng.permutation(len(X))
        for start in range(0, len(X), batch_size):
            idx = order[start:start + batch_size]
            ps = T.parameters(arrays)
            lay = [(ps[f"l{i}.w"], ps[f"l{i}.b"]) for i in range(len(layers))]
            loss = T.cross_entropy(_plain_forward(lay, (ps["head.w"], ps["head.b"]), Tensor(X[idx])), y[idx])
            opt.step(arrays, T.grad(loss, ps))
    weights = tuple((_freeze(arrays[f"l{i}.w"]), _freeze(arrays[f"l{i}.b"])) for i in range(len(layers)))
    backbone = Backbone(spec, weights)
    return Model(backbone, fresh_adapter(spec, (arrays["head.w"], arrays["head.b"])), Role.GLOBAL)


def clone_adapter(model: Model) -> dict[str, np.ndarray]:
    return {k: v.copy() for k, v in model.adapter.items()}


def adapter_checksum(adapter: Mapping[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for k in adapter:
        h.update(k.encode())
        h.update(np.ascontiguousarray(adapter[k]).tobytes())
    return h.hexdigest()


def count_params(model: Model | BackboneSpec) -> dict[str, int]:
    spec = model.spec if isinstance(model, Model) else model
    frozen = sum(fi * fo + fo for fi, fo in spec.layer_shapes())
    trainable = sum(w * w + 3 * w for w in spec.widths) + spec.widths[-1] * spec.num_classes + spec.num_classes
    return {"frozen": frozen, "trainable": trainable}


def flatten(adapter: Mapping[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([np.ravel(adapter[k]) for k in adapter])


def unflatten(vector: np.ndarray, like: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    out, pos = {}, 0
    for k, v in like.items():
        out[k] = vector[pos:pos + v.size].reshape(v.shape).copy()
        pos += v.size
    if pos != vector.size:
        raise T.ShapeError("unflatten", vector.shape, (pos,))
    return out


# ---------------------------------------------------------------- checkpoints
#
# Checkpoints are numpy ``.npz`` archives.  ``__meta__`` holds a JSON
# document {"format": "heartpfl-checkpoint", "version", "kind", "spec", ...};
# "backbone" archives store frozen layers as ``backbone.<i>.w/b``, "adapter"
# archives store adapter arrays under their own names.


def _meta_array(meta: dict) -> np.ndarray:
    return np.array(json.dumps(meta, sort_keys=True))


def save_backbone(path: Path | str, backbone: Backbone, **extra) -> None:
    meta = {"format": "heartpfl-checkpoint", "version": CHECKPOINT_VERSION, "kind": "backbone",
            "spec": asdict(backbone.spec), **extra}
    arrays = {}
    for i, (w, b) in enumerate(backbone.weights):
        arrays[f"backbone.{i}.w"], arrays[f"backbone.{i}.b"] = w, b
    np.savez(path, __meta__=_meta_array(meta), **arrays)


def save_adapter(path: Path | str, spec: BackboneSpec, adapter: Mapping[str, np.ndarray],
                 role: Role, **extra) -> None:
    meta = {"format": "heartpfl-checkpoint", "version": CHECKPOINT_VERSION, "kind": "adapter",
            "spec": asdict(spec), "role": role.value, "keys": list(adapter), **extra}
    np.savez(path, __meta__=_meta_array(meta), **adapter)


def _read(path: Path | str) -> tuple[dict, dict[str, np.ndarray]]:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        if meta.get("format") != "heartpfl-checkpoint" or meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint format/version")
        return meta, {k: z[k] for k in z.files if k != "__meta__"}


def _spec_from(meta: dict) -> BackboneSpec:
    s = dict(meta["spec"])
    s["widths"] = tuple(s["widths"])
    return BackboneSpec(**s)


def load_backbone(path: Path | str) -> Backbone:
    meta, arrays = _read(path)
    spec = _spec_from(meta)
    n = len(spec.layer_shapes())
    return Backbone(spec, tuple((_freeze(arrays[f"backbone.{i}.w"]), _freeze(arrays[f"backbone.{i}.b"])) for i in range(n)))


def load_model(backbone_path: Path | str, adapter_path: Path | str) -> Model:
    backbone = load_backbone(backbone_path)
    meta, arrays = _read(adapter_path)
    if _spec_from(meta) != backbone.spec:
        raise ValueError("adapter checkpoint was written for a different backbone spec")
    adapter = {k: np.array(arrays[k]) for k in meta["keys"]}
    return Model(backbone, adapter, Role(meta["role"]))
