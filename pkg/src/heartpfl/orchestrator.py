"""Round loop: client sampling, two-phase client training, averaging, AKT."""
from __future__ import annotations

import csv
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Mapping

import numpy as np

from . import akt as akt_mod
from . import metrics
from . import tensor as T
from .akt import AktConfig
from .data import ClientPartition, Dataset, ProxyDataset
from .hda import HdaConfig, client_personalized_update, extract_prototypes
from .models import Model, Role, forward_with_features, save_adapter, save_backbone

if TYPE_CHECKING:
    from .config import ExperimentConfig

RECORD_VERSION = 1

# method -> (personalized phase, server phase)
METHODS: dict[str, tuple[str, str | None]] = {
    "heart_pfl": ("hda", "akt"),
    "hda_only": ("hda", None),
    "akt_only": ("ce", "akt"),
    "fedavg_per": ("ce", None),
    "plain_ekt": ("ce", "ekt"),
}

_PHASE_PERSONAL, _PHASE_LOCAL, _SERVER = 1, 2, 0xA77


@dataclass
class FLConfig:
    num_clients: int = 20
    clients_per_round: int = 8
    rounds: int = 30
    client_epochs: int = 2
    client_lr: float = 0.01
    client_lr_decay: float = 1.0
    client_batch_size: int = 16
    method: str = "heart_pfl"
    seed: int = 0
    eval_every: int = 5
    hda: HdaConfig = field(default_factory=HdaConfig)
    akt: AktConfig = field(default_factory=AktConfig)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {sorted(METHODS)}")
        if not 1 <= self.clients_per_round <= self.num_clients:
            raise ValueError("clients_per_round must lie in [1, num_clients]")
        if self.client_lr <= 0 or self.client_lr_decay <= 0 or self.client_batch_size < 1:
            raise ValueError("client_lr, client_lr_decay and client_batch_size must be positive")
        if self.rounds < 0 or self.client_epochs < 0 or self.eval_every < 1:
            raise ValueError("rounds and client_epochs must be >= 0, eval_every >= 1")


@dataclass
class ClientState:
    cid: int
    X_train: np.ndarray
    y_train: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray
    adapter: dict[str, np.ndarray]


@dataclass
class RoundRecord:
    round: int
    variant: str
    seed: int
    config_hash: str
    sampled: list[int]
    client_loss_mean: float
    server_loss: list[float]
    personalized_acc_mean: float | None = None
    personalized_acc_std: float | None = None
    global_acc: float | None = None
    alignment: float | None = None
    alignment_per_layer: list[float] | None = None
    norm_variance: float | None = None
    wall_clock: float = 0.0

    def to_json(self) -> str:
        """One line of the round-record file; wall-clock time is kept out of it."""
        doc = {k: v for k, v in self.__dict__.items() if k != "wall_clock"}
        doc["record_version"] = RECORD_VERSION
        return json.dumps(doc, sort_keys=True, allow_nan=True)


@dataclass
class Federation:
    cfg: FLConfig
    global_model: Model
    clients: list[ClientState]
    proxy: ProxyDataset
    partition: ClientPartition
    config_hash: str = ""
    round: int = 0

    @property
    def backbone(self):
        return self.global_model.backbone

    def personal_model(self, client: ClientState) -> Model:
        return self.global_model.with_adapter(client.adapter, Role.PERSONALIZED)


class RoundError(RuntimeError):
    pass


def client_rng(seed: int, rnd: int, cid: int, phase: int) -> np.random.Generator:
    return np.random.default_rng([seed, rnd, cid, phase])


def sample_clients(rnd: int, cfg: FLConfig) -> list[int]:
    rng = np.random.default_rng([cfg.seed, rnd, 0x5A])
    return sorted(int(c) for c in rng.choice(cfg.num_clients, size=cfg.clients_per_round, replace=False))


def local_ce_update(model: Model, X: np.ndarray, y: np.ndarray, epochs: int, lr: float,
                    batch_size: int, rng: np.random.Generator) -> tuple[dict[str, np.ndarray], list[float]]:
    """Plain cross-entropy minibatch SGD on a copy of ``model``'s adapter."""
    adapter = {k: v.copy() for k, v in model.adapter.items()}
    opt = T.SGD(lr)
    losses = []
    for _ in range(epochs):
        order = rng.permutation(len(y))
        for start in range(0, len(y), batch_size):
            idx = order[start:start + batch_size]
            params = T.parameters(adapter)
            logits = forward_with_features(model, X[idx], train=True, rng=rng, params=params).logits
            loss = T.cross_entropy(logits, y[idx])
            opt.step(adapter, T.grad(loss, params))
            losses.append(loss.item())
    return adapter, losses


def _client_lr(cfg: FLConfig, rnd: int) -> float:
    return cfg.client_lr * cfg.client_lr_decay ** rnd


def client_round(client: ClientState, global_model: Model, cfg: FLConfig, rnd: int):
    """Both client phases; returns (new personalized adapter, local adapter, mean loss).

    Phase 1 updates the client's personalized adapter (HDA objective, or
    plain CE for the CE-only methods).  Phase 2 clones the received global
    adapter and fine-tunes it with CE for upload; it never reads the
    personalized adapter and uses its own random stream.
    """
    personal_phase, _ = METHODS[cfg.method]
    lr = _client_lr(cfg, rnd)
    personal = global_model.with_adapter(client.adapter, Role.PERSONALIZED)
    rng1 = client_rng(cfg.seed, rnd, client.cid, _PHASE_PERSONAL)
    if personal_phase == "hda":
        omega, stats = client_personalized_update(personal, global_model, client.X_train, client.y_train,
                                                  cfg.client_epochs, cfg.hda, lr, cfg.client_batch_size, rng1)
        losses = stats.losses
    else:
        omega, losses = local_ce_update(personal, client.X_train, client.y_train, cfg.client_epochs, lr,
                                        cfg.client_batch_size, rng1)
    rng2 = client_rng(cfg.seed, rnd, client.cid, _PHASE_LOCAL)
    local = global_model.with_adapter(global_model.adapter, Role.LOCAL)
    phi, _ = local_ce_update(local, client.X_train, client.y_train, cfg.client_epochs, lr,
                             cfg.client_batch_size, rng2)
    return omega, phi, (float(np.mean(losses)) if losses else float("nan"))


def adapter_average(uploads) -> dict[str, np.ndarray]:
    """Unweighted elementwise mean of adapters.

    ``uploads`` is a sequence (summed in order) or a mapping keyed by client
    id, which is summed in ascending id order whatever the arrival order.
    """
    if isinstance(uploads, Mapping):
        uploads = [uploads[k] for k in sorted(uploads)]
    if not uploads:
        raise ValueError("adapter_average needs at least one upload")
    keys = list(uploads[0])
    for u in uploads[1:]:
        if list(u) != keys or any(u[k].shape != uploads[0][k].shape for k in keys):
            raise T.ShapeError("adapter_average", *[tuple(u[k].shape for k in u) for u in uploads])
    out = {}
    for k in keys:
        total = uploads[0][k].copy()
        for u in uploads[1:]:
            total += u[k]
        out[k] = total / len(uploads)
    return out


def evaluate(state: Federation) -> dict:
    """Personalized accuracy over all clients' held-out splits plus global diagnostics."""
    accs, aligns, layer_aligns, norm_vars = [], [], [], []
    for c in state.clients:
        if len(c.y_test) == 0:
            continue
        personal = state.personal_model(c)
        accs.append(metrics.accuracy(personal, c.X_test, c.y_test))
        protos = extract_prototypes(personal, c.X_train, c.y_train)
        mean_align, per_layer = metrics.representation_alignment(state.global_model, protos, c.X_test, c.y_test)
        if np.isfinite(mean_align):
            aligns.append(mean_align)
            layer_aligns.append(per_layer)
        norm_vars.append(metrics.feature_norm_variance(personal, c.X_test))
    X = np.concatenate([c.X_test for c in state.clients if len(c.y_test)])
    y = np.concatenate([c.y_test for c in state.clients if len(c.y_test)])
    return {
        "personalized_acc_mean": float(np.mean(accs)),
        "personalized_acc_std": float(np.std(accs)),
        "global_acc": metrics.accuracy(state.global_model, X, y),
        "alignment": float(np.mean(aligns)) if aligns else None,
        "alignment_per_layer": np.mean(layer_aligns, axis=0).tolist() if layer_aligns else None,
        "norm_variance": float(np.mean(norm_vars)),
    }


def _server_update(state: Federation, locals_: list[Model], rnd: int) -> list[float]:
    cfg = state.cfg
    _, server_phase = METHODS[cfg.method]
    if server_phase is None:
        return []
    rng = np.random.default_rng([cfg.seed, rnd, _SERVER])
    proxy = state.proxy
    if server_phase == "akt":
        adapter, trace = akt_mod.akt_update(state.global_model, locals_, proxy.X, proxy.y, proxy.in_domain,
                                            cfg.akt, rng)
    else:
        adapter, trace = akt_mod.ekt_update(state.global_model, locals_, proxy.X, cfg.akt, rng)
    state.global_model = state.global_model.with_adapter(adapter)
    return trace


def run_round(state: Federation, workers: int = 1, evaluate_now: bool | None = None) -> RoundRecord:
    """One communication round; mutates ``state`` and returns its record."""
    cfg = state.cfg
    rnd = state.round
    start = time.perf_counter()
    try:
        sampled = sample_clients(rnd, cfg)
        received = state.global_model
        jobs = [state.clients[c] for c in sampled]
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(lambda c: client_round(c, received, cfg, rnd), jobs))
        else:
            results = [client_round(c, received, cfg, rnd) for c in jobs]
        for client, (omega, _, _) in zip(jobs, results):
            client.adapter = omega
        uploads = [phi for _, phi, _ in results]
        state.global_model = received.with_adapter(adapter_average(dict(zip(sampled, uploads))))
        locals_ = [received.with_adapter(phi, Role.LOCAL) for phi in uploads]
        trace = _server_update(state, locals_, rnd)
        record = RoundRecord(rnd, cfg.method, cfg.seed, state.config_hash, sampled,
                             float(np.mean([r[2] for r in results])), trace)
        if evaluate_now is None:
            evaluate_now = (rnd + 1) % cfg.eval_every == 0 or rnd + 1 == cfg.rounds
        if evaluate_now:
            for k, v in evaluate(state).items():
                setattr(record, k, v)
    except Exception as exc:
        raise RoundError(f"round {rnd} failed: {exc}") from exc
    state.round += 1
    record.wall_clock = time.perf_counter() - start
    return record


@dataclass
class ExperimentResult:
    records: list[RoundRecord]
    state: Federation

    @property
    def personalized_adapters(self) -> dict[int, dict[str, np.ndarray]]:
        return {c.cid: c.adapter for c in self.state.clients}

    @property
    def final(self) -> RoundRecord:
        return self.records[-1]


@dataclass
class PreparedData:
    pool: Dataset
    pretrain: Dataset | None
    proxy: ProxyDataset
    clients: Dataset
    partition: ClientPartition
    splits: list[tuple[np.ndarray, np.ndarray]]


def prepare_data(exp: ExperimentConfig) -> PreparedData:
    """Generate the pool and carve it into pretraining, proxy and partitioned client data."""
    from .data import dirichlet_partition, generate_gaussian_mixture, make_proxy, split_client_train_test

    d, seed = exp.data, exp.fl.seed
    in_domain = d.proxy_mode == "in_domain"
    n_total = d.n_samples + d.pretrain_size + (d.proxy_size if in_domain else 0)
    pool = generate_gaussian_mixture(d.num_classes, d.dim, n_total, d.class_sep, seed)
    order = np.random.default_rng([seed, 0xC4]).permutation(n_total)
    pretrain_idx = np.sort(order[:d.pretrain_size])
    proxy = make_proxy(pool, d.proxy_size, d.proxy_mode, seed, class_sep=d.ood_class_sep,
                       num_classes=d.ood_num_classes, exclude=pretrain_idx)
    used = np.zeros(n_total, dtype=bool)
    used[pretrain_idx] = True
    if proxy.source_indices is not None:
        used[proxy.source_indices] = True
    clients = pool.subset(np.flatnonzero(~used))
    partition = dirichlet_partition(clients, exp.fl.num_clients, d.alpha, seed, d.min_per_client)
    splits = split_client_train_test(clients, partition, d.test_fraction, seed)
    pretrain = pool.subset(pretrain_idx) if d.pretrain_size else None
    return PreparedData(pool, pretrain, proxy, clients, partition, splits)


def build_federation(exp: ExperimentConfig) -> Federation:
    """Generate data, partition it, pretrain/freeze the backbone and set up client state."""
    from .models import BackboneSpec, pretrain_and_freeze

    d, m = exp.data, exp.model
    prep = prepare_data(exp)
    spec = BackboneSpec(d.dim, d.num_classes, tuple(m.widths), m.depth_per_stage, m.proto_dim, m.dropout)
    if prep.pretrain is not None:
        global_model = pretrain_and_freeze(spec, prep.pretrain.X, prep.pretrain.y, d.pretrain_epochs, exp.fl.seed)
    else:
        global_model = pretrain_and_freeze(spec, prep.pool.X[:1], prep.pool.y[:1], 0, exp.fl.seed)
    cd = prep.clients
    clients = [ClientState(k, cd.X[tr], cd.y[tr], cd.X[te], cd.y[te],
                           {n: a.copy() for n, a in global_model.adapter.items()})
               for k, (tr, te) in enumerate(prep.splits)]
    return Federation(exp.fl, global_model, clients, prep.proxy, prep.partition, exp.config_hash())


def run_experiment(exp: ExperimentConfig, out_dir: Path | str | None = None, workers: int = 1,
                   checkpoint_every: int = 0) -> ExperimentResult:
    """Full run: setup, R rounds, and (with ``out_dir``) records, summary and checkpoints."""
    state = build_federation(exp)
    records: list[RoundRecord] = []
    out = Path(out_dir) if out_dir is not None else None
    rec_fh = time_fh = None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        meta = {"config_hash": state.config_hash, "seed": exp.fl.seed}
        save_backbone(out / "checkpoints" / "backbone.npz", state.backbone, **meta)
        rec_fh = open(out / "records.jsonl", "w")
        time_fh = open(out / "timings.jsonl", "w")
    try:
        for rnd in range(exp.fl.rounds):
            record = run_round(state, workers)
            records.append(record)
            if rec_fh is not None:
                rec_fh.write(record.to_json() + "\n")
                rec_fh.flush()
                time_fh.write(json.dumps({"round": rnd, "wall_clock": record.wall_clock, **meta}) + "\n")
                last = rnd + 1 == exp.fl.rounds
                if last or (checkpoint_every and (rnd + 1) % checkpoint_every == 0):
                    save_adapter(out / "checkpoints" / f"global_r{rnd:04d}.npz", state.global_model.spec,
                                 state.global_model.adapter, Role.GLOBAL, round=rnd, **meta)
    finally:
        if rec_fh is not None:
            rec_fh.close()
            time_fh.close()
    result = ExperimentResult(records, state)
    if out is not None:
        for c in state.clients:
            save_adapter(out / "checkpoints" / f"client_{c.cid:03d}.npz", state.global_model.spec, c.adapter,
                         Role.PERSONALIZED, client=c.cid, **meta)
        if records:
            write_summary(out / "summary.csv", result)
    return result


SUMMARY_FIELDS = ["config_hash", "seed", "variant", "rounds", "personalized_acc_mean", "personalized_acc_std",
                  "global_acc", "alignment", "norm_variance", "partition"]


def write_summary(path: Path | str, result: ExperimentResult) -> None:
    f = result.final
    row = [f.config_hash, f.seed, f.variant, len(result.records), f.personalized_acc_mean,
           f.personalized_acc_std, f.global_acc, f.alignment, f.norm_variance, result.state.partition.fingerprint()]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_FIELDS)
        w.writerow([repr(v) if isinstance(v, float) else v for v in row])
