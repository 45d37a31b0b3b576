"""Round orchestration: client selection, the local update procedure, FedAvg
aggregation, covariance pooling into geometric shapes, and prototype
aggregation — plus the full multi-round training driver.

All randomness is derived from the master seed via :func:`derive_seed`, so a
whole run is a pure function of (config, seed).  Within a round the client
updates are independent; the server folds uplinks in client-id order, so the
outcome cannot depend on execution order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .config import ExperimentConfig
from .data import Partition, Sample, dirichlet_partition, load_csv, make_synthetic
from .distill import PretrainConfig, kd_loss, pretrain_teacher
from .eig import sym_eig
from .errors import ContractError, NumericError
from .geometry import (ClassStats, GeometricShape, local_class_stats,
                       make_global_vector, pool_global_cov)
from .metrics import MetricsRow, compute_metrics
from .models import (EncoderConfig, ModelParams, classifier_forward,
                     encoder_forward, init_params, projection_forward,
                     require_same_layout, sgd_step)
from .objective import LossWeights, arcface_loss, softmax_cross_entropy, total_loss
from .prototypes import (PrototypeSet, aggregate_prototypes, live_prototypes,
                         local_prototypes, proto_regularizer)
from .seeds import derive_seed
from .tensor import GradTape, Tensor, add, backward

__all__ = [
    "ClientState",
    "ServerState",
    "DownlinkMessage",
    "UplinkMessage",
    "RoundReport",
    "RoundRow",
    "RunLog",
    "fedavg",
    "select_clients",
    "client_update",
    "run_round",
    "run_training",
    "evaluate_params",
    "resolve_method",
]


# ---------------------------------------------------------------------------
# states and messages
# ---------------------------------------------------------------------------

@dataclass
class ClientState:
    """One simulated participant: its data shard, frozen teacher encoder, and
    live student model.  ``tn_classifier`` mirrors the student classifier at
    the start of each round's epoch sequence."""

    client_id: int
    samples: list[Sample]
    te_params: ModelParams | None
    sn_params: ModelParams
    tn_classifier: ModelParams | None = None
    last_round: int = 0

    @property
    def n_samples(self) -> int:
        return len(self.samples)


@dataclass(frozen=True)
class DownlinkMessage:
    round: int
    params: ModelParams
    global_prototypes: PrototypeSet
    omegas: dict[int, np.ndarray]


@dataclass(frozen=True)
class UplinkMessage:
    round: int
    client_id: int
    params: ModelParams
    stats: tuple[ClassStats, ...]
    prototypes: PrototypeSet
    n_samples: int
    mean_loss: float


@dataclass(frozen=True)
class ServerState:
    round: int
    params: ModelParams
    prototypes: PrototypeSet
    shapes: dict[int, GeometricShape]
    master_seed: int
    config: ExperimentConfig

    def omega_map(self, n_classes: int, embed_dim: int) -> dict[int, np.ndarray]:
        """Per-class global vectors; zero vectors before any statistics exist."""
        return {c: (self.shapes[c].omega if c in self.shapes else np.zeros(embed_dim))
                for c in range(n_classes)}


@dataclass(frozen=True)
class RoundReport:
    round: int
    participants: tuple[int, ...]
    dropped: tuple[int, ...]
    mean_local_loss: float


# ---------------------------------------------------------------------------
# aggregation primitives
# ---------------------------------------------------------------------------

def fedavg(uplinks) -> ModelParams:
    """Sample-count weighted average of the uploaded models."""
    if not uplinks:
        raise ContractError("fedavg requires at least one uplink")
    first = uplinks[0].params
    for u in uplinks[1:]:
        require_same_layout(first, u.params, "fedavg")
    total = sum(u.n_samples for u in uplinks)
    if total <= 0:
        raise ContractError("fedavg requires positive total sample count")
    out = {}
    for name in first.names():
        acc = np.zeros(first[name].shape)
        for u in uplinks:
            acc += (u.n_samples / total) * u.params[name].data
        out[name] = Tensor(acc)
    return ModelParams(out)


def select_clients(n_clients: int, fraction: float, round_idx: int,
                   master_seed: int) -> list[int]:
    """ceil(fraction * n) distinct client ids, seeded by (master seed, round)."""
    if not 0.0 <= fraction <= 1.0:
        raise ContractError(f"fraction must lie in [0, 1], got {fraction}")
    count = math.ceil(fraction * n_clients)
    if count == 0:
        return []
    rng = np.random.default_rng(derive_seed(master_seed, "select", round_idx))
    chosen = rng.choice(n_clients, size=count, replace=False)
    return sorted(int(c) for c in chosen)


# ---------------------------------------------------------------------------
# client update (one round of local training)
# ---------------------------------------------------------------------------

def _stack_features(samples) -> np.ndarray:
    return np.stack([s.features.data for s in samples])


def _omega_rows(omegas: dict[int, np.ndarray], labels: np.ndarray,
                embed_dim: int) -> np.ndarray:
    rows = np.zeros((labels.shape[0], embed_dim))
    for i, y in enumerate(labels):
        om = omegas.get(int(y))
        if om is not None:
            rows[i] = om
    return rows


def client_update(state: ClientState, downlink: DownlinkMessage, epochs: int,
                  lr: float, weights: LossWeights, *, k_prototypes: int = 2,
                  batch_size: int = 32, master_seed: int = 0, use_kd: bool = True,
                  upload_stats: bool = True, upload_protos: bool = True,
                  load_downlink_params: bool = True) -> UplinkMessage:
    """One client round: refresh the student from the downlink, mirror its
    classifier into the teacher network, run ``epochs`` of batched SGD on the
    composite objective, then summarize prototypes and class statistics from a
    full local pass.

    Raises :class:`NumericError` when a batch loss turns non-finite; the
    caller treats that client as dropped for the round.
    """
    if downlink.round <= state.last_round:
        raise ContractError(
            f"client {state.client_id}: downlink round {downlink.round} is stale "
            f"(already served round {state.last_round})")
    if not state.samples:
        raise ContractError(f"client {state.client_id} holds no samples")

    if load_downlink_params:
        state.sn_params = ModelParams(dict(downlink.params.tensors))
    # Shared classifier: the teacher network mirrors the student's classifier
    # for the whole epoch sequence.
    state.tn_classifier = state.sn_params.subset("classifier.")
    assert all(np.array_equal(state.tn_classifier[n].data, state.sn_params[n].data)
               for n in state.tn_classifier.names())

    needs_kd = use_kd and weights.beta1 < 1.0
    if needs_kd and state.te_params is None:
        raise ContractError(f"client {state.client_id}: distillation requires a teacher encoder")

    features = _stack_features(state.samples)
    labels = np.asarray([s.label for s in state.samples], dtype=np.int64)
    embed_dim = state.sn_params["classifier.w"].shape[0]
    n_classes = state.sn_params["classifier.w"].shape[1]
    zero = Tensor(0.0)

    batch_losses: list[float] = []
    for epoch in range(epochs):
        order = np.random.default_rng(
            derive_seed(master_seed, "batch-order", downlink.round,
                        state.client_id, epoch)).permutation(len(state.samples))
        for b0 in range(0, len(order), batch_size):
            idx = order[b0:b0 + batch_size]
            x = Tensor(features[idx])
            y = labels[idx]

            tape = GradTape()
            tracked = state.sn_params.track(tape)
            emb = encoder_forward(tracked, x)
            sn_logits = classifier_forward(tracked, emb)
            l_ceo = softmax_cross_entropy(sn_logits, y)

            if needs_kd:
                tn_logits = classifier_forward(
                    state.tn_classifier, encoder_forward(state.te_params, x))
                l_kd = kd_loss(tn_logits, sn_logits, weights.tau)
            else:
                l_kd = zero

            if weights.beta2 > 0.0:
                upsilon = add(emb, Tensor(_omega_rows(downlink.omegas, y, embed_dim)))
                l_cea = softmax_cross_entropy(classifier_forward(tracked, upsilon), y)
            else:
                l_cea = zero

            if weights.beta3 > 0.0:
                live = live_prototypes(
                    emb, y, k_prototypes,
                    seed=derive_seed(master_seed, "batch-kmeans", downlink.round,
                                     state.client_id, epoch, b0))
                l_re = proto_regularizer(live, downlink.global_prototypes)
            else:
                l_re = zero

            if weights.beta4 > 0.0:
                projected = projection_forward(tracked, emb)
                if (np.abs(projected.data).sum(axis=1) == 0.0).any():
                    # relu-dead sample: the angular loss is undefined on a
                    # zero projection, which counts as a numeric failure for
                    # this client's round
                    raise NumericError(
                        f"client {state.client_id}: zero-norm projection row "
                        f"in round {downlink.round}")
                l_af = arcface_loss(projected, y, weights.scale, weights.margin)
            else:
                l_af = zero

            loss = total_loss(l_ceo, l_kd, l_cea, l_re, l_af, weights)
            loss_val = loss.item()
            if not math.isfinite(loss_val):
                raise NumericError(
                    f"client {state.client_id}: non-finite loss in round {downlink.round}")
            batch_losses.append(loss_val)
            grads = backward(tape, loss)
            state.sn_params = sgd_step(state.sn_params, grads, lr)

    protos = PrototypeSet(protos={}, counts={})
    if upload_protos:
        protos = local_prototypes(
            state.sn_params, state.samples, k_prototypes,
            seed=derive_seed(master_seed, "upload-protos", downlink.round, state.client_id))

    stats: tuple[ClassStats, ...] = ()
    if upload_stats:
        by_class: dict[int, list[Sample]] = {}
        for s in state.samples:
            by_class.setdefault(s.label, []).append(s)
        if state.te_params is None:
            raise ContractError(
                f"client {state.client_id}: statistics upload requires a teacher encoder")
        stats = tuple(local_class_stats(state.te_params, by_class[c])
                      for c in sorted(by_class))

    state.last_round = downlink.round
    mean_loss = float(np.mean(batch_losses)) if batch_losses else float("nan")
    return UplinkMessage(
        round=downlink.round,
        client_id=state.client_id,
        params=state.sn_params,
        stats=stats,
        prototypes=protos,
        n_samples=len(state.samples),
        mean_loss=mean_loss,
    )


# ---------------------------------------------------------------------------
# server round
# ---------------------------------------------------------------------------

def _method_flags(method: str) -> dict:
    if method == "fedavg":
        return dict(use_kd=False, upload_stats=False, upload_protos=False,
                    aggregate_models=True, load_downlink_params=True)
    if method == "fedproto":
        return dict(use_kd=False, upload_stats=False, upload_protos=True,
                    aggregate_models=False, load_downlink_params=False)
    return dict(use_kd=True, upload_stats=True, upload_protos=True,
                aggregate_models=True, load_downlink_params=True)


def resolve_method(config: ExperimentConfig) -> ExperimentConfig:
    """Force the loss weights each baseline is defined by.

    fedavg: plain CE only, no uploads beyond parameters.
    fedproto: CE plus the prototype regularizer with single prototypes and
    prototype-only aggregation (models stay local).
    """
    if config.method == "fedavg":
        return config.replace(beta1=1.0, beta2=0.0, beta3=0.0, beta4=0.0,
                              pretrain_epochs=0)
    if config.method == "fedproto":
        return config.replace(beta1=1.0, beta2=0.0, beta4=0.0, k_prototypes=1,
                              pretrain_epochs=0)
    return config


def _loss_weights(config: ExperimentConfig) -> LossWeights:
    return LossWeights(beta1=config.beta1, beta2=config.beta2, beta3=config.beta3,
                       beta4=config.beta4, tau=config.kd_temperature,
                       scale=config.arcface_scale, margin=config.arcface_margin)


def run_round(server: ServerState, clients: list[ClientState]
              ) -> tuple[ServerState, RoundReport]:
    """Execute one round: select, broadcast, collect uplinks, pool covariance
    per class, aggregate models, eigendecompose, draw global vectors, and
    aggregate prototypes.  Clients that fail numerically are dropped."""
    cfg = server.config
    flags = _method_flags(cfg.method)
    weights = _loss_weights(cfg)
    t = server.round + 1
    n_classes = server.params["classifier.w"].shape[1]
    embed_dim = server.params["classifier.w"].shape[0]

    selected = select_clients(len(clients), cfg.selection_fraction, t, server.master_seed)
    downlink = DownlinkMessage(
        round=t,
        params=server.params,
        global_prototypes=server.prototypes,
        omegas=server.omega_map(n_classes, embed_dim),
    )

    uplinks: list[UplinkMessage] = []
    dropped: list[int] = []
    for cid in selected:
        try:
            up = client_update(
                clients[cid], downlink, cfg.local_epochs, cfg.learning_rate, weights,
                k_prototypes=cfg.k_prototypes, batch_size=cfg.batch_size,
                master_seed=server.master_seed, use_kd=flags["use_kd"],
                upload_stats=flags["upload_stats"], upload_protos=flags["upload_protos"],
                load_downlink_params=flags["load_downlink_params"])
        except NumericError:
            dropped.append(cid)
            continue
        if up.round != downlink.round:
            raise ContractError(f"uplink round {up.round} does not match downlink {t}")
        uplinks.append(up)

    if not uplinks:
        report = RoundReport(round=t, participants=(), dropped=tuple(dropped),
                             mean_local_loss=float("nan"))
        return replace(server, round=t), report

    # line 7: pool per-class covariance across reporting clients
    stats_by_class: dict[int, list[ClassStats]] = {}
    for up in uplinks:
        for st in up.stats:
            stats_by_class.setdefault(st.class_id, []).append(st)

    # line 8: model aggregation
    new_params = fedavg(uplinks) if flags["aggregate_models"] else server.params

    # lines 9-10: eigendecompose each pooled covariance, draw the global vector
    shapes = dict(server.shapes)
    for cid in sorted(stats_by_class):
        cov, _, _ = pool_global_cov(stats_by_class[cid])
        eigen = sym_eig(cov)
        omega, alpha = make_global_vector(
            eigen, derive_seed(server.master_seed, "alpha", t, cid))
        shapes[cid] = GeometricShape(class_id=cid, eigen=eigen,
                                     omega=omega, alpha_used=alpha)

    # line 11: multi-prototype aggregation
    reporting = [up.prototypes for up in uplinks if up.prototypes.protos]
    new_protos = aggregate_prototypes(reporting) if reporting else server.prototypes

    new_server = ServerState(round=t, params=new_params, prototypes=new_protos,
                             shapes=shapes, master_seed=server.master_seed, config=cfg)
    losses = [up.mean_loss for up in uplinks if math.isfinite(up.mean_loss)]
    report = RoundReport(
        round=t,
        participants=tuple(up.client_id for up in uplinks),
        dropped=tuple(dropped),
        mean_local_loss=float(np.mean(losses)) if losses else float("nan"),
    )
    return new_server, report


# ---------------------------------------------------------------------------
# full training run
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RoundRow:
    round: int
    metrics: MetricsRow
    mean_local_loss: float


@dataclass(frozen=True)
class RunLog:
    config: ExperimentConfig
    rows: tuple[RoundRow, ...]
    final_params: ModelParams
    client_params: tuple[ModelParams, ...]
    partition: Partition
    pretrain_curves: dict[int, tuple] = field(default_factory=dict)

    def final_metrics(self) -> MetricsRow:
        return self.rows[-1].metrics

    def to_metrics_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            f.write("round,accuracy,avg_accuracy,macro_f1,error_rate,mae,mean_local_loss\n")
            for row in self.rows:
                m = row.metrics
                f.write(",".join([
                    str(row.round), repr(m.accuracy), repr(m.average_accuracy),
                    repr(m.macro_f1), repr(m.error_rate), repr(m.mae),
                    repr(row.mean_local_loss),
                ]) + "\n")


def evaluate_params(params: ModelParams, samples, n_classes: int) -> MetricsRow:
    """Argmax classification of ``samples`` by encoder+classifier."""
    x = Tensor(_stack_features(samples))
    labels = [s.label for s in samples]
    logits = classifier_forward(params, encoder_forward(params, x))
    return compute_metrics(logits.data.argmax(axis=1), labels, n_classes)


def _predictions(params: ModelParams, x: Tensor) -> np.ndarray:
    return classifier_forward(params, encoder_forward(params, x)).data.argmax(axis=1)


def build_datasets(config: ExperimentConfig) -> tuple[list[Sample], list[Sample], int]:
    """Materialize (train, test, n_classes) from the config's dataset spec."""
    if config.csv_path:
        samples = load_csv(config.csv_path)
        n_classes = max(s.label for s in samples) + 1
        rng = np.random.default_rng(derive_seed(config.master_seed, "csv-split"))
        order = rng.permutation(len(samples))
        n_test = int(round(config.test_fraction * len(samples)))
        test_idx = set(order[:n_test].tolist())
        train = [samples[i] for i in range(len(samples)) if i not in test_idx]
        test = [samples[i] for i in sorted(test_idx)]
        if not train or not test:
            raise ContractError("csv split produced an empty train or test set")
        return train, test, n_classes
    # One pool per class, split into train and held-out test so both sides
    # share the same seeded class distributions without overlapping draws.
    per_class = config.n_per_class + config.test_n_per_class
    pool = make_synthetic(config.n_classes, config.feature_dim, per_class,
                          config.spread, derive_seed(config.master_seed, "data"))
    train: list[Sample] = []
    test: list[Sample] = []
    for c in range(config.n_classes):
        block = pool[c * per_class:(c + 1) * per_class]
        train.extend(block[:config.n_per_class])
        test.extend(block[config.n_per_class:])
    return train, test, config.n_classes


def run_training(config: ExperimentConfig) -> RunLog:
    """Algorithm driver: pretrain per-client teacher encoders, initialize the
    server, run the round loop, and score the global model on the held-out
    test split after every round."""
    cfg = resolve_method(config)
    train, test, n_classes = build_datasets(cfg)
    feature_dim = train[0].features.size
    enc_cfg = EncoderConfig(input_dim=feature_dim, hidden_dim=cfg.hidden_dim,
                            embed_dim=cfg.embed_dim)

    partition = dirichlet_partition(train, cfg.n_clients, cfg.dirichlet_alpha,
                                    derive_seed(cfg.master_seed, "partition"))

    global_init = init_params(enc_cfg, n_classes, derive_seed(cfg.master_seed, "global-init"))

    flags = _method_flags(cfg.method)
    needs_te = flags["use_kd"] or flags["upload_stats"]
    clients: list[ClientState] = []
    pretrain_curves: dict[int, tuple] = {}
    for cid in range(cfg.n_clients):
        shard = [train[i] for i in partition.assignment[cid]]
        te = None
        if needs_te:
            pcfg = PretrainConfig(
                encoder=enc_cfg, n_students=cfg.pretrain_students,
                epochs=cfg.pretrain_epochs,
                teacher_temperature=cfg.teacher_temperature,
                student_temperature=cfg.student_temperature,
                head_dim=cfg.pretrain_head_dim, learning_rate=cfg.pretrain_lr,
                batch_size=cfg.batch_size)
            result = pretrain_teacher(shard, pcfg, derive_seed(cfg.master_seed, "pretrain", cid))
            te = result.teacher
            pretrain_curves[cid] = result.loss_curve
        clients.append(ClientState(client_id=cid, samples=shard, te_params=te,
                                   sn_params=global_init))

    server = ServerState(round=0, params=global_init,
                         prototypes=PrototypeSet(protos={}, counts={}),
                         shapes={}, master_seed=cfg.master_seed, config=cfg)

    x_test = Tensor(_stack_features(test))
    y_test = [s.label for s in test]

    rows: list[RoundRow] = []
    for _ in range(cfg.rounds):
        server, report = run_round(server, clients)
        if cfg.method == "fedproto":
            # Personalized evaluation: pool every client's predictions on the
            # shared test set so ratio identities stay exact.
            preds = np.concatenate([_predictions(c.sn_params, x_test) for c in clients])
            labels = np.tile(np.asarray(y_test, dtype=np.int64), len(clients))
            metrics = compute_metrics(preds, labels, n_classes)
        else:
            metrics = compute_metrics(_predictions(server.params, x_test), y_test, n_classes)
        rows.append(RoundRow(round=server.round, metrics=metrics,
                             mean_local_loss=report.mean_local_loss))

    return RunLog(config=cfg, rows=tuple(rows), final_params=server.params,
                  client_params=tuple(c.sn_params for c in clients),
                  partition=partition, pretrain_curves=pretrain_curves)
