"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion
lines and timings.  The expensive default-task training runs are shared
through the session-scoped ``default_task_runs`` fixture.
"""
import math
import time

import numpy as np
import pytest

from conftest import finite_difference_gradients, gradient_relative_error
from oracles import (aggregate_prototypes_oracle, arcface_oracle,
                     ce_logits_oracle, combine_oracle, covariance_oracle,
                     fedavg_oracle, kd_oracle, pretrain_ce_oracle,
                     total_loss_oracle)

from fedgeo.config import ExperimentConfig
from fedgeo.data import dirichlet_partition, make_synthetic
from fedgeo.distill import combine_students, kd_loss, pretrain_ce_loss
from fedgeo.eig import sym_eig
from fedgeo.federation import UplinkMessage, fedavg, run_training
from fedgeo.geometry import ClassStats, augment_embedding, ce_loss_augmented, pool_global_cov
from fedgeo.metrics import compute_metrics
from fedgeo.models import (EncoderConfig, ModelParams, classifier_forward,
                           encoder_forward, init_params, projection_forward)
from fedgeo.objective import LossWeights, arcface_loss, softmax_cross_entropy, total_loss
from fedgeo.prototypes import PrototypeSet, aggregate_prototypes, live_prototypes, proto_regularizer
from fedgeo.tensor import GradTape, Tensor, backward


def _report(criterion: str, ok: bool, detail: str, started: float, budget: float):
    elapsed = time.perf_counter() - started
    status = "PASS" if ok and elapsed < budget else "FAIL"
    print(f"[{status}] {criterion}: {detail} ({elapsed:.1f}s, budget {budget:.0f}s)")
    assert ok, f"{criterion}: {detail}"
    assert elapsed < budget, f"{criterion}: took {elapsed:.1f}s, budget {budget:.0f}s"


# ---------------------------------------------------------------------------
# criterion 1: covariance pooling equals direct covariance of the concatenation
# ---------------------------------------------------------------------------

def test_criterion_1_covariance_pooling_oracle():
    started = time.perf_counter()
    rng = np.random.default_rng(20250101)
    worst = 0.0
    for _ in range(20):
        dim = int(rng.integers(8, 33))
        n_clients = int(rng.integers(2, 6))
        groups = []
        stats = []
        for _ in range(n_clients):
            n = int(rng.integers(30, 201))
            shift = rng.standard_normal(dim) * rng.uniform(0.5, 3.0)
            rows = rng.standard_normal((n, dim)) * rng.uniform(0.2, 2.0) + shift
            groups.append(rows)
            mean = rows.sum(axis=0) / n
            centered = rows - mean
            cov = centered.T @ centered / n
            stats.append(ClassStats(class_id=0, count=n, mean=mean,
                                    cov=(cov + cov.T) / 2))
        pooled, mean, count = pool_global_cov(stats)
        allrows = np.vstack(groups)
        direct_mean = allrows.sum(axis=0) / allrows.shape[0]
        centered = allrows - direct_mean
        direct = centered.T @ centered / allrows.shape[0]
        frob = float(np.linalg.norm(pooled - direct))
        worst = max(worst, frob)
        assert count == allrows.shape[0]
    _report("criterion 1 (pooled covariance == concatenated covariance)",
            worst <= 1e-10, f"worst Frobenius deviation {worst:.2e} <= 1e-10",
            started, budget=5.0)


# ---------------------------------------------------------------------------
# criterion 2: eigendecomposition reconstruction and orthonormality
# ---------------------------------------------------------------------------

def test_criterion_2_eigendecomposition():
    started = time.perf_counter()
    rng = np.random.default_rng(20250202)
    worst_resid, worst_orth = 0.0, 0.0
    for _ in range(100):
        dim = int(rng.integers(2, 17))
        b = rng.standard_normal((dim, dim)) * rng.uniform(0.1, 10.0)
        a = b.T @ b
        pairs = sym_eig(a)
        rec = (pairs.eigenvectors * pairs.eigenvalues) @ pairs.eigenvectors.T
        resid = np.linalg.norm(a - rec) / max(1.0, np.linalg.norm(a))
        orth = np.abs(pairs.eigenvectors.T @ pairs.eigenvectors - np.eye(dim)).max()
        worst_resid = max(worst_resid, resid)
        worst_orth = max(worst_orth, orth)
    ok = worst_resid <= 1e-8 and worst_orth <= 1e-8
    _report("criterion 2 (eigendecomposition over 100 seeded PSD matrices)",
            ok, f"worst residual {worst_resid:.2e}, worst orthonormality {worst_orth:.2e}",
            started, budget=5.0)


# ---------------------------------------------------------------------------
# criterion 3: all five loss components vs central finite differences
# ---------------------------------------------------------------------------

def _gradient_suite_case(point_seed: int):
    """One seeded parameter point with fixed data and loss constants."""
    rng = np.random.default_rng(point_seed)
    enc = EncoderConfig(input_dim=5, hidden_dim=5, embed_dim=4)
    n_classes = 3
    params = init_params(enc, n_classes, int(rng.integers(1 << 31)))
    x = rng.standard_normal((6, 5))
    y = rng.integers(0, n_classes, size=6).tolist()
    teacher = init_params(enc, n_classes, int(rng.integers(1 << 31)))
    tn_logits = classifier_forward(teacher, encoder_forward(teacher, Tensor(x))).detach()
    omega = rng.standard_normal(4) * 0.3
    glob = PrototypeSet(protos={c: [rng.standard_normal(4)] for c in range(n_classes)})
    return params, Tensor(x), y, tn_logits, omega, glob


def _loss_builders(x, y, tn_logits, omega, glob):
    def ceo(p):
        return softmax_cross_entropy(classifier_forward(p, encoder_forward(p, x)), y)

    def kd(p):
        return kd_loss(tn_logits, classifier_forward(p, encoder_forward(p, x)), 0.2)

    def cea(p):
        ups = augment_embedding(encoder_forward(p, x), omega)
        return ce_loss_augmented(p, ups, y)

    def reg(p):
        live = live_prototypes(encoder_forward(p, x), y, 1, seed=7)
        return proto_regularizer(live, glob)

    def angular(p):
        return arcface_loss(projection_forward(p, encoder_forward(p, x)), y, 16.0, 0.2)

    return {"ce_original": ceo, "kd": kd, "ce_augmented": cea,
            "proto_regularizer": reg, "angular_margin": angular}


def test_criterion_3_gradient_suite():
    started = time.perf_counter()
    worst = {}
    for point in range(20):
        params, x, y, tn_logits, omega, glob = _gradient_suite_case(31000 + point)
        builders = _loss_builders(x, y, tn_logits, omega, glob)
        arrays = {n: t.data.copy() for n, t in params.tensors.items()}
        for name, build in builders.items():
            tape = GradTape()
            tracked = {k: tape.parameter(k, Tensor(v)) for k, v in arrays.items()}
            analytic = backward(tape, build(tracked))

            def loss_fn(arrs, build=build):
                return build({k: Tensor(v) for k, v in arrs.items()}).item()

            numeric = finite_difference_gradients(loss_fn, arrays, eps=1e-5)
            rel = gradient_relative_error(
                {k: v.data for k, v in analytic.items()}, numeric)
            worst[name] = max(worst.get(name, 0.0), rel)
    ok = all(v < 1e-4 for v in worst.values())
    detail = ", ".join(f"{k}={v:.1e}" for k, v in sorted(worst.items()))
    _report("criterion 3 (five loss gradients vs finite differences, 20 points each)",
            ok, f"worst relative errors: {detail}", started, budget=30.0)


# ---------------------------------------------------------------------------
# criterion 4: formula oracles within 1e-10
# ---------------------------------------------------------------------------

def test_criterion_4_formula_oracles():
    started = time.perf_counter()
    rng = np.random.default_rng(20250404)
    devs = {}

    # teacher combination (weighted sum of student models)
    enc = EncoderConfig(6, 5, 4)
    students = [init_params(enc, 3, int(rng.integers(1 << 31))) for _ in range(3)]
    lam = [0.2, 0.3, 0.5]
    te = combine_students(students, lam)
    expect = combine_oracle(
        [{n: t.data.tolist() for n, t in s.tensors.items()} for s in students], lam)
    devs["combination"] = max(
        np.abs(te[n].data - np.asarray(expect[n])).max() for n in te.names())

    # pretraining cross-entropy
    pt = rng.dirichlet(np.ones(5), size=4)
    ps = rng.dirichlet(np.ones(5), size=4)
    devs["pretrain_ce"] = abs(pretrain_ce_loss(Tensor(pt), Tensor(ps)).item()
                              - pretrain_ce_oracle(pt.tolist(), ps.tolist()))

    # distillation loss at the protocol temperature
    tn = rng.standard_normal((5, 4))
    sn = rng.standard_normal((5, 4))
    devs["kd"] = abs(kd_loss(Tensor(tn), Tensor(sn), 0.2).item()
                     - kd_oracle(tn.tolist(), sn.tolist(), 0.2))

    # embedding augmentation (elementwise vector add)
    emb = rng.standard_normal((6, 4))
    omega = rng.standard_normal(4)
    ups = augment_embedding(Tensor(emb), omega)
    expect_ups = [[emb[i][j] + omega[j] for j in range(4)] for i in range(6)]
    devs["embedding_augmentation"] = float(np.abs(ups.data - expect_ups).max())

    # angular-margin loss
    rows = rng.standard_normal((6, 4))
    labels = rng.integers(0, 4, size=6).tolist()
    devs["angular_margin"] = abs(
        arcface_loss(Tensor(rows), labels, 16.0, 0.2).item()
        - arcface_oracle(rows.tolist(), labels, 16.0, 0.2))

    # composite objective
    comps = [float(v) for v in rng.uniform(0.0, 2.0, size=5)]
    w = LossWeights()
    devs["composite"] = abs(
        total_loss(*[Tensor(c) for c in comps], w).item()
        - total_loss_oracle(*comps, w.beta1, w.beta2, w.beta3, w.beta4))

    # multi-prototype aggregation with the literal 1/(clients * k) prefactor
    u, v = np.array([4.0, 0.0]), np.array([0.0, 8.0])
    pair = aggregate_prototypes([
        PrototypeSet(protos={0: [u]}, counts={0: 10}),
        PrototypeSet(protos={0: [v]}, counts={0: 10})])
    devs["aggregation_quarter_sum"] = float(
        np.abs(pair.protos[0][0] - (u + v) / 4.0).max())
    protos, counts, sets = [], [], []
    for n in (5, 12, 20):
        vecs = [rng.standard_normal(4) for _ in range(2)]
        protos.append([p.tolist() for p in vecs])
        counts.append(n)
        sets.append(PrototypeSet(protos={0: vecs}, counts={0: n}))
    agg = aggregate_prototypes(sets)
    devs["aggregation"] = float(np.abs(
        agg.protos[0][0] - aggregate_prototypes_oracle(protos, counts)).max())

    # model averaging
    ps_models = [init_params(enc, 3, int(rng.integers(1 << 31))) for _ in range(3)]
    cnts = [10, 20, 30]
    ups_msgs = [UplinkMessage(round=1, client_id=i, params=p, stats=(),
                              prototypes=PrototypeSet(protos={}, counts={}),
                              n_samples=c, mean_loss=0.0)
                for i, (p, c) in enumerate(zip(ps_models, cnts))]
    avg = fedavg(ups_msgs)
    expect_avg = fedavg_oracle(
        [{n: t.data.tolist() for n, t in p.tensors.items()} for p in ps_models], cnts)
    devs["model_averaging"] = max(
        np.abs(avg[n].data - np.asarray(expect_avg[n])).max() for n in avg.names())

    worst = max(devs.values())
    detail = ", ".join(f"{k}={v:.1e}" for k, v in sorted(devs.items()))
    _report("criterion 4 (formula oracles within 1e-10)", worst <= 1e-10,
            detail, started, budget=30.0)


# ---------------------------------------------------------------------------
# criteria 5-7: full runs on the default synthetic task
# ---------------------------------------------------------------------------

SEEDS = (0, 1, 2)


def test_criterion_5_loss_descent(default_task_runs):
    started = time.perf_counter()
    descents = []
    ok = True
    for seed in SEEDS:
        log = default_task_runs(seed)
        losses = [r.mean_local_loss for r in log.rows]
        first = float(np.mean(losses[:5]))
        last = float(np.mean(losses[-5:]))
        descents.append(f"seed {seed}: {first:.3f}->{last:.3f}")
        ok = ok and (last < first)
    _report("criterion 5 (5-round moving-average loss descent, 3/3 seeds)",
            ok, "; ".join(descents), started, budget=300.0)


def test_criterion_6_relative_ordering(default_task_runs):
    started = time.perf_counter()

    def mean_final(**overrides):
        return float(np.mean([
            default_task_runs(seed, **overrides).final_metrics().accuracy
            for seed in SEEDS]))

    gk = mean_final()
    fedavg_acc = mean_final(method="fedavg")
    fedproto_acc = mean_final(method="fedproto")
    ablated = mean_final(beta2=0.0, beta3=0.0, beta4=0.0, pretrain_epochs=0)

    ok = (gk >= fedavg_acc - 0.01 and gk >= fedproto_acc - 0.01
          and ablated <= gk + 0.01)
    detail = (f"gk={gk:.4f}, fedavg={fedavg_acc:.4f}, fedproto={fedproto_acc:.4f}, "
              f"ablated={ablated:.4f}")
    _report("criterion 6 (relative ordering and ablation direction, 3-seed means)",
            ok, detail, started, budget=900.0)


def test_criterion_7_determinism(default_task_runs, tmp_path):
    started = time.perf_counter()
    log_a = default_task_runs(0)
    log_b = run_training(ExperimentConfig(master_seed=0))
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    log_a.to_metrics_csv(a)
    log_b.to_metrics_csv(b)
    identical = a.read_bytes() == b.read_bytes()
    _report("criterion 7 (two identical runs produce byte-identical metrics.csv)",
            identical, f"{len(a.read_bytes())} bytes compared", started, budget=300.0)


# ---------------------------------------------------------------------------
# criterion 8: metric identities on every evaluation
# ---------------------------------------------------------------------------

def test_criterion_8_metric_identities(default_task_runs):
    started = time.perf_counter()
    checked = 0
    ok = True
    for seed in SEEDS:
        for overrides in ({}, {"method": "fedavg"}, {"method": "fedproto"}):
            for row in default_task_runs(seed, **overrides).rows:
                m = row.metrics
                ok = ok and (m.error_rate == 1.0 - m.accuracy) and (m.mae >= m.error_rate)
                checked += 1
    rng = np.random.default_rng(20250808)
    for _ in range(200):
        n = int(rng.integers(1, 150))
        c = int(rng.integers(2, 8))
        m = compute_metrics(rng.integers(0, c, size=n), rng.integers(0, c, size=n), c)
        ok = ok and (m.error_rate == 1.0 - m.accuracy) and (m.mae >= m.error_rate)
        checked += 1
    _report("criterion 8 (error_rate == 1 - accuracy exactly; mae >= error_rate)",
            ok, f"{checked} evaluations checked", started, budget=60.0)


# ---------------------------------------------------------------------------
# criterion 9: Dirichlet partition statistics
# ---------------------------------------------------------------------------

def test_criterion_9_dirichlet_statistics():
    started = time.perf_counter()
    samples = make_synthetic(4, 16, 120, spread=0.15, seed=90210)
    labels = np.array([s.label for s in samples])
    n_clients = 10
    expected = 120 / n_clients

    uniform_ok = True
    for seed in range(10):
        part = dirichlet_partition(samples, n_clients, 1e6, seed)
        for idxs in part.assignment.values():
            hist = np.bincount(labels[idxs], minlength=4)
            uniform_ok = uniform_ok and np.abs(hist - expected).max() <= 0.2 * expected

    skew_ok = True
    for seed in range(10):
        part = dirichlet_partition(samples, n_clients, 0.1, seed)
        missing = sum((np.bincount(labels[idxs], minlength=4) == 0).any()
                      for idxs in part.assignment.values())
        skew_ok = skew_ok and missing >= 1

    ok = uniform_ok and skew_ok
    _report("criterion 9 (Dirichlet statistics over 10 seeds each)",
            ok, f"alpha=1e6 near-uniform within 20%: {uniform_ok}; "
                f"alpha=0.1 has missing classes: {skew_ok}", started, budget=60.0)
