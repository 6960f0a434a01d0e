"""One test per acceptance criterion; each prints a single PASS/FAIL line."""

import math
import time

import numpy as np
import pytest

import conftest
from conftest import run_toy
from ecovnet import ops
from ecovnet.ensemble import PredictionSet, hard_ensemble, single_snapshot, soft_ensemble
from ecovnet.gradcam import cam_from_gradients, compute_cam, quadrant_mass
from ecovnet.gradcheck import grad_check
from ecovnet.metrics import auc_trapezoid, evaluate_predictions, prf1, roc_curve, wald_halfwidth
from ecovnet.model import B0_STAGES, ScalingCoefficients, b0_arch, build_model, param_count, scale_arch
from ecovnet.persist import encode_tensors, load_run, save_run
from ecovnet.train import TrainConfig, cosine_lr, predict_proba
from test_ensemble import oracle_hard, oracle_soft, random_psets
from test_metrics import pair_counting_auc
from test_ops import _stack, _stack_inputs

EPS = 1e-5
GRAD_TOL = 1e-5
CLASSES = ["covid19", "normal", "pneumonia"]


def record(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    conftest.ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def _probe(out_fn, back_fn, R):
    """Scalar loss sum(out * R) and its gradient list, for single-op checks."""
    def fn(*inputs):
        out, cache = out_fn(*inputs)
        return float(np.sum(out * R)), back_fn(R, cache)
    return fn


def _layer_checks(rng):
    """Yields (layer name, max relative error) over three random shapes per layer."""
    for N, C, H in [(2, 3, 5), (3, 2, 4), (1, 4, 6)]:
        x = rng.standard_normal((N, C, H, H))
        for stride in (1, 2):
            w = rng.standard_normal((2, C, 3, 3))
            R = rng.standard_normal(ops.conv2d(x, w, stride)[0].shape)
            yield "conv2d", grad_check(_probe(lambda a, b: ops.conv2d(a, b, stride), ops.conv2d_backward, R),
                                       [x.copy(), w], EPS)
        wd = rng.standard_normal((C, 3, 3))
        R = rng.standard_normal(ops.depthwise_conv2d(x, wd, 2)[0].shape)
        yield "depthwise", grad_check(_probe(lambda a, b: ops.depthwise_conv2d(a, b, 2),
                                             ops.depthwise_conv2d_backward, R), [x.copy(), wd], EPS)
        R = rng.standard_normal(x.shape)
        rm, rv = np.zeros(C), np.ones(C)
        yield "batchnorm", grad_check(_probe(lambda a, g, b: ops.batch_norm(a, g, b, rm.copy(), rv.copy(), True),
                                             ops.batch_norm_backward, R),
                                      [x.copy(), rng.uniform(0.5, 1.5, C), rng.standard_normal(C)], EPS)
        yield "swish", grad_check(_probe(lambda a: ops.activation("swish", a),
                                         lambda d, c: (ops.activation_backward(d, c),), R), [x.copy()], EPS)
        s = max(1, C // 2)
        yield "squeeze-excite", grad_check(_probe(ops.squeeze_excite, ops.squeeze_excite_backward, R),
                                           [x.copy(), rng.standard_normal((C, s)), rng.standard_normal(s),
                                            rng.standard_normal((s, C)), rng.standard_normal(C)], EPS)
        Rg = rng.standard_normal((N, C))
        yield "gap", grad_check(_probe(ops.global_avg_pool, lambda d, c: (ops.global_avg_pool_backward(d, c),), Rg),
                                [x.copy()], EPS)
        K = 3
        Rf = rng.standard_normal((N, K))
        yield "fc", grad_check(_probe(ops.fully_connected, ops.fully_connected_backward, Rf),
                               [rng.standard_normal((N, C)), rng.standard_normal((C, K)), rng.standard_normal(K)], EPS)
        onehot = np.eye(K)[rng.integers(0, K, N)]
        weights = rng.uniform(0.5, 2.0, K)

        def ce(z):
            p = ops.softmax(z)
            return (ops.cross_entropy_loss(p, onehot, weights),
                    (ops.softmax_cross_entropy_backward(p, onehot, weights),))
        yield "softmax-ce", grad_check(ce, [rng.standard_normal((N, K))], EPS)
        inputs = _stack_inputs(rng, N, min(C, 3), C, H)
        stack_onehot = np.eye(3)[np.arange(N) % 3]
        yield "full stack", grad_check(lambda *a: _stack(*a, stack_onehot), inputs, EPS)


def test_criterion_1_gradients():
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst: dict[str, float] = {}
    counts: dict[str, int] = {}
    for name, err in _layer_checks(rng):
        worst[name] = max(worst.get(name, 0.0), err)
        counts[name] = counts.get(name, 0) + 1
    mutant = grad_check(lambda *a: _stack(*a, np.eye(3)[[0, 1, 2]], mutate=True), _stack_inputs(rng), EPS)
    seconds = time.perf_counter() - start
    ok = (max(worst.values()) <= GRAD_TOL and min(counts.values()) >= 3
          and mutant > GRAD_TOL and seconds < 120)
    record(1, ok, f"max rel err {max(worst.values()):.2e} over {len(worst)} layers "
                  f"(>= {min(counts.values())} shapes each), mutant err {mutant:.2f}, {seconds:.1f}s")


def test_criterion_2_compound_scaling():
    b0 = b0_arch()
    same = scale_arch(b0, ScalingCoefficients(phi=0))
    table_ok = same.stages == B0_STAGES and same.resolution == 224
    coeff = ScalingCoefficients()
    mult_ok = (coeff.alpha, coeff.beta, coeff.gamma) == (1.2, 1.1, 1.15)
    prod = coeff.constraint_product
    prod_ok = abs(prod - 1.9203) < 5e-5 and abs(prod - 2) <= 0.2
    count = param_count(build_model(b0, seed=0))
    count_ok = abs(count - 4_978_847) / 4_978_847 <= 0.05
    record(2, table_ok and mult_ok and prod_ok and count_ok,
           f"phi=0 table {'exact' if table_ok else 'differs'}, multipliers {coeff.alpha, coeff.beta, coeff.gamma}, "
           f"product {prod:.4f}, B0 params {count:,} ({100 * (count / 4_978_847 - 1):+.2f}%)")


@pytest.mark.slow
def test_criterion_3_schedule(toy_run):
    cfg = TrainConfig(epochs=25, cycles=5, lr=1e-4)
    L = math.ceil(cfg.epochs / cfg.cycles)
    worst = max(abs(cosine_lr(t, cfg) - cfg.lr / 2 * (math.cos(math.pi * ((t - 1) % L) / L) + 1))
                / (cfg.lr / 2 * (math.cos(math.pi * ((t - 1) % L) / L) + 1)) for t in range(1, 26))
    restarts = [t for t in range(1, 26) if cosine_lr(t, cfg) == cfg.lr]
    snaps = [s.epoch for s in toy_run.bundle.snapshots]
    ok = worst <= 1e-12 and restarts == [1, 6, 11, 16, 21] and len(snaps) == 5
    record(3, ok, f"closed-form rel err {worst:.1e}, restarts at {restarts}, snapshots at epochs {snaps}")


def test_criterion_4_ensemble_oracle():
    mismatches = 0
    for probs in random_psets(1000, seed=7):
        vectors = [list(v) for v in probs[0]]
        for m in range(1, 6):
            pset = PredictionSet(probs, m)
            mismatches += int(hard_ensemble(pset)[0] != oracle_hard(vectors, m))
            mismatches += int(soft_ensemble(pset)[0][0] != oracle_soft(vectors, m))
    invariant_fail = 0
    r = np.random.default_rng(3)
    for probs in random_psets(200, S=6, seed=11):
        m = int(r.integers(1, 6))
        perm = list(r.permutation(5 - m)) + list(5 - m + r.permutation(m))
        a, b = PredictionSet(probs, m), PredictionSet(probs[:, perm], m)
        invariant_fail += int(not np.array_equal(hard_ensemble(a), hard_ensemble(b)))
        invariant_fail += int(not np.array_equal(soft_ensemble(a)[0], soft_ensemble(b)[0]))
        same = PredictionSet(np.repeat(probs[:, :1], 5, axis=1), m)
        invariant_fail += int(not np.array_equal(hard_ensemble(same), probs[:, 0].argmax(1)))
        invariant_fail += int(not np.array_equal(single_snapshot(same), soft_ensemble(same)[0]))
    record(4, mismatches == 0 and invariant_fail == 0,
           f"{mismatches} oracle mismatches over 1000 sets x m=1..5, {invariant_fail} invariant violations")


def test_criterion_5_metrics():
    p, rc, f = prf1(100, 8, 0)
    prf_ok = abs(p - 92.59) <= 0.01 and abs(rc - 100) <= 0.01 and abs(f - 96.15) <= 0.01
    hw = [100 * wald_halfwidth(0.9626, 1579), 100 * wald_halfwidth(0.9633, 300)]
    ci_ok = abs(hw[0] - 0.94) <= 0.01 and abs(hw[1] - 2.13) <= 0.01
    r = np.random.default_rng(5)
    auc_err = 0.0
    for _ in range(20):
        y = r.integers(0, 2, 150)
        y[:2] = [0, 1]
        s = np.round(r.random(150), 2)
        auc_err = max(auc_err, abs(auc_trapezoid(*roc_curve(y, s)[:2]) - pair_counting_auc(y, s)))
    record(5, prf_ok and ci_ok and auc_err <= 1e-9,
           f"P/R/F1 {p:.2f}/{rc:.2f}/{f:.2f}, Wald halfwidths {hw[0]:.2f}/{hw[1]:.2f}, AUC err {auc_err:.1e}")


def _ensemble_accuracy(bundle, test):
    probs = [predict_proba(s.model, test.images) for s in bundle.snapshots]
    pset = PredictionSet.from_snapshots(probs)
    soft, mean = soft_ensemble(pset)
    singles = [float(np.mean(single_snapshot(pset, i) == test.labels)) for i in range(len(probs))]
    return float(np.mean(soft == test.labels)), singles, soft, mean


@pytest.mark.slow
def test_criterion_6_toy_run(toy_run):
    n_params = param_count(toy_run.bundle.snapshots[0].model)
    soft_acc, singles, _, _ = _ensemble_accuracy(toy_run.bundle, toy_run.test)
    mean_single = float(np.mean(singles))
    n_train = len(toy_run.train) + len(toy_run.val)
    ok = (n_params <= 200_000 and n_train == 150 and len(toy_run.test) == 150
          and soft_acc >= 0.95 and soft_acc >= mean_single - 0.01 and toy_run.seconds <= 600)
    record(6, ok, f"{n_params:,} params, soft test acc {soft_acc:.3f}, mean single {mean_single:.3f}, "
                  f"train+eval {toy_run.seconds:.0f}s on 1 core")


@pytest.mark.slow
def test_criterion_7_gradcam(toy_run):
    A = np.array([[[1.0, 2.0], [0.0, -1.0]], [[0.5, 0.0], [3.0, 1.0]]])
    dA = np.array([[[0.2, 0.4], [0.0, 0.2]], [[-0.1, -0.3], [0.1, -0.1]]])
    hand = np.array([[0.15, 0.4], [0.0, 0.0]])
    oracle_err = float(np.max(np.abs(cam_from_gradients(A, dA) - hand)))

    model = toy_run.bundle.snapshots[-1].model
    test = toy_run.test
    pred = predict_proba(model, test.images).argmax(1)
    picks = np.flatnonzero((test.labels == 0) & (pred == 0))
    masses, nonneg = [], True
    for i in picks:
        heat = compute_cam(model, np.repeat(test.images[i][None], 3, axis=0), 0)
        nonneg &= bool(np.all(heat.upsampled >= 0) and np.all(heat.raw >= 0))
        masses.append(quadrant_mass(heat.upsampled, "upper-left"))
    mean_mass = float(np.mean(masses)) if masses else 0.0
    ok = oracle_err <= 1e-10 and len(picks) >= 20 and mean_mass >= 0.5 and nonneg
    record(7, ok, f"hand oracle err {oracle_err:.1e}, {len(picks)} correct class-0 samples, "
                  f"mean upper-left mass {mean_mass:.3f}, nonnegative {nonneg}")


@pytest.mark.slow
def test_criterion_8_determinism(toy_corpus, toy_run, tmp_path):
    _, train_m, test_m = toy_corpus
    again = run_toy(train_m, test_m, seed=0)
    a, b = toy_run.bundle.snapshots, again.bundle.snapshots
    snaps_equal = len(a) == len(b) and all(
        encode_tensors(x.model.tensors(), 4) == encode_tensors(y.model.tensors(), 4) for x, y in zip(a, b))

    def report(bundle):
        _, _, labels, mean = _ensemble_accuracy(bundle, toy_run.test)
        return evaluate_predictions(toy_run.test.labels, labels, mean, CLASSES).to_csv()
    reports_equal = report(toy_run.bundle) == report(again.bundle)

    save_run(tmp_path / "run", toy_run.bundle, CLASSES)
    loaded, _ = load_run(tmp_path / "run")
    roundtrip = all(encode_tensors(x.model.tensors(), 4) == encode_tensors(y.model.tensors(), 4)
                    for x, y in zip(a, loaded.snapshots))
    files_equal = all((tmp_path / "run" / f"snapshot_{s.cycle}.ecov").read_bytes()
                      == encode_tensors(t.model.tensors(), 4) for s, t in zip(a, b))
    ok = snaps_equal and reports_equal and roundtrip and files_equal
    record(8, ok, f"snapshots bit-identical {snaps_equal and files_equal}, reports identical {reports_equal}, "
                  f"save/load exact {roundtrip}")
