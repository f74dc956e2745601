"""Acceptance criteria 1-12, one test each.

Every test records its outcome in ``conftest.ACCEPTANCE`` before asserting,
and the terminal summary prints one PASS/FAIL line per criterion. Run the
module on its own with ``python3 tests/test_acceptance.py`` or
``pytest tests/test_acceptance.py``.
"""

import math
import sys
import time
from collections import Counter

import numpy as np
import pytest
from scipy import stats

from pfsam import diffengine as de
from pfsam import model as mdl
from pfsam import objectives as obj
from pfsam import optim as O
from pfsam import perturb as P
from pfsam.analysis import information as info
from pfsam.analysis import rank
from pfsam.analysis import thresholds as thr
from pfsam.analysis.sharpness import power_iteration_sharpness
from pfsam.analysis.snapshot import OutputSnapshot
from pfsam.cli import main
from pfsam.config import RunConfig
from pfsam.model import ModelConfig
from pfsam.training import train
from conftest import ACCEPTANCE, QuadraticTask, central_difference, linear_ce_grad, random_task, relative_error


def record(num: int, passed: bool, desc: str) -> None:
    ACCEPTANCE[num] = (bool(passed), desc)
    print(f"criterion {num:2d}: {'PASS' if passed else 'FAIL'}  {desc}")


def softmax_rows(z):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


# --- 1: gradient correctness ----------------------------------------------------------

LOSSES = ["ce", "sigmoid_ce", "ce_label_smooth", "uniform_ce", "obf", "sigmoid_obf"]


def _loss_builder(task, name, X, y, alpha):
    def build(graph, theta):
        z = mdl.logits(task.model, theta, X)
        if name == "ce":
            return obj.ce_loss(z, y)
        if name == "sigmoid_ce":
            return obj.sigmoid_ce_loss(z, y)
        if name == "ce_label_smooth":
            return obj.ce_label_smooth(z, y, 0.1)
        if name == "uniform_ce":
            return obj.uniform_ce(z)
        if name == "obf":
            return obj.obf_objective(z, y, alpha)
        return obj.sigmoid_obf_objective(z, y, alpha)

    return build


def _fd_subset(builder, theta, coords, h=1e-5):
    out = np.empty(coords.size)
    for k, i in enumerate(coords):
        e = np.zeros_like(theta)
        e[i] = h
        out[k] = (_value(builder, theta + e) - _value(builder, theta - e)) / (2 * h)
    return out


def _value(builder, theta):
    graph = de.Graph()
    with graph.paused():
        return float(builder(graph, graph.leaf(theta)).value)


def test_criterion_01_gradient_correctness():
    rng = np.random.default_rng(101)
    start = time.perf_counter()
    worst = 0.0
    coords_checked = 0
    for _ in range(25):
        task = random_task(rng, max_layers=3, max_units=64)
        theta = np.asarray(mdl.init(task.model, int(rng.integers(1 << 30))))
        n = 6
        X = rng.standard_normal((n, task.model.input_dim))
        y = rng.integers(0, task.model.num_classes, n)
        # alpha is held constant during differentiation, so it is fixed here too
        z = mdl.predict_logits(task.model, theta, X)
        for name in LOSSES:
            lik = 1 / (1 + np.exp(-z)) if name == "sigmoid_obf" else softmax_rows(z)
            alpha = obj.dynamic_alpha(lik[np.arange(n), y], 1.0, 0.5 / task.model.num_classes)
            builder = _loss_builder(task, name, X, y, alpha)
            _, grad = de.value_and_grad(builder, theta)
            # every coordinate of small models; a seeded sample of 150 on large ones
            coords = np.arange(theta.size) if theta.size <= 150 else np.sort(
                rng.choice(theta.size, 150, replace=False))
            fd = _fd_subset(builder, theta, coords)
            worst = max(worst, relative_error(grad[coords], fd))
            coords_checked += coords.size
    elapsed = time.perf_counter() - start
    passed = worst < 1e-6 and elapsed < 30
    record(1, passed, f"25 MLPs x {len(LOSSES)} losses, {coords_checked} coordinates, "
                      f"max rel err {worst:.2e} (< 1e-6), {elapsed:.1f} s (< 30 s)")
    assert passed


# --- 2: HVP exactness and power iteration --------------------------------------------------


def _quadratic(A):
    def build(graph, theta):
        col = de.reshape(theta, (theta.shape[0], 1))
        return de.scale(de.sum_(de.mul(col, de.matmul(graph.constant(A), col))), 0.5)

    return build


def test_criterion_02_hvp_and_power_iteration():
    rng = np.random.default_rng(202)
    start = time.perf_counter()
    hvp_err = 0.0
    for _ in range(100):
        d = int(rng.integers(1, 33))
        A = rng.standard_normal((d, d))
        theta, v = rng.standard_normal(d), rng.standard_normal(d)
        expect = 0.5 * (A + A.T) @ v
        got = de.hvp(_quadratic(A), theta, v)
        hvp_err = max(hvp_err, float(np.abs(got - expect).max() / max(1.0, np.abs(expect).max())))
    eig_err = 0.0
    for _ in range(30):
        d = int(rng.integers(2, 33))
        # random orthogonal basis and spectrum, with the dominant magnitude separated by
        # |lambda_2| <= 0.8 |lambda_1| so 100 iterations suffice (ledgered)
        Q, _ = np.linalg.qr(rng.standard_normal((d, d)))
        top = rng.uniform(1.0, 10.0) * rng.choice([-1.0, 1.0])
        rest = rng.uniform(-0.8, 0.8, d - 1) * abs(top)
        A = (Q * np.concatenate([[top], rest])) @ Q.T
        res = power_iteration_sharpness(_quadratic(A), np.zeros(d), max_iters=100, rel_tol=1e-12,
                                        seed=int(rng.integers(1000)))
        eig_err = max(eig_err, abs(res.eigenvalue - top) / abs(top))
    elapsed = time.perf_counter() - start
    passed = hvp_err <= 1e-10 and eig_err <= 1e-6 and elapsed < 10
    record(2, passed, f"hvp max err {hvp_err:.1e} (<= 1e-10); power iteration max rel err {eig_err:.1e} "
                      f"(<= 1e-6) in <= 100 iterations; {elapsed:.1f} s (< 10 s)")
    assert passed


# --- 3: SAM two-pass oracle -------------------------------------------------------------

DUMMY = (np.zeros((1, 1)), np.zeros(1, dtype=np.int64))


def test_criterion_03_sam_oracle():
    rng = np.random.default_rng(303)
    worst = 0.0
    for _ in range(50):
        M = rng.standard_normal((2, 2))
        A, b = M @ M.T + 0.1 * np.eye(2), rng.standard_normal(2)
        theta = rng.standard_normal(2)
        rho, lr = rng.uniform(0.01, 0.5), rng.uniform(0.01, 0.2)
        g1 = A @ theta + b
        eps = rho * g1 / math.sqrt(g1 @ g1)
        expect = theta - lr * (A @ (theta + eps) + b)
        cfg = O.StepConfig(O.ScheduleSpec.constant(lr, 10))
        got = O.sam_step(QuadraticTask(A, b), theta, DUMMY, P.PerturbationSpec("steepest", rho), cfg,
                         O.OptimizerState("sgd_momentum", momentum=0.0))
        worst = max(worst, float(np.abs(got - expect).max()))
    # reductions to the vanilla step on a real model
    task = P.Task(ModelConfig(4, 3, (6,)))
    X, y = rng.standard_normal((10, 4)), rng.integers(0, 3, 10)
    theta = np.asarray(mdl.init(task.model, 0))
    cfg = O.StepConfig(O.ScheduleSpec.constant(0.1, 10), weight_decay=1e-3)
    vanilla = O.base_step(O.OptimizerState(), theta, task.grad(theta, X, y), 0.1, 1e-3)
    exact = []
    for spec in [P.PerturbationSpec("none", 0.2), P.PerturbationSpec("steepest", 0.0),
                 P.PerturbationSpec("obf", 0.0, m=3), P.PerturbationSpec("random", 0.0, m=5)]:
        got = O.sam_step(task, theta, (X, y), spec, cfg, O.OptimizerState())
        exact.append(got.tobytes() == vanilla.tobytes())
    passed = worst <= 1e-12 and all(exact)
    record(3, passed, f"two-pass oracle max err {worst:.1e} (<= 1e-12); rho=0 / kind=none bit-exact: {all(exact)}")
    assert passed


# --- 4: GSAM identities ---------------------------------------------------------------------


def test_criterion_04_gsam_identities():
    rng = np.random.default_rng(404)
    worst = 0.0
    for _ in range(100):
        d = int(rng.integers(2, 64))
        g_pert = rng.standard_normal(d) * 10 ** rng.uniform(-3, 3)
        g_sam = rng.standard_normal(d) * 10 ** rng.uniform(-3, 3)
        _, ortho = O.decompose(g_pert, g_sam)
        worst = max(worst, abs(ortho @ g_sam) / (np.linalg.norm(g_pert) * np.linalg.norm(g_sam)))
    fixture, _ = O.gsam_direction(np.array([1.0, 1.0]), np.array([1.0, 0.0]), 0.5)
    fixture_err = float(np.abs(fixture - [1.0, -0.5]).max())
    task = P.Task(ModelConfig(4, 3, (5,)))
    X, y = rng.standard_normal((12, 4)), rng.integers(0, 3, 12)
    theta = mdl.init(task.model, 1)
    exact = []
    for kind, m in [("steepest", None), ("steepest", 4), ("obf", 3), ("random", 6)]:
        spec = P.PerturbationSpec(kind, 0.1, m, seed=2)
        a = O.sam_step(task, theta, (X, y), spec, O.StepConfig(O.ScheduleSpec.constant(0.1, 9)), O.OptimizerState())
        b = O.sam_step(task, theta, (X, y), spec,
                       O.StepConfig(O.ScheduleSpec.constant(0.1, 9), gsam=O.GSAMConfig(0.0)), O.OptimizerState())
        exact.append(np.asarray(a).tobytes() == np.asarray(b).tobytes())
    passed = worst <= 1e-10 and fixture_err <= 1e-12 and all(exact)
    record(4, passed, f"orthogonality max {worst:.1e} (<= 1e-10); fixture err {fixture_err:.1e}; "
                      f"xi=0 bit-exact: {all(exact)}")
    assert passed


# --- 5: OBF algebra -----------------------------------------------------------------------


def _logit_grad(fn, z, *args):
    g = de.Graph()
    leaf = g.leaf(np.asarray(z, dtype=np.float64))
    (grad,) = de.backward(fn(leaf, *args), [leaf])
    return grad


def test_criterion_05_obf_algebra():
    rng = np.random.default_rng(505)
    err_alpha1 = 0.0
    invariant = True
    for _ in range(50):
        n, C = int(rng.integers(1, 8)), int(rng.integers(2, 7))
        z = rng.standard_normal((n, C)) * 2
        y = rng.integers(0, C, n)
        a1 = _logit_grad(obj.obf_objective, z, y, 1.0)
        err_alpha1 = max(err_alpha1, float(np.abs(a1 + _logit_grad(obj.uniform_ce, z)).max()))
        z2 = z + rng.standard_normal((n, C)) * (1 - np.eye(C)[y])  # only non-target logits move
        g0, g0b = _logit_grad(obj.obf_objective, z, y, 0.0), _logit_grad(obj.obf_objective, z2, y, 0.0)
        invariant &= bool(np.abs(g0 - g0b).max() <= 1e-15)
    boundary = (obj.dynamic_alpha(0.3, 0.8, 0.3) == 0.0 and obj.dynamic_alpha(1.0, 0.8, 0.3) == 0.8
                and obj.dynamic_alpha(1.0, 1.0, 0.0) == 1.0)
    fixture = abs(obj.dynamic_alpha(0.75, 1.0, 0.5) - 2 / 3)
    passed = err_alpha1 <= 1e-12 and invariant and boundary and fixture <= 1e-12
    record(5, passed, f"alpha=1 vs -grad uniform_ce max err {err_alpha1:.1e}; alpha=0 invariant: {invariant}; "
                      f"boundaries exact: {boundary}; 2/3 fixture err {fixture:.1e}")
    assert passed


# --- 6: m-SAM reduction ---------------------------------------------------------------------


def test_criterion_06_msam_reduction():
    rng = np.random.default_rng(606)
    exact = []
    for kind in ["steepest", "obf", "random"]:
        for asam in ["off", "standard", "fixed_norm"]:
            task = random_task(rng, max_units=16)
            theta = np.asarray(mdl.init(task.model, 0))
            X = rng.standard_normal((9, task.model.input_dim))
            y = rng.integers(0, task.model.num_classes, 9)
            spec = P.PerturbationSpec(kind, 0.1, m=9, asam=asam, seed=3)
            res = P.perturb(task, theta, X, y, spec, 0.1, P._random_seed(3, 0, 0))
            expect = task.grad(theta + res.eps, X, y)
            exact.append(P.msam(task, theta, (X, y), spec).sam_grad.tobytes() == expect.tobytes())
    worst = 0.0
    for trial in range(20):
        task = P.Task(ModelConfig(3, 3))
        theta = rng.standard_normal(12)
        X, y = rng.standard_normal((4, 3)), rng.integers(0, 3, 4)
        spec = P.PerturbationSpec("steepest", 0.2, m=2, seed=trial)
        order = np.random.default_rng([trial, 7]).permutation(4)
        manual = np.zeros(12)
        for idx in (order[:2], order[2:]):
            g = linear_ce_grad(theta, X[idx], y[idx], 3, 3)
            manual += linear_ce_grad(theta + 0.2 * g / np.linalg.norm(g), X[idx], y[idx], 3, 3)
        got = P.msam(task, theta, (X, y), spec, step=7).sam_grad
        worst = max(worst, float(np.abs(got - manual / 2).max()))
    passed = all(exact) and worst <= 1e-12
    record(6, passed, f"m=n bit-exact: {all(exact)} ({len(exact)} cases); n=4 m=2 oracle max err {worst:.1e}")
    assert passed


# --- 7: MI estimator oracles ------------------------------------------------------------------


def _joint_histogram_h(codes, labels):
    joint = Counter(zip(labels.tolist(), codes.tolist()))
    marg = Counter(labels.tolist())
    n = len(labels)
    return -sum(c / n * math.log2(c / marg[y]) for (y, _), c in joint.items())


def test_criterion_07_mi_oracles():
    rng = np.random.default_rng(707)
    fixture = abs(info.conditional_mi(np.array([1, 2, 1, 1]), np.array([0, 0, 1, 1])) - 0.5)
    worst = 0.0
    for _ in range(50):
        n, C = int(rng.integers(1, 65)), int(rng.integers(2, 7))
        snap = OutputSnapshot(0, rng.integers(0, C, n), softmax_rows(rng.standard_normal((n, C)) * 3), [])
        for t in info.default_thresholds()[::9]:
            codes = info.bin_outputs(snap.unperturbed, t)
            worst = max(worst, abs(info.conditional_mi(codes, snap.labels) - _joint_histogram_h(codes, snap.labels)))
    labels = np.array([0, 1] * 16)
    bijective = info.target_mi(labels * 3 + 5, labels)
    passed = fixture <= 1e-12 and worst <= 1e-12 and bijective == 1.0
    record(7, passed, f"0.5-bit fixture err {fixture:.1e}; joint-histogram max err {worst:.1e} on 50 snapshots; "
                      f"bijective target_mi = {bijective!r}")
    assert passed


# --- 8: rank statistics ------------------------------------------------------------------------


def _brute_tau(x, y):
    k = len(x)
    conc = disc = tx = ty = 0
    for i in range(k):
        for j in range(i + 1, k):
            dx, dy = (x[i] > x[j]) - (x[i] < x[j]), (y[i] > y[j]) - (y[i] < y[j])
            tx += dx == 0
            ty += dy == 0
            conc += dx * dy > 0
            disc += dx * dy < 0
    P_ = k * (k - 1) // 2
    return (conc - disc) / math.sqrt((P_ - tx) * (P_ - ty))


def test_criterion_08_rank_statistics():
    rng = np.random.default_rng(808)
    start = time.perf_counter()
    mismatches = 0
    cases = 0
    while cases < 200:
        k = int(rng.integers(2, 201))
        tied = rng.random() < 0.5
        x = (rng.integers(0, max(2, k // 4), k) if tied else rng.permutation(k)).astype(float).tolist()
        y = (rng.integers(0, max(2, k // 4), k) if rng.random() < 0.5 else rng.standard_normal(k)).tolist()
        if len(set(x)) < 2 or len(set(y)) < 2:
            continue
        cases += 1
        mismatches += rank.kendall_tau(x, y) != _brute_tau(x, y)
    ks_rng = np.random.default_rng(8080)
    ps = [rank.permutation_p(ks_rng.standard_normal(20), ks_rng.standard_normal(20), 999, seed=t)
          for t in range(500)]
    ks = stats.kstest(ps, "uniform").pvalue
    elapsed = time.perf_counter() - start
    passed = mismatches == 0 and ks > 0.01 and elapsed < 60
    record(8, passed, f"kendall exact on {cases} cases ({mismatches} mismatches); KS p-value {ks:.3f} "
                      f"(> 0.01, 500 trials, k=20, n_perm=999); {elapsed:.1f} s (< 60 s)")
    assert passed


# --- 9: threshold adjustment ------------------------------------------------------------------


def test_criterion_09_threshold_adjustment():
    rng = np.random.default_rng(909)
    worst_level = 0.0
    for _ in range(20):
        n, C = 200, int(rng.integers(2, 7))
        labels = rng.integers(0, C, n)
        adj = thr.adjust_thresholds(info.curve(softmax_rows(rng.standard_normal((n, C)) * 4), labels))
        ok = adj.reached
        worst_level = max(worst_level, float(np.abs(adj.cond_unperturbed[ok] - (1 - adj.levels[ok])).max()))
    t = np.linspace(0.0, 1.0, 11)
    curve = info.MICurve(t, np.interp(t, [0.0, 0.2, 0.6, 1.0], [0.5, 2.0, 0.5, 0.0]), np.zeros(11))
    adj = thr.adjust_thresholds(curve)
    u = 1 - adj.levels
    inverse = np.where(u >= 0.25, 0.2 + (1 - u) / 0.75 * 0.4, 0.6 + (0.25 - u) / 0.25 * 0.4)
    inv_err = float(np.abs(adj.thresholds - inverse).max())
    worst_level = max(worst_level, float(np.abs(adj.cond_unperturbed - u).max()))
    passed = worst_level <= 1e-9 and inv_err <= 1e-9
    record(9, passed, f"resampled curve vs 1-s max err {worst_level:.1e}; analytic inverse max err {inv_err:.1e}")
    assert passed


# --- 10/11: desk-scale studies ------------------------------------------------------------------

SEEDS = range(10)


@pytest.fixture(scope="module")
def study(tmp_path_factory):
    root = tmp_path_factory.mktemp("study")
    cache = {}

    def run(kind, m, seed):
        key = (kind, m, seed)
        if key not in cache:
            base = RunConfig()
            pert = base.perturbation.model_copy(update={"kind": kind, "m": m})
            cfg = base.model_copy(update={"perturbation": pert, "seed": seed,
                                          "out": str(root / f"{kind}_m{m}_s{seed}")})
            t0 = time.perf_counter()
            res = train(RunConfig.model_validate(cfg.model_dump()))
            cache[key] = (res.train_accuracy, res.test_accuracy, time.perf_counter() - t0)
        return cache[key]

    return run


def test_criterion_10_directional_generalization(study):
    start = time.perf_counter()
    van = np.array([study("none", None, s) for s in SEEDS])
    ste = np.array([study("steepest", None, s) for s in SEEDS])
    obf_ = np.array([study("obf", None, s) for s in SEEDS])
    elapsed = time.perf_counter() - start
    gap = 100 * np.median(van[:, 0] - van[:, 1])
    v_test, s_test, o_test = (100 * np.median(a[:, 1]) for a in (van, ste, obf_))
    checks = {"a": bool(gap >= 3.0), "b": bool(s_test >= v_test - 0.5), "c": bool(o_test >= s_test - 1.0),
              "time": elapsed < 600}
    passed = all(checks.values())
    record(10, passed, f"vanilla gap {gap:.2f} pts (>= 3); test acc vanilla {v_test:.2f} / steepest {s_test:.2f} "
                       f"/ obf {o_test:.2f}; checks {checks}; {elapsed:.0f} s (< 600 s)")
    assert passed


def test_criterion_11_m_sharpness_direction(study):
    start = time.perf_counter()
    full = np.array([study("steepest", None, s) for s in SEEDS])
    m1 = np.array([study("steepest", 1, s) for s in SEEDS])
    elapsed = time.perf_counter() - start
    acc_full, acc_m1 = 100 * np.median(full[:, 1]), 100 * np.median(m1[:, 1])
    passed = acc_m1 >= acc_full
    # reported, not gating: a failure is logged for investigation
    record(11, passed, f"steepest median test acc m=1 {acc_m1:.2f} vs m=full {acc_full:.2f} "
                       f"(reported, not gating); {elapsed:.0f} s")
    if not passed:
        pytest.xfail("m-sharpness direction not reproduced at desk scale (reported criterion)")


# --- 12: end-to-end determinism ------------------------------------------------------------------


def test_criterion_12_end_to_end_determinism(tmp_path):
    cfg = {
        "perturbation": {"kind": "obf", "rho": 0.1, "m": 10},
        "data": {"spurious": {"n_train": 400, "n_test": 200}},
        "epochs": 4,
        "snapshot_every": 2,
        "log_every": 3,
        "seed": 12,
    }
    import json

    path = tmp_path / "run.json"
    path.write_text(json.dumps(cfg))
    codes = [main(["train", "--config", str(path), "--out", str(tmp_path / name)]) for name in ("a", "b")]
    files = ["metrics.csv", "checkpoints/epoch_0000.ckpt", "checkpoints/epoch_0002.ckpt",
             "checkpoints/epoch_0004.ckpt", "checkpoints/final.ckpt", "snapshots/epoch_0004.snap"]
    same = [(tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files]
    passed = codes == [0, 0] and all(same)
    record(12, passed, f"two training runs, {sum(same)}/{len(files)} artifacts byte-identical "
                       f"(metrics.csv and checkpoints)")
    assert passed


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", "-s"]))
