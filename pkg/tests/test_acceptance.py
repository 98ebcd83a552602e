"""Acceptance criteria, one test per criterion.

Each test prints (and records for the session summary) a single PASS/FAIL
line with the measured quantities, then asserts the criterion.
"""

import math
import time

import numpy as np
import pytest
from shapely.geometry import Polygon

from lcew import collision as col
from lcew import evaluation as ev
from lcew import graphkernels as gk
from lcew import safety as sf
from lcew import stgcnn
from lcew.microsim import SimConfig, run_sim

from conftest import ACCEPTANCE_LINES, overfit_scene


def report(number, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


# ---------------------------------------------------------------------------
# 1. gradient exactness


def test_01_gradient_exactness():
    t0 = time.perf_counter()
    worst, models = 0.0, 20
    for k in range(models):
        rng = np.random.default_rng(1000 + k)
        N, T, F = int(rng.integers(2, 6)), int(rng.integers(3, 9)), int(rng.integers(1, 9))
        cfg = stgcnn.ModelConfig(T=T, F=F, d_hidden=int(rng.integers(2, 6)), gcn_layers=1 + k % 2,
                                 txp_layers=1 + k % 3, txp_kernel=(1, 3, 5)[k % 3])
        params = stgcnn.ModelParams.init(cfg, seed=k)
        for name in params:
            if name.endswith((".b", ".alpha")):
                params.tensors[name] = rng.normal(0.0, 0.3, params[name].shape)
        hist = np.cumsum(rng.normal(0, 1, (T, 2, N)), axis=0)
        A = stgcnn.scene_adjacency(hist, ("mi", "l2", "long")[k % 3])
        worst = max(worst, stgcnn.gradient_check(params, hist, A, rng.normal(0, 3, (F, 2, N))))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4 and elapsed < 60
    assert report(1, ok, f"{models} models, worst relative gradient error {worst:.2e} (< 1e-4), {elapsed:.1f} s")


# ---------------------------------------------------------------------------
# 2. mutual information oracle


def test_02_mutual_information_oracle():
    rho, n, bins = 0.9, 2000, 16
    truth = -0.5 * math.log(1 - rho ** 2)
    gauss, indep, identity_err = [], [], 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        z = rng.multivariate_normal([0, 0], [[1, rho], [rho, 1]], size=n)
        u = rng.random((2, n))
        for a, b, out in ((z[:, 0], z[:, 1], gauss), (u[0], u[1], indep)):
            est = gk.histogram_mi(a, b, bins)
            out.append(est.value)
            h_joint, h_ab, h_ba = gk.conditional_entropies(a, b, bins)
            identity_err = max(identity_err, abs((h_joint - h_ab - h_ba) - (est.h_a + est.h_b - est.h_joint)))
    mean = float(np.mean(gauss))
    worst_indep = float(np.max(np.abs(indep)))
    ok = abs(mean - truth) <= 0.25 and worst_indep <= 0.1 and identity_err < 1e-9
    assert report(2, ok, f"Gaussian mean {mean:.3f} vs {truth:.3f} (+-0.25); max |I| independent "
                         f"{worst_indep:.3f} (<= 0.1); identity error {identity_err:.1e} (< 1e-9)")


# ---------------------------------------------------------------------------
# 3. separating-axis oracle


def _box(rng, rotated):
    heading = rng.uniform(-math.pi / 6, math.pi / 6) if rotated else 0.0
    return col.OBB(tuple(rng.uniform(-4, 4, 2)), rng.uniform(1.0, 3.0), rng.uniform(0.5, 1.2), heading)


def _exact(a, b):
    pa, pb = Polygon(a.corners()), Polygon(b.corners())
    return pa.intersects(pb) and not pa.touches(pb)


def test_03_sat_oracle():
    rng = np.random.default_rng(2024)
    agree = checked = 0
    for _ in range(10_000):
        a, b = _box(rng, False), _box(rng, True)
        if rng.random() < 0.5:
            a, b = b, a
        if abs(col.sat_gap(a, b)) < 1e-9:
            continue
        checked += 1
        agree += col.sat_collide(a, b) == _exact(a, b)
    # both boxes rotated: measured only
    disagree = rotated = 0
    for _ in range(10_000):
        a, b = _box(rng, True), _box(rng, True)
        if abs(col.sat_gap(a, b)) < 1e-9:
            continue
        rotated += 1
        disagree += col.sat_collide(a, b) != _exact(a, b)
    ok = agree == checked and checked > 9_900
    assert report(3, ok, f"one lane-aligned box: {agree}/{checked} agree with polygon intersection; "
                         f"both rotated: disagreement {disagree / rotated:.2%} ({disagree}/{rotated}, reported)")


# ---------------------------------------------------------------------------
# 4. metric oracle


def _loop_metrics(pred, truth):
    F, _, N = pred.shape
    d, ex, ey = [], [], []
    for f in range(F):
        for n in range(N):
            dx, dy = pred[f, 0, n] - truth[f, 0, n], pred[f, 1, n] - truth[f, 1, n]
            d.append(math.sqrt(dx * dx + dy * dy))
            ex.append(dx * dx)
            ey.append(dy * dy)
    fde = sum(d[(F - 1) * N + n] for n in range(N)) / N
    return sum(d) / len(d), fde, math.sqrt(sum(ex) / len(ex)), math.sqrt(sum(ey) / len(ey))


def test_04_metric_oracle():
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        F, N = int(rng.integers(1, 30)), int(rng.integers(1, 10))
        pred, truth = rng.normal(0, 10, (F, 2, N)), rng.normal(0, 10, (F, 2, N))
        rep = sf.prediction_errors(pred, truth)
        got = (rep.ade, rep.fde, rep.rmse_x, rep.rmse_y)
        worst = max(worst, max(abs(g - w) for g, w in zip(got, _loop_metrics(pred, truth))))
    r = sf.prediction_errors(np.array([[[3.0], [4.0]]]), np.zeros((1, 2, 1)))
    degenerate = (r.ade, r.fde, r.rmse_x, r.rmse_y)
    ok = worst <= 1e-12 and degenerate == (5.0, 5.0, 3.0, 4.0)
    assert report(4, ok, f"100 instances, worst deviation {worst:.1e} (<= 1e-12); (3,4) case gives {degenerate}")


# ---------------------------------------------------------------------------
# 5. overfit sanity and learning-rate schedule


def test_05_overfit_and_schedule():
    sc = overfit_scene(T=8, F=12, N=4)
    # constant learning rate for the overfit run; the step schedule is checked separately below
    cfg = stgcnn.ModelConfig(T=8, F=12, epochs=2000, lr_drop_epoch=10 ** 9, seed=0)
    t0 = time.perf_counter()
    _, rep = stgcnn.train([sc], "mi", cfg, max_steps=2000)
    elapsed = time.perf_counter() - t0
    final = rep.epochs[-1]["train_loss"]

    default = stgcnn.ModelConfig(T=8, F=12)
    _, sched = stgcnn.train([sc], "mi", default)
    lrs = [e["lr"] for e in sched.epochs]
    schedule_ok = (len(lrs) == 100 and all(lr == 0.01 for lr in lrs[:50])
                   and all(lr == 0.002 for lr in lrs[50:]))
    ok = final < 1e-3 and rep.steps <= 2000 and elapsed < 60 and schedule_ok
    assert report(5, ok, f"final loss {final:.2e} after {rep.steps} steps (< 1e-3) in {elapsed:.1f} s; "
                         f"lr 0.01 for epochs 1-50 then 0.002: {schedule_ok}")


# ---------------------------------------------------------------------------
# 6. permutation equivariance


def test_06_permutation_equivariance():
    worst = 0.0
    for N in range(2, 9):
        rng = np.random.default_rng(N)
        cfg = stgcnn.ModelConfig(T=8, F=8)
        params = stgcnn.ModelParams.init(cfg, seed=N)
        for name in params:
            if name.endswith(".b"):
                params.tensors[name] = rng.normal(0.0, 0.3, params[name].shape)
        hist = np.cumsum(rng.normal(0, 1, (8, 2, N)), axis=0)
        for kind in ("mi", "l2", "long"):
            perm = rng.permutation(N)
            a = stgcnn.predict(hist, params, kind)
            b = stgcnn.predict(hist[:, :, perm], params, kind)
            worst = max(worst, float(np.max(np.abs(b - a[:, :, perm]))))
    assert report(6, worst <= 1e-9, f"N = 2..8, three kernels, max abs deviation {worst:.1e} (<= 1e-9)")


# ---------------------------------------------------------------------------
# 7. kernel comparison harness

COMPARE_EPOCHS = 100


@pytest.mark.slow
def test_07_kernel_comparison():
    t0 = time.perf_counter()
    corpus = ev.build_corpus(SimConfig(seed=100, warmup=60.0, duration=300.0), T=20, F=40, stride=10,
                             min_scenes=200)
    rep = ev.compare_kernels(corpus, stgcnn.ModelConfig(epochs=COMPARE_EPOCHS), seed=0)
    print(ev.table_text(rep))
    wins = ev.beats_persistence(rep)
    shape_ok = ({(r["model"], r["horizon"]) for r in rep["rows"]} ==
                {(m, h) for m in ("persistence", "stgcnn-mi", "stgcnn-long", "stgcnn-l2") for h in ev.HORIZONS})
    losers = [f"{m}@{h}" for (m, h), w in wins.items() if not w]
    ok = len(corpus) >= 200 and shape_ok and not losers
    assert report(7, ok, f"{len(corpus)} scenes from {len(corpus.events)} events; 3 kernels x 4 horizons; "
                         f"{sum(wins.values())}/{len(wins)} beat persistence on ADE"
                         f"{' (not: ' + ', '.join(losers) + ')' if losers else ''}; "
                         f"{time.perf_counter() - t0:.0f} s")


# ---------------------------------------------------------------------------
# 8-9. simulator


SEEDS = list(range(1, 11))


@pytest.fixture(scope="module")
def matched_runs():
    t0 = time.perf_counter()
    none = {s: run_sim(SimConfig(seed=s, method="none", penetration=0.25)) for s in SEEDS}
    lcew = {s: run_sim(SimConfig(seed=s, method="lcew", penetration=0.25)) for s in SEEDS}
    return none, lcew, time.perf_counter() - t0


@pytest.mark.slow
def test_08_determinism_and_conservation(matched_runs):
    none, lcew, _ = matched_runs
    repeat = run_sim(SimConfig(seed=SEEDS[0], method="lcew", penetration=0.25))
    identical = repeat.to_json() == lcew[SEEDS[0]].to_json()
    conserved = all(r.spawned == r.exited + r.remaining for runs in (none, lcew) for r in runs.values())
    collisions = sum(len(r.collisions) for r in none.values())
    ok = identical and conserved and collisions == 0
    assert report(8, ok, f"same seed bit-identical: {identical}; spawned = exited + remaining in all "
                         f"{2 * len(SEEDS)} runs: {conserved}; collisions without warnings over "
                         f"{len(SEEDS)} seeds: {collisions}")


@pytest.mark.slow
def test_09_directional_safety_effect(matched_runs):
    none, lcew, elapsed = matched_runs
    pooled_none = [d for r in none.values() for d in r.equipped_lc_drac()]
    pooled_lcew = [d for r in lcew.values() for d in r.equipped_lc_drac()]
    q_none = float(np.quantile(pooled_none, 0.95))
    q_lcew = float(np.quantile(pooled_lcew, 0.95))
    per_seed = []
    for s in SEEDS:
        a, b = none[s].equipped_lc_drac(), lcew[s].equipped_lc_drac()
        per_seed.append(f"{s}:{np.quantile(a, 0.95):.2f}/{np.quantile(b, 0.95):.2f}" if a and b else f"{s}:n/a")
    print("per-seed q95 max DRAC (none/lcew):", " ".join(per_seed))
    thr = {name: np.mean([r.throughput for r in runs.values()]) for name, runs in (("none", none), ("lcew", lcew))}
    crashes = sum(len(r.collisions) for r in lcew.values())
    ok = q_lcew <= q_none and elapsed < 600
    assert report(9, ok, f"q95 max DRAC of equipped LC vehicles: LCEW {q_lcew:.3f} <= none {q_none:.3f} "
                         f"m/s^2 over {len(SEEDS)} seeds ({len(pooled_lcew)}/{len(pooled_none)} vehicles); "
                         f"per seed none/lcew {' '.join(per_seed)}; mean throughput none {thr['none']:.1f}, "
                         f"lcew {thr['lcew']:.1f}; collisions with LCEW {crashes}; {elapsed:.0f} s")


# ---------------------------------------------------------------------------
# 10. risk taxonomy


def _state(x, v, lane=1):
    return sf.VehicleState(lane, x, v, 4.5)


def test_10_risk_taxonomy():
    scene = {"up2": _state(0.0, 25.0), "up1": _state(20.0, 20.0), "ego": _state(50.0, 20.0),
             "lead": _state(62.0, 14.0), "down": _state(80.0, 10.0)}
    _, counts = sf.classify_risks([sf.Snapshot(0.0, "ego", scene)])
    triple = (counts[sf.RiskCategory.DIRECT], counts[sf.RiskCategory.INDIRECT_FORWARD],
              counts[sf.RiskCategory.INDIRECT_REAR])
    rng = np.random.default_rng(10)
    partitions, hazardous = 0, 0
    for k in range(1000):
        n = int(rng.integers(2, 12))
        veh = {i: _state(float(rng.uniform(0, 300)), float(rng.uniform(0, 35)), int(rng.integers(0, 3)))
               for i in range(n)}
        target = [None, 0, 1, 2][k % 4]
        records, c = sf.classify_risks([sf.Snapshot(0.0, 0, veh, target_lane=target)])
        hazardous += len(records)
        keys = {(r.pair, r.category) for r in records}
        partitions += sum(c.values()) == len(records) == len(keys) and all(r.ttc < 5.0 for r in records)
    ok = triple == (1, 1, 1) and partitions == 1000
    assert report(10, ok, f"constructed scene counts {triple} (expect (1, 1, 1)); partition holds on "
                          f"{partitions}/1000 random scenes ({hazardous} hazardous records)")
