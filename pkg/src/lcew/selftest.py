"""Quick oracle checks run by ``lcew selftest``."""

from __future__ import annotations

import math

import numpy as np

from . import collision as col
from . import graphkernels as gk
from . import stgcnn


def check_gradients(seed: int = 0, models: int = 5) -> tuple[bool, str]:
    worst = 0.0
    for k in range(models):
        rng = np.random.default_rng(seed + k)
        N, T, F = int(rng.integers(2, 6)), int(rng.integers(5, 9)), int(rng.integers(2, 9))
        cfg = stgcnn.ModelConfig(T=T, F=F, d_hidden=4, seed=seed + k)
        params = stgcnn.ModelParams.init(cfg)
        for name in params:
            if name.endswith((".b", ".alpha")):
                params.tensors[name] = rng.normal(0.0, 0.3, params[name].shape)
        hist = np.cumsum(rng.normal(0, 1, (T, 2, N)), axis=0)
        A = stgcnn.scene_adjacency(hist, "l2")
        worst = max(worst, stgcnn.gradient_check(params, hist, A, rng.normal(0, 3, (F, 2, N))))
    return worst < 1e-4, f"worst relative error {worst:.2e} over {models} models"


def check_sat(seed: int = 0, pairs: int = 2000) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    bad = checked = 0
    for _ in range(pairs):
        a = col.OBB(tuple(rng.uniform(-3, 3, 2)), rng.uniform(1, 3), rng.uniform(0.5, 1.2), 0.0)
        b = col.OBB(tuple(rng.uniform(-3, 3, 2)), rng.uniform(1, 3), rng.uniform(0.5, 1.2),
                    rng.uniform(-math.pi / 6, math.pi / 6))
        gap = col.exact_gap(a, b)
        if abs(gap) < 1e-9:
            continue
        checked += 1
        bad += col.sat_collide(a, b) != (gap < 0)
    return bad == 0, f"{checked - bad}/{checked} pairs agree with the exact rectangle test"


def check_mi(seed: int = 0, runs: int = 5) -> tuple[bool, str]:
    rho, n, bins = 0.9, 2000, 16
    cov = [[1.0, rho], [rho, 1.0]]
    vals = []
    for k in range(runs):
        xy = np.random.default_rng(seed + k).multivariate_normal([0, 0], cov, size=n)
        vals.append(gk.histogram_mi(xy[:, 0], xy[:, 1], bins).value)
    truth = -0.5 * math.log(1 - rho ** 2)
    mean = float(np.mean(vals))
    return abs(mean - truth) <= 0.25, f"mean {mean:.3f} vs analytic {truth:.3f}"


def run_all(seed: int = 0) -> list[tuple[str, bool, str]]:
    out = []
    for name, fn in (("gradients", check_gradients), ("sat", check_sat), ("mutual information", check_mi)):
        ok, detail = fn(seed)
        out.append((name, ok, detail))
    return out
