"""Scene corpora recorded from the simulator and the kernel-comparison harness.

The harness trains one model per (kernel, horizon) on the same scenes,
split by lane-change event so that no event contributes to more than one
split, and scores every model and the last-position baseline on the test
scenes.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import graphkernels as gk
from . import stgcnn
from .microsim import SimConfig, SimResult, run_sim
from .safety import pooled_errors
from .trajdata import LaneGeometry, VehicleTrack, extract_lc_events, make_scene_windows, pad_event

logger = logging.getLogger(__name__)

HORIZONS = (15, 20, 30, 40)
KINDS = (gk.KernelKind.MI, gk.KernelKind.LONGITUDINAL, gk.KernelKind.L2)
METRICS = ("ade", "fde", "rmse_x", "rmse_y")


def sim_tracks(result: SimResult, dt: float = 0.1) -> list[VehicleTrack]:
    """Recorded simulator trajectories as tracks (needs ``record_trajectories``)."""
    if result.trajectories is None:
        raise ValueError("simulation was run without trajectory recording")
    rows = np.asarray(result.trajectories, dtype=float)
    if rows.size == 0:
        return []
    order = np.lexsort((rows[:, 1], rows[:, 0]))
    rows = rows[order]
    ids, starts = np.unique(rows[:, 0].astype(int), return_index=True)
    tracks = []
    for vid, s, e in zip(ids, starts, list(starts[1:]) + [len(rows)]):
        r = rows[s:e]
        if r.shape[0] < 2:
            continue
        t = r[:, 1] * dt
        vx = np.gradient(r[:, 2], t)
        vy = np.gradient(r[:, 3], t)
        tracks.append(VehicleTrack(int(vid), float(r[0, 4]), float(r[0, 5]), t, r[:, 2], r[:, 3], vx, vy))
    return tracks


@dataclass
class Corpus:
    scenes: list
    event_index: list  # event number of each scene
    events: list

    def __len__(self) -> int:
        return len(self.scenes)


def build_corpus(config: SimConfig, T: int = 20, F: int = 40, stride: int = 10,
                 min_scenes: int = 200, max_runs: int = 5) -> Corpus:
    """Record simulator runs until the scene windows reach ``min_scenes``.

    Each run uses seed ``config.seed + k``. Events come from the same
    lane-change extraction applied to recorded data.
    """
    lanes = LaneGeometry.straight(3, config.lane_width, length=2 * config.road_length, first_id=0)
    scenes, owner, events = [], [], []
    for k in range(max_runs):
        cfg = replace(config, seed=config.seed + k, record_trajectories=True)
        result = run_sim(cfg)
        tracks = sim_tracks(result, cfg.dt)
        by_id = {tr.id: tr for tr in tracks}
        for ev in extract_lc_events(tracks, lanes):
            ev = pad_event(ev, T * cfg.dt, F * cfg.dt, by_id[ev.ego_id])
            windows = make_scene_windows(ev, tracks, lanes, T=T, F=F, stride=stride)
            if not windows:
                continue
            for sc in windows:
                sc.scene_id = f"r{k}:{sc.scene_id}"
            events.append(ev)
            scenes += windows
            owner += [len(events) - 1] * len(windows)
        logger.info("corpus run %d: %d scenes from %d events", k, len(scenes), len(events))
        if len(scenes) >= min_scenes:
            break
    return Corpus(scenes, owner, events)


def split_by_event(n_events: int, seed: int, test_frac: float = 0.2,
                   val_frac: float = 0.4) -> tuple[set, set, set]:
    """Event ids for train, validation and test.

    ``test_frac`` of the events are held out; ``val_frac`` of the rest
    validate.
    """
    perm = np.random.default_rng(seed).permutation(n_events)
    n_test = max(1, int(round(test_frac * n_events)))
    test = set(perm[:n_test].tolist())
    rest = perm[n_test:]
    n_val = int(round(val_frac * rest.size))
    val = set(rest[:n_val].tolist())
    train = set(rest[n_val:].tolist())
    return train, val, test


def compare_kernels(corpus: Corpus, config: stgcnn.ModelConfig, horizons: Sequence[int] = HORIZONS,
                    kinds: Sequence = KINDS, seed: int = 0) -> dict:
    """Train and score one model per (kernel, horizon); include the persistence baseline.

    Returns:
        ``{"rows": [...], "split": {...}}`` where each row holds the model
        name, horizon and the four error metrics on the test scenes.
    """
    train_ev, val_ev, test_ev = split_by_event(len(corpus.events), seed)
    pick = lambda evs: [s for s, e in zip(corpus.scenes, corpus.event_index) if e in evs]  # noqa: E731
    train_s, val_s, test_s = pick(train_ev), pick(val_ev), pick(test_ev)
    rows = []
    cache: dict = {}
    for h in horizons:
        tr = [s.with_horizon(h) for s in train_s]
        va = [s.with_horizon(h) for s in val_s]
        te = [s.with_horizon(h) for s in test_s]
        base = pooled_errors((stgcnn.persistence(s, h), s.future) for s in te)
        rows.append({"model": "persistence", "horizon": h, **_metrics(base)})
        for kind in kinds:
            kind = gk.KernelKind.parse(kind)
            cfg = replace(config, T=train_s[0].T, F=h, seed=seed)
            params, report = stgcnn.train(tr, kind, cfg, validation=va, adjacency_cache=cache)
            err = pooled_errors((stgcnn.predict(s, params, kind, A_norm=cache.get(stgcnn.adjacency_key(s, kind, cfg.mi_bins))), s.future)
                                for s in te)
            rows.append({"model": f"stgcnn-{kind.value}", "horizon": h, **_metrics(err),
                         "final_train_loss": report.epochs[-1]["train_loss"],
                         "final_val_loss": report.epochs[-1]["val_loss"]})
            logger.info("h=%d %s ade=%.3f (persistence %.3f)", h, kind.value, err.ade, base.ade)
    return {"rows": rows, "split": {"train_scenes": len(train_s), "val_scenes": len(val_s),
                                    "test_scenes": len(test_s), "events": len(corpus.events)}}


def _metrics(rep) -> dict:
    return {m: getattr(rep, m) for m in METRICS}


def table_text(report: dict) -> str:
    """Metric x horizon table with one column per model."""
    rows = report["rows"]
    models = list(dict.fromkeys(r["model"] for r in rows))
    horizons = sorted({r["horizon"] for r in rows})
    look = {(r["model"], r["horizon"]): r for r in rows}
    lines = ["metric  horizon  " + "  ".join(f"{m:>16}" for m in models)]
    for metric in METRICS:
        for h in horizons:
            cells = "  ".join(f"{look[(m, h)][metric]:16.3f}" if (m, h) in look else " " * 16 for m in models)
            lines.append(f"{metric:<7} {h:>7}  {cells}")
    return "\n".join(lines)


def beats_persistence(report: dict) -> dict:
    """Whether each trained model's ADE is below the baseline at its horizon."""
    base = {r["horizon"]: r["ade"] for r in report["rows"] if r["model"] == "persistence"}
    return {(r["model"], r["horizon"]): r["ade"] < base[r["horizon"]]
            for r in report["rows"] if r["model"] != "persistence"}
