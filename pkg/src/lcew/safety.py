"""Prediction-error metrics, surrogate safety measures and risk classification."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DataError

TTC_HAZARD = 5.0  # s, strict
DT = 0.1
SUMMARY_QUANTILES = (0.05, 0.25, 0.5, 0.75, 0.95)


# ---------------------------------------------------------------------------
# prediction errors


@dataclass
class PredictionErrorReport:
    ade: float
    fde: float
    rmse_x: float
    rmse_y: float
    per_step: list = field(default_factory=list)  # mean Euclidean error at each predicted step

    def to_dict(self) -> dict:
        return asdict(self)


def prediction_errors(pred, truth) -> PredictionErrorReport:
    """ADE, FDE and per-axis RMSE of an ``F x 2 x N`` prediction.

    ADE and the RMSEs average over all ``N * F`` vehicle-steps; FDE averages
    the last step's Euclidean error over vehicles.
    """
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape or pred.ndim != 3 or pred.shape[1] != 2:
        raise DataError(f"prediction {pred.shape} and truth {truth.shape} must both be F x 2 x N")
    diff = pred - truth
    dist = np.hypot(diff[:, 0], diff[:, 1])  # F x N
    return PredictionErrorReport(
        ade=float(dist.mean()),
        fde=float(dist[-1].mean()),
        rmse_x=float(np.sqrt(np.mean(diff[:, 0] ** 2))),
        rmse_y=float(np.sqrt(np.mean(diff[:, 1] ** 2))),
        per_step=dist.mean(axis=1).tolist(),
    )


def pooled_errors(pairs: Iterable[tuple[np.ndarray, np.ndarray]]) -> PredictionErrorReport:
    """Metrics pooled over many scenes, weighting every vehicle-step equally."""
    dists, dx2, dy2, finals = [], [], [], []
    per_step = None
    for pred, truth in pairs:
        diff = np.asarray(pred, dtype=float) - np.asarray(truth, dtype=float)
        d = np.hypot(diff[:, 0], diff[:, 1])
        dists.append(d.ravel())
        finals.append(d[-1])
        dx2.append((diff[:, 0] ** 2).ravel())
        dy2.append((diff[:, 1] ** 2).ravel())
        per_step = d if per_step is None else np.concatenate([per_step, d], axis=1)
    if not dists:
        raise DataError("no predictions to score")
    return PredictionErrorReport(
        ade=float(np.concatenate(dists).mean()),
        fde=float(np.concatenate(finals).mean()),
        rmse_x=float(np.sqrt(np.concatenate(dx2).mean())),
        rmse_y=float(np.sqrt(np.concatenate(dy2).mean())),
        per_step=per_step.mean(axis=1).tolist(),
    )


# ---------------------------------------------------------------------------
# time to collision and risk taxonomy


@dataclass(frozen=True)
class TTCResult:
    ttc: float | None
    overlap: bool = False

    @property
    def hazardous(self) -> bool:
        return self.ttc is not None and self.ttc < TTC_HAZARD


def ttc_pair(leader_x: float, leader_speed: float, leader_length: float,
             follower_x: float, follower_speed: float, follower_length: float) -> TTCResult:
    """Longitudinal bumper-to-bumper time to collision.

    Positions are vehicle centers along the lane. Undefined (``None``) when
    the follower is not closing in; zero, flagged as overlap, when the
    bumpers already overlap.
    """
    gap = (leader_x - 0.5 * leader_length) - (follower_x + 0.5 * follower_length)
    if gap < 0:
        return TTCResult(0.0, overlap=True)
    closing = follower_speed - leader_speed
    if closing <= 0:
        return TTCResult(None)
    return TTCResult(gap / closing)


class RiskCategory(str, Enum):
    DIRECT = "direct"
    INDIRECT_FORWARD = "indirect_forward"
    INDIRECT_REAR = "indirect_rear"


@dataclass(frozen=True)
class VehicleState:
    lane: int
    x: float
    speed: float
    length: float = 4.5


@dataclass
class Snapshot:
    """ROI contents at one time step.

    ``vehicles`` maps id to state; ``target_lane`` is the ego's intended lane
    (``None`` when it is not changing lanes).
    """

    t: float
    ego_id: object
    vehicles: Mapping[object, VehicleState]
    target_lane: int | None = None


@dataclass(frozen=True)
class RiskRecord:
    t: float
    pair: tuple  # (leader, follower)
    ttc: float
    category: RiskCategory


def _lane_pairs(vehicles: Mapping[object, VehicleState]) -> list[tuple]:
    """(leader, follower) ids of consecutive vehicles in each lane."""
    by_lane: dict[int, list] = {}
    for vid, s in vehicles.items():
        by_lane.setdefault(s.lane, []).append(vid)
    pairs = []
    for lane in sorted(by_lane):
        ids = sorted(by_lane[lane], key=lambda v: (vehicles[v].x, str(v)))
        pairs += [(ids[k + 1], ids[k]) for k in range(len(ids) - 1)]
    return pairs


def _ego_target_pairs(snap: Snapshot) -> list[tuple]:
    """Ego against the nearest leader and follower in its target lane."""
    if snap.target_lane is None:
        return []
    ego = snap.vehicles[snap.ego_id]
    if ego.lane == snap.target_lane:
        return []
    others = [v for v, s in snap.vehicles.items() if s.lane == snap.target_lane]
    ahead = [v for v in others if snap.vehicles[v].x >= ego.x]
    behind = [v for v in others if snap.vehicles[v].x < ego.x]
    pairs = []
    if ahead:
        pairs.append((min(ahead, key=lambda v: snap.vehicles[v].x), snap.ego_id))
    if behind:
        pairs.append((snap.ego_id, max(behind, key=lambda v: snap.vehicles[v].x)))
    return pairs


def categorize(pair: tuple, snap: Snapshot) -> RiskCategory:
    """Risk category of a (leader, follower) pair relative to the ego."""
    if snap.ego_id in pair:
        return RiskCategory.DIRECT
    ego_x = snap.vehicles[snap.ego_id].x
    if all(snap.vehicles[v].x > ego_x for v in pair):
        return RiskCategory.INDIRECT_FORWARD
    return RiskCategory.INDIRECT_REAR


def classify_risks(snapshots: Sequence[Snapshot]) -> tuple[list[RiskRecord], dict[RiskCategory, int]]:
    """Hazardous (TTC < 5 s) pairs of every snapshot with their risk category.

    Pairs are consecutive vehicles within a lane plus, while the ego is
    changing lanes, the ego against its target-lane leader and follower.
    Counts are per time step.
    """
    records = []
    for snap in snapshots:
        if snap.ego_id not in snap.vehicles:
            raise DataError(f"ego {snap.ego_id!r} missing from snapshot at t={snap.t}")
        seen = set()
        for lead, foll in _lane_pairs(snap.vehicles) + _ego_target_pairs(snap):
            if (lead, foll) in seen:
                continue
            seen.add((lead, foll))
            a, b = snap.vehicles[lead], snap.vehicles[foll]
            res = ttc_pair(a.x, a.speed, a.length, b.x, b.speed, b.length)
            if res.hazardous:
                records.append(RiskRecord(snap.t, (lead, foll), res.ttc, categorize((lead, foll), snap)))
    counts = {c: 0 for c in RiskCategory}
    for r in records:
        counts[r.category] += 1
    return records, counts


# ---------------------------------------------------------------------------
# behaviour


@dataclass
class BehaviorRecord:
    vehicle_id: object
    max_drac: float
    max_decel: float
    max_jerk: float

    def to_dict(self) -> dict:
        return asdict(self)


def drac(gap, closing):
    """Deceleration rate to avoid a crash, ``closing**2 / (2 * gap)``; 0 when not closing."""
    gap = np.asarray(gap, dtype=float)
    closing = np.asarray(closing, dtype=float)
    ok = (closing > 0) & (gap > 0) & np.isfinite(gap)
    out = np.zeros(np.broadcast(gap, closing).shape)
    np.divide(closing ** 2, 2.0 * gap, out=out, where=ok)
    return out


def behavior_metrics(speed, leader_gap=None, leader_speed=None, vehicle_id=None,
                     dt: float = DT) -> BehaviorRecord:
    """Extreme deceleration, jerk and DRAC over one vehicle's speed series.

    Args:
        speed: speeds sampled every ``dt``.
        leader_gap: bumper gap to the current leader per sample (``nan`` or
            ``inf`` where there is none).
        leader_speed: that leader's speed per sample.

    Raises:
        DataError: fewer than three samples.
    """
    v = np.asarray(speed, dtype=float)
    if v.size < 3:
        raise DataError("need at least three samples for acceleration and jerk")
    acc = np.gradient(v, dt)
    jerk = np.gradient(acc, dt)
    max_drac = 0.0
    if leader_gap is not None and leader_speed is not None:
        gap = np.asarray(leader_gap, dtype=float)
        lv = np.asarray(leader_speed, dtype=float)
        closing = np.where(np.isfinite(lv), v - np.nan_to_num(lv), 0.0)
        vals = drac(np.where(np.isfinite(gap), gap, np.inf), closing)
        max_drac = float(vals.max()) if vals.size else 0.0
    return BehaviorRecord(vehicle_id, max_drac, float(max(0.0, -acc.min())), float(np.abs(jerk).max()))


def throughput(exit_times: Iterable[float], warmup: float, window: float) -> int:
    """Vehicles leaving the segment during ``[warmup, warmup + window)``."""
    return sum(1 for t in exit_times if warmup <= t < warmup + window)


# ---------------------------------------------------------------------------
# reports


def quantile_summary(values: Sequence[float], qs: Sequence[float] = SUMMARY_QUANTILES) -> dict:
    arr = np.asarray(list(values), dtype=float)
    if arr.size == 0:
        return {"count": 0}
    out = {"count": int(arr.size), "mean": float(arr.mean()), "max": float(arr.max())}
    for q in qs:
        out[f"q{int(round(q * 100)):02d}"] = float(np.quantile(arr, q))
    return out


def behavior_csv(records: Sequence[BehaviorRecord], extra: Mapping | None = None) -> str:
    buf = io.StringIO()
    cols = list(extra or {}) + ["vehicle_id", "max_drac", "max_decel", "max_jerk"]
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    w.writeheader()
    for r in records:
        w.writerow({**(extra or {}), **r.to_dict()})
    return buf.getvalue()


def behavior_summary(records: Sequence[BehaviorRecord]) -> dict:
    return {name: quantile_summary([getattr(r, name) for r in records])
            for name in ("max_drac", "max_decel", "max_jerk")}


def summary_json(records: Sequence[BehaviorRecord]) -> str:
    return json.dumps(behavior_summary(records), sort_keys=True, indent=2)
