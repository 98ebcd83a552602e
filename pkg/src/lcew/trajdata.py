"""Trajectory ingestion, lane-change event extraction, ROI selection and scene windowing.

Positions live in a lane-local frame: ``x`` runs along the lane direction and
``y`` across it. Tracks are sampled at 10 Hz; every time is mapped onto an
integer frame index so that windows line up exactly across vehicles.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError, SchemaError

logger = logging.getLogger(__name__)

DT = 0.1

REQUIRED_COLUMNS = ("track_id", "frame_id", "timestamp_ms", "agent_type", "x", "y", "length", "width")
OPTIONAL_COLUMNS = ("vx", "vy", "psi_rad")

# lane-change boundary thresholds
INTENT_SPEED = 0.2  # m/s lateral speed toward the target lane
INTENT_HOLD = 0.5  # s
SETTLE_OFFSET = 0.3  # m from the target-lane center
SETTLE_HOLD = 1.0  # s

ROI_THW = 5.0
ROI_REAR_RANGE = 250.0
ROI_STANDSTILL_LOOKAHEAD = 10.0


@dataclass(frozen=True)
class TrajectoryPoint:
    t: float
    x: float
    y: float
    vx: float
    vy: float


@dataclass
class VehicleTrack:
    """One vehicle's sampled trajectory, stored column-wise."""

    id: int | str
    length: float
    width: float
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    vx: np.ndarray
    vy: np.ndarray
    agent_type: str = "car"

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        self.x = np.asarray(self.x, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        self.vx = np.asarray(self.vx, dtype=float)
        self.vy = np.asarray(self.vy, dtype=float)
        if self.length < 1.0 or self.width < 0.5:
            raise DataError(f"track {self.id}: implausible dimensions {self.length}x{self.width}")
        if self.t.size < 2:
            raise DataError(f"track {self.id}: needs at least 2 points")
        if np.any(np.diff(self.t) <= 0):
            raise DataError(f"track {self.id}: timestamps not strictly increasing")

    @property
    def frames(self) -> np.ndarray:
        return np.rint(self.t / DT).astype(np.int64)

    @property
    def points(self) -> list[TrajectoryPoint]:
        return [TrajectoryPoint(*row) for row in zip(self.t, self.x, self.y, self.vx, self.vy)]

    def index_at(self, t: float) -> int | None:
        """Sample index at time ``t`` (matched on the 10 Hz frame grid), or None."""
        frame = int(round(t / DT))
        frames = self.frames
        k = int(np.searchsorted(frames, frame))
        if k < frames.size and frames[k] == frame:
            return k
        return None

    def speed(self) -> np.ndarray:
        return np.hypot(self.vx, self.vy)


@dataclass(frozen=True)
class LCEvent:
    ego_id: int | str
    start_t: float
    cross_t: float
    end_t: float
    source_lane: int
    target_lane: int

    def __post_init__(self):
        if not self.start_t < self.cross_t < self.end_t:
            raise DataError(f"event for {self.ego_id}: need start < cross < end")


@dataclass(frozen=True)
class Diagnostic:
    track_id: int | str
    t: float
    reason: str


@dataclass
class Scene:
    """A fixed window of ``T`` history and ``F`` future steps for ``N`` vehicles.

    ``history`` is ``T x 2 x N`` and ``future`` is ``F x 2 x N`` (x, y rows).
    """

    ego_index: int
    vehicle_ids: list
    history: np.ndarray
    future: np.ndarray
    t0: float
    lengths: np.ndarray = field(default=None)
    widths: np.ndarray = field(default=None)
    scene_id: str = ""

    def __post_init__(self):
        self.history = np.asarray(self.history, dtype=float)
        self.future = np.asarray(self.future, dtype=float)
        n = len(self.vehicle_ids)
        if n < 2:
            raise DataError("a scene needs at least two vehicles")
        if not 0 <= self.ego_index < n:
            raise DataError(f"ego index {self.ego_index} out of range for {n} vehicles")
        if self.history.ndim != 3 or self.history.shape[1:] != (2, n):
            raise DataError(f"history shape {self.history.shape} does not match N={n}")
        if self.future.ndim != 3 or self.future.shape[1:] != (2, n):
            raise DataError(f"future shape {self.future.shape} does not match N={n}")
        if not (np.all(np.isfinite(self.history)) and np.all(np.isfinite(self.future))):
            raise DataError("scene positions must be finite")
        if self.lengths is None:
            self.lengths = np.full(n, 4.5)
        if self.widths is None:
            self.widths = np.full(n, 1.8)
        self.lengths = np.asarray(self.lengths, dtype=float)
        self.widths = np.asarray(self.widths, dtype=float)

    @property
    def n_vehicles(self) -> int:
        return len(self.vehicle_ids)

    @property
    def T(self) -> int:
        return self.history.shape[0]

    @property
    def F(self) -> int:
        return self.future.shape[0]

    def permuted(self, order: Sequence[int]) -> "Scene":
        order = np.asarray(order)
        return Scene(
            ego_index=int(np.flatnonzero(order == self.ego_index)[0]),
            vehicle_ids=[self.vehicle_ids[k] for k in order],
            history=self.history[:, :, order],
            future=self.future[:, :, order],
            t0=self.t0,
            lengths=self.lengths[order],
            widths=self.widths[order],
            scene_id=self.scene_id,
        )

    def with_horizon(self, F: int) -> "Scene":
        if F > self.F:
            raise DataError(f"scene carries only {self.F} future steps, asked for {F}")
        return Scene(self.ego_index, list(self.vehicle_ids), self.history, self.future[:F],
                     self.t0, self.lengths, self.widths, self.scene_id)


# ---------------------------------------------------------------------------
# ingestion


def parse_trajectory_file(path: str | Path) -> list[VehicleTrack]:
    """Read an INTERACTION-style CSV into tracks, one per ``track_id``.

    Missing ``vx``/``vy`` columns (or empty cells) are filled with central
    differences of the positions; one-sided differences at the track ends.

    Raises:
        SchemaError: a required column is absent.
        DataError: timestamps of one id are not strictly increasing in file order.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        header = [h.strip() for h in (reader.fieldnames or [])]
        missing = [c for c in REQUIRED_COLUMNS if c not in header]
        if missing:
            raise SchemaError(f"{path}: missing required column(s) {', '.join(missing)}")
        reader.fieldnames = header
        rows: dict[str, list[dict]] = {}
        for row in reader:
            rows.setdefault(row["track_id"].strip(), []).append(row)

    tracks = []
    for raw_id, recs in rows.items():
        t = np.array([float(r["timestamp_ms"]) / 1000.0 for r in recs])
        if np.any(np.diff(t) <= 0):
            raise DataError(f"track {raw_id}: timestamps are not strictly increasing")
        x = np.array([float(r["x"]) for r in recs])
        y = np.array([float(r["y"]) for r in recs])
        vx = _optional_column(recs, "vx")
        vy = _optional_column(recs, "vy")
        if t.size >= 2:
            if vx is None:
                vx = np.gradient(x, t)
            if vy is None:
                vy = np.gradient(y, t)
        track_id: int | str = int(raw_id) if raw_id.lstrip("-").isdigit() else raw_id
        try:
            tracks.append(VehicleTrack(
                id=track_id,
                length=float(recs[0]["length"]),
                width=float(recs[0]["width"]),
                t=t, x=x, y=y, vx=vx, vy=vy,
                agent_type=recs[0]["agent_type"].strip(),
            ))
        except DataError as exc:
            logger.warning("dropping track: %s", exc)
    return tracks


def _optional_column(recs: list[dict], name: str) -> np.ndarray | None:
    if name not in recs[0]:
        return None
    cells = [r.get(name) for r in recs]
    if any(c is None or str(c).strip() == "" for c in cells):
        return None
    return np.array([float(c) for c in cells])


def write_trajectory_file(path: str | Path, tracks: Iterable[VehicleTrack]) -> None:
    """Write tracks in the same CSV schema that :func:`parse_trajectory_file` reads."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(REQUIRED_COLUMNS[:6]) + ["vx", "vy", "psi_rad", "length", "width"])
        for tr in tracks:
            for k in range(tr.t.size):
                psi = float(np.arctan2(tr.vy[k], tr.vx[k]))
                w.writerow([tr.id, int(tr.frames[k]), int(round(tr.t[k] * 1000)), tr.agent_type,
                            repr(float(tr.x[k])), repr(float(tr.y[k])), repr(float(tr.vx[k])),
                            repr(float(tr.vy[k])), repr(psi), tr.length, tr.width])


# ---------------------------------------------------------------------------
# lane geometry


@dataclass
class Lane:
    id: int
    center: np.ndarray  # (K, 2) polyline, ordered along the driving direction
    width: float = 3.5

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)
        if self.center.ndim != 2 or self.center.shape[0] < 2 or self.center.shape[1] != 2:
            raise SchemaError(f"lane {self.id}: center must be a polyline of >= 2 (x, y) points")

    def project(self, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Arc length along the center line and signed lateral offset (left positive)."""
        p = np.stack([np.atleast_1d(x), np.atleast_1d(y)], axis=-1).astype(float)
        a, b = self.center[:-1], self.center[1:]
        seg = b - a
        seg_len = np.hypot(seg[:, 0], seg[:, 1])
        cum = np.concatenate([[0.0], np.cumsum(seg_len)])
        rel = p[:, None, :] - a[None, :, :]
        u = np.einsum("psk,sk->ps", rel, seg) / seg_len**2
        # the first and last segments extend indefinitely
        u[:, 1:] = np.maximum(u[:, 1:], 0.0)
        u[:, :-1] = np.minimum(u[:, :-1], 1.0)
        foot = a[None] + u[..., None] * seg[None]
        d = p[:, None, :] - foot
        dist = np.hypot(d[..., 0], d[..., 1])
        k = np.argmin(dist, axis=1)
        rows = np.arange(p.shape[0])
        cross = seg[k, 0] * rel[rows, k, 1] - seg[k, 1] * rel[rows, k, 0]
        offset = np.sign(cross) * dist[rows, k]
        s = cum[k] + u[rows, k] * seg_len[k]
        return s, offset


@dataclass
class LaneGeometry:
    lanes: list[Lane]

    def __post_init__(self):
        ids = [ln.id for ln in self.lanes]
        if len(set(ids)) != len(ids) or not ids:
            raise SchemaError("lane ids must be unique and non-empty")

    @classmethod
    def straight(cls, n_lanes: int, width: float = 3.5, length: float = 1000.0,
                 first_id: int = 0) -> "LaneGeometry":
        """Parallel straight lanes along +x; lane ``first_id`` is centered on y = 0."""
        return cls([Lane(first_id + k, [[-length, k * width], [length, k * width]], width)
                    for k in range(n_lanes)])

    @classmethod
    def from_dict(cls, data: dict) -> "LaneGeometry":
        try:
            return cls([Lane(int(d["id"]), d["center"], float(d.get("width", 3.5)))
                        for d in data["lane"]])
        except KeyError as exc:
            raise SchemaError(f"lane geometry: missing key {exc}") from None

    @classmethod
    def load(cls, path: str | Path) -> "LaneGeometry":
        from .io import load_toml
        return cls.from_dict(load_toml(path))

    def lane(self, lane_id: int) -> Lane:
        for ln in self.lanes:
            if ln.id == lane_id:
                return ln
        raise KeyError(lane_id)

    def locate(self, x, y) -> tuple[np.ndarray, np.ndarray]:
        """Lane id and signed offset from that lane's center for each point."""
        offsets = np.stack([ln.project(x, y)[1] for ln in self.lanes])
        k = np.argmin(np.abs(offsets), axis=0)
        ids = np.array([ln.id for ln in self.lanes])[k]
        return ids, offsets[k, np.arange(offsets.shape[1])]

    def lane_index(self, x: float, y: float) -> int:
        return int(self.locate(x, y)[0][0])


# ---------------------------------------------------------------------------
# lane-change extraction


def _run_start(mask: np.ndarray, end: int) -> int | None:
    """First index of the run of True values ending at ``end`` (inclusive)."""
    if not mask[end]:
        return None
    k = end
    while k > 0 and mask[k - 1]:
        k -= 1
    return k


def scan_lane_changes(tracks: Sequence[VehicleTrack], lanes: LaneGeometry
                      ) -> tuple[list[LCEvent], list[Diagnostic]]:
    """Like :func:`extract_lc_events` but also returns the discarded crossings."""
    events, diags = [], []
    hold_in = int(round(INTENT_HOLD / DT))
    hold_out = int(round(SETTLE_HOLD / DT))
    for tr in tracks:
        lane_ids, _ = lanes.locate(tr.x, tr.y)
        changes = np.flatnonzero(lane_ids[1:] != lane_ids[:-1]) + 1
        for j, k in enumerate(changes):
            src, tgt = int(lane_ids[k - 1]), int(lane_ids[k])
            next_change = changes[j + 1] if j + 1 < len(changes) else tr.t.size
            prev_change = changes[j - 1] if j > 0 else 0
            if k >= tr.t.size - 1:
                diags.append(Diagnostic(tr.id, float(tr.t[k]), "crossing at recording end"))
                continue

            src_lane, tgt_lane = lanes.lane(src), lanes.lane(tgt)
            _, d_src = src_lane.project(tr.x, tr.y)
            _, d_tgt = tgt_lane.project(tr.x, tr.y)
            toward = np.sign(d_src[k] - d_src[k - 1]) or 1.0
            lateral = toward * d_src  # grows from 0 toward the target lane

            # marker crossing: lateral offset reaches half the source-lane width
            half = 0.5 * src_lane.width
            a, b = lateral[k - 1] - half, lateral[k] - half
            frac = a / (a - b) if a != b else 0.5
            frac = min(max(frac, 0.0), 1.0)
            cross_t = float(tr.t[k - 1] + frac * (tr.t[k] - tr.t[k - 1]))

            lat_speed = np.gradient(lateral, tr.t)
            moving = lat_speed > INTENT_SPEED
            k_in = _run_start(moving, k - 1) if moving[k - 1] else _run_start(moving, k)
            if k_in is None or (k - 1) - k_in < hold_in:
                diags.append(Diagnostic(tr.id, cross_t, "no sustained lateral intent before crossing"))
                continue
            if k_in <= prev_change:
                diags.append(Diagnostic(tr.id, cross_t, "intent phase truncated by recording start"))
                continue

            settled = np.abs(d_tgt) < SETTLE_OFFSET
            k_out = None
            for m in range(k, next_change - hold_out):
                if settled[m:m + hold_out + 1].all():
                    k_out = m
                    break
            if k_out is None:
                diags.append(Diagnostic(tr.id, cross_t, "no settling before recording end"))
                continue
            start_t, end_t = float(tr.t[k_in]), float(tr.t[k_out])
            if not start_t < cross_t < end_t:
                diags.append(Diagnostic(tr.id, cross_t, "degenerate event boundaries"))
                continue
            events.append(LCEvent(tr.id, start_t, cross_t, end_t, src, tgt))
    return events, diags


def extract_lc_events(tracks: Sequence[VehicleTrack], lanes: LaneGeometry) -> list[LCEvent]:
    """Complete lane changes: intent onset, marker crossing and settling in the target lane.

    Truncated crossings are dropped; use :func:`scan_lane_changes` to see them.
    """
    events, diags = scan_lane_changes(tracks, lanes)
    if diags:
        logger.info("discarded %d incomplete lane change(s)", len(diags))
    return events


# ---------------------------------------------------------------------------
# region of interest


def roi_mask(ego_x: float, ego_speed: float, ego_length: float,
             x: np.ndarray, lengths: np.ndarray, in_scope: np.ndarray,
             thw_max: float = ROI_THW, rear_range: float = ROI_REAR_RANGE) -> np.ndarray:
    """Membership of candidate vehicles in the forward/rear areas around the ego.

    Forward candidates count when their bumper gap over the ego speed is at
    most ``thw_max``; at standstill the forward area shrinks to a fixed
    look-ahead. Rear candidates count within ``rear_range`` metres.
    """
    x = np.asarray(x, dtype=float)
    lengths = np.asarray(lengths, dtype=float)
    ahead = x > ego_x
    front_gap = (x - 0.5 * lengths) - (ego_x + 0.5 * ego_length)
    rear_gap = (ego_x - 0.5 * ego_length) - (x + 0.5 * lengths)
    if ego_speed > 0:
        fwd = front_gap <= thw_max * ego_speed
    else:
        fwd = front_gap <= ROI_STANDSTILL_LOOKAHEAD
    rear = rear_gap <= rear_range
    return np.asarray(in_scope, dtype=bool) & np.where(ahead, fwd, rear)


def build_roi(ego_id, t: float, tracks: Sequence[VehicleTrack], lanes: LaneGeometry,
              target_lane: int | None = None,
              thw_max: float = ROI_THW, rear_range: float = ROI_REAR_RANGE) -> list:
    """Ids of vehicles in the ego's LC region of interest at time ``t``, ego first.

    Only the ego's current lane and ``target_lane`` are scanned. Without a
    target lane, both neighbours of the current lane are scanned.
    """
    by_id = {tr.id: tr for tr in tracks}
    ego = by_id[ego_id]
    ke = ego.index_at(t)
    if ke is None:
        raise DataError(f"ego {ego_id} not present at t={t}")
    ego_lane = lanes.lane_index(ego.x[ke], ego.y[ke])
    scope = {ego_lane, target_lane} if target_lane is not None else {ego_lane - 1, ego_lane, ego_lane + 1}

    ids, xs, lens, ok = [], [], [], []
    for tr in tracks:
        if tr.id == ego_id:
            continue
        k = tr.index_at(t)
        if k is None:
            continue
        ids.append(tr.id)
        xs.append(tr.x[k])
        lens.append(tr.length)
        ok.append(lanes.lane_index(tr.x[k], tr.y[k]) in scope)
    if not ids:
        return [ego_id]
    speed = max(float(ego.speed()[ke]), 0.0)
    mask = roi_mask(ego.x[ke], speed, ego.length, np.array(xs), np.array(lens), np.array(ok),
                    thw_max=thw_max, rear_range=rear_range)
    return [ego_id] + [i for i, m in zip(ids, mask) if m]


# ---------------------------------------------------------------------------
# windows


def window_starts(first_frame: int, last_frame: int, T: int, F: int, stride: int) -> list[int]:
    """Start frames of every ``T + F`` window inside ``[first_frame, last_frame]``."""
    span = T + F
    return list(range(first_frame, last_frame - span + 2, stride))


def pad_event(ev: LCEvent, before: float, after: float, track: VehicleTrack) -> LCEvent:
    """Widen an event so that windows can hold history before and future after the manoeuvre."""
    start = max(ev.start_t - before, float(track.t[0]))
    end = min(ev.end_t + after, float(track.t[-1]))
    return replace(ev, start_t=min(start, ev.start_t), end_t=max(end, ev.end_t))


def make_scene_windows(event: LCEvent, tracks: Sequence[VehicleTrack], lanes: LaneGeometry,
                       T: int = 20, F: int = 20, stride: int = 10) -> list[Scene]:
    """Slide ``T``-step history / ``F``-step future windows over one LC event.

    ROI membership is taken at each window's last history step; vehicles not
    present on every frame of the window are left out. Windows keeping fewer
    than two vehicles are skipped.
    """
    if T < 5 or F < 1 or stride < 1:
        raise ValueError("need T >= 5, F >= 1, stride >= 1")
    by_id = {tr.id: tr for tr in tracks}
    first = int(round(event.start_t / DT))
    last = int(round(event.end_t / DT))
    frame_index = {tr.id: {int(f): k for k, f in enumerate(tr.frames)} for tr in tracks}

    scenes = []
    for s in window_starts(first, last, T, F, stride):
        frames = np.arange(s, s + T + F)
        t_now = (s + T - 1) * DT
        if event.ego_id not in by_id or by_id[event.ego_id].index_at(t_now) is None:
            continue
        members = build_roi(event.ego_id, t_now, tracks, lanes, target_lane=event.target_lane)
        covered = []
        for vid in members:
            idx = frame_index[vid]
            if all(int(f) in idx for f in frames):
                covered.append(vid)
        if event.ego_id not in covered or len(covered) < 2:
            continue
        pos = np.empty((T + F, 2, len(covered)))
        for j, vid in enumerate(covered):
            tr, idx = by_id[vid], frame_index[vid]
            rows = [idx[int(f)] for f in frames]
            pos[:, 0, j] = tr.x[rows]
            pos[:, 1, j] = tr.y[rows]
        scenes.append(Scene(
            ego_index=0,
            vehicle_ids=covered,
            history=pos[:T],
            future=pos[T:],
            t0=s * DT,
            lengths=np.array([by_id[v].length for v in covered]),
            widths=np.array([by_id[v].width for v in covered]),
            scene_id=f"{event.ego_id}@{s}",
        ))
    return scenes
