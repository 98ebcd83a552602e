"""Seeded ramp-merge microsimulator with closed-loop lane-change warnings.

Road layout, in a straight lane-local frame (``x`` along the road, 0..440 m):

* lanes 1 and 2 are the mainline;
* lane 0 is the on-ramp. It runs physically separated up to ``merge_x`` and
  continues as the third mainline lane afterwards.

Car following uses the intelligent driver model. Lane changes use gap
acceptance with a MOBIL-style incentive; ramp vehicles bound for the
mainline treat the change into lane 1 as mandatory. A lane change has an
intent phase (signalling) followed by a lateral sweep, during which the
vehicle occupies both lanes.

Drivers react to a change of leader after their reaction time (1.7 s, or
1.3 s when equipped and a warning system is active) unless the new
situation is critical. Equipped vehicles that are changing lanes run the
warning pipeline every step: ROI, 2 s of history, a 2 s prediction,
oriented-box collision detection and a front/rear warning. A warned driver
either adjusts speed (truncated-normal magnitude) or becomes primed, which
starts the reaction clock at the warning time.

Randomness is split into independent streams (arrivals per source, driver
profiles, equipment, warning responses) so that runs differing only in the
warning method or penetration share their traffic.
"""

from __future__ import annotations

import bisect
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from enum import Enum
from types import SimpleNamespace
from typing import Callable, Sequence

import numpy as np
from scipy.stats import truncnorm

from . import collision as col
from . import safety
from .errors import SchemaError

logger = logging.getLogger(__name__)

NO_LEADER = -1


class WarningMethod(str, Enum):
    NONE = "none"
    TTC = "ttc"
    LCEW = "lcew"

    @classmethod
    def parse(cls, value) -> "WarningMethod":
        return value if isinstance(value, cls) else cls(str(value).lower())


# ---------------------------------------------------------------------------
# configuration


@dataclass
class DriverParams:
    """Intelligent-driver parameters; desired speed and headway vary per driver."""

    v0_mean: float = 27.0  # m/s mainline
    v0_ramp_mean: float = 24.0
    v0_sd: float = 2.0
    headway_mean: float = 1.3  # s
    headway_sd: float = 0.2
    a_max: float = 1.5
    b_comf: float = 2.0
    b_max: float = 9.0  # physical limit, emergency clamp
    s0: float = 2.0
    delta: float = 4.0
    politeness: float = 0.3
    length: float = 4.6
    width: float = 1.8


@dataclass
class LaneChangeParams:
    intent: float = 1.0  # s of signalling before the lateral move
    duration: float = 3.0  # s of lateral sweep
    cooldown: float = 5.0
    check_interval: float = 0.5
    threshold: float = 0.2  # m/s^2 incentive
    keep_right_bias: float = 0.1
    b_safe: float = 2.0  # discretionary bound on the new follower's braking
    b_safe_mandatory: float = 4.0
    min_lead_gap: float = 2.0
    lead_headway: float = 0.3  # s
    min_lag_gap: float = 2.0
    lag_headway: float = 0.5  # s
    exit_margin: float = 40.0  # m before the end where no new change starts


@dataclass
class ResponseParams:
    """Truncated-normal magnitudes (m/s^2) of warning-induced speed changes."""

    decel_mean: float = 1.0
    decel_sd: float = 0.5
    decel_lower: float = 0.2
    decel_upper: float = 3.0
    accel_mean: float = 1.0
    accel_sd: float = 0.5
    accel_lower: float = 0.2
    accel_upper: float = 3.0
    speed_adjust_prob: float = 0.5
    duration: float = 2.0  # s a speed adjustment is held


@dataclass
class SimConfig:
    seed: int = 0
    method: str = "none"
    penetration: float = 0.25
    mainline_demand: float = 2600.0  # veh/h over both mainline lanes
    ramp_demand: float = 700.0  # veh/h
    ramp_to_mainline: float = 0.6  # share of ramp vehicles that must reach lane 1
    road_length: float = 440.0
    merge_x: float = 120.0
    lane_width: float = 3.5
    dt: float = 0.1
    warmup: float = 300.0
    duration: float = 900.0
    horizon: float = 2.0  # s, warning prediction horizon
    history: float = 2.0  # s of observed trajectory fed to the predictor
    reaction_unequipped: float = 1.7
    reaction_equipped: float = 1.3
    emergency_ttc: float = 2.0
    emergency_headway: float = 0.3  # s
    ttc_threshold: float = 5.0
    roi_thw: float = 5.0
    roi_rear: float = 250.0
    predictor: str = "cv"  # "cv" or "model" (a model must then be passed to run_sim)
    kernel: str = "mi"
    record_trajectories: bool = False
    driver: DriverParams = field(default_factory=DriverParams)
    lane_change: LaneChangeParams = field(default_factory=LaneChangeParams)
    response: ResponseParams = field(default_factory=ResponseParams)

    def __post_init__(self):
        self.method = WarningMethod.parse(self.method).value
        if not 0.0 <= self.penetration <= 1.0:
            raise SchemaError("penetration must lie in [0, 1]")
        if self.horizon <= 0 or self.dt <= 0:
            raise SchemaError("horizon and dt must be positive")
        if not 0 < self.merge_x < self.road_length:
            raise SchemaError("merge point must lie inside the segment")
        if self.mainline_demand < 0 or self.ramp_demand < 0:
            raise SchemaError("demand must be nonnegative")
        if self.predictor not in ("cv", "model"):
            raise SchemaError(f"unknown predictor {self.predictor!r}")
        for name, cls in _SECTION.items():
            val = getattr(self, name)
            if isinstance(val, dict):
                setattr(self, name, _build(cls, val, name))

    @property
    def steps(self) -> int:
        return int(round((self.warmup + self.duration) / self.dt))

    @classmethod
    def from_dict(cls, data: dict, require_seed: bool = True, prefix: str = "") -> "SimConfig":
        """Build from a parsed TOML document; unknown keys are rejected by name."""
        if require_seed and "seed" not in data:
            raise SchemaError(f"missing required key '{prefix + '.' if prefix else ''}seed'")
        return _build(cls, data, prefix)

    def to_dict(self) -> dict:
        return asdict(self)


_SECTION = {"driver": DriverParams, "lane_change": LaneChangeParams, "response": ResponseParams}


def _build(cls, data: dict, prefix: str):
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, val in data.items():
        path = f"{prefix}.{key}" if prefix else key
        if key not in known:
            raise SchemaError(f"unknown config key '{path}'")
        if key in _SECTION and cls is SimConfig:
            if not isinstance(val, dict):
                raise SchemaError(f"config key '{path}' must be a table")
            val = _build(_SECTION[key], val, path)
        kwargs[key] = val
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise SchemaError(f"{prefix or 'config'}: {exc}") from None


def load_config(path, overrides: dict | None = None) -> SimConfig:
    from .io import load_toml
    data = load_toml(path)
    if "sim" in data and isinstance(data["sim"], dict):
        data = data["sim"]
    data = {**data, **(overrides or {})}
    return SimConfig.from_dict(data)


# ---------------------------------------------------------------------------
# driver models


def idm_accel(v, gap, lead_v, v0, headway, drv: DriverParams):
    """Intelligent-driver acceleration, clamped to ``[-b_max, a_max]``.

    ``gap`` is the bumper gap to the leader (``inf`` for no leader). A gap of
    zero or less returns the emergency deceleration ``-b_max``.
    """
    v = np.asarray(v, dtype=float)
    gap = np.asarray(gap, dtype=float)
    lead_v = np.asarray(lead_v, dtype=float)
    free = 1.0 - (v / v0) ** drv.delta
    has_lead = np.isfinite(gap)
    dv = np.where(has_lead, v - np.nan_to_num(lead_v), 0.0)
    s_star = drv.s0 + np.maximum(0.0, v * headway + v * dv / (2.0 * math.sqrt(drv.a_max * drv.b_comf)))
    safe_gap = np.where(has_lead & (gap > 0), gap, 1.0)
    inter = np.where(has_lead, (s_star / safe_gap) ** 2, 0.0)
    acc = drv.a_max * (free - inter)
    acc = np.where(has_lead & (gap <= 0), -drv.b_max, acc)
    return np.clip(acc, -drv.b_max, drv.a_max)


def equilibrium_gap(v: float, v0: float, headway: float, drv: DriverParams) -> float:
    """Gap at which following an equal-speed leader gives zero acceleration."""
    return (drv.s0 + v * headway) / math.sqrt(1.0 - (v / v0) ** drv.delta)


@dataclass(frozen=True)
class GapView:
    """Surroundings of one vehicle for a single lane-change option.

    Gaps are bumper gaps (``inf`` when the neighbour is absent).
    """

    speed: float
    cur_lead_gap: float = math.inf
    cur_lead_speed: float = 0.0
    tgt_lead_gap: float = math.inf
    tgt_lead_speed: float = 0.0
    tgt_lag_gap: float = math.inf
    tgt_lag_speed: float = 0.0
    tgt_lag_v0: float = 30.0
    tgt_lag_headway: float = 1.3


def lc_decide(view: GapView, v0: float, headway: float, drv: DriverParams, lcp: LaneChangeParams,
              mandatory: bool = False, bias: float = 0.0) -> bool:
    """Gap acceptance plus incentive for one candidate lane.

    The lead and lag gaps must clear speed-dependent minima and the new
    follower must not need to brake harder than ``b_safe``. A discretionary
    change also needs the ego's acceleration gain, less the politeness-weighted
    loss of the new follower, to beat the threshold (``bias`` is added to the
    gain). Mandatory changes skip the incentive.
    """
    v = view.speed
    if view.tgt_lead_gap < lcp.min_lead_gap + lcp.lead_headway * v:
        return False
    if view.tgt_lag_gap < lcp.min_lag_gap + lcp.lag_headway * view.tgt_lag_speed:
        return False
    b_safe = lcp.b_safe_mandatory if mandatory else lcp.b_safe
    lag_after = float(idm_accel(view.tgt_lag_speed, view.tgt_lag_gap, v, view.tgt_lag_v0,
                                view.tgt_lag_headway, drv))
    if lag_after < -b_safe:
        return False
    ego_after = float(idm_accel(v, view.tgt_lead_gap, view.tgt_lead_speed, v0, headway, drv))
    if ego_after < -b_safe:
        return False
    if mandatory:
        return True
    ego_now = float(idm_accel(v, view.cur_lead_gap, view.cur_lead_speed, v0, headway, drv))
    lag_before = float(idm_accel(view.tgt_lag_speed, math.inf, 0.0, view.tgt_lag_v0,
                                 view.tgt_lag_headway, drv)) if math.isfinite(view.tgt_lag_gap) else 0.0
    if not math.isfinite(view.tgt_lag_gap):
        lag_after = lag_before = 0.0
    gain = ego_after - ego_now + drv.politeness * (lag_after - lag_before) + bias
    return gain > lcp.threshold


# ---------------------------------------------------------------------------
# warning responses


class ResponseKind(str, Enum):
    SPEED = "speed"
    PRIMED = "primed"


@dataclass
class ScheduledResponse:
    kind: ResponseKind
    location: col.Location
    magnitude: float  # m/s^2, signed: negative decelerates
    start: float
    end: float
    warned_at: float


def _truncnorm(rng: np.random.Generator, mean, sd, lo, hi) -> float:
    a, b = (lo - mean) / sd, (hi - mean) / sd
    return float(truncnorm.ppf(rng.random(), a, b, loc=mean, scale=sd))


def apply_warning_response(equipped: bool, signal: col.WarningSignal, now: float, reaction: float,
                           rp: ResponseParams, rng: np.random.Generator) -> ScheduledResponse:
    """Sample a driver's reaction to a warning.

    With probability ``speed_adjust_prob`` the driver adjusts speed after the
    reaction time: decelerating for a front hazard, accelerating for a rear
    one. Otherwise the driver is primed: reactions to the next change ahead
    are timed from the warning rather than from when the change happens.

    Raises:
        ValueError: the vehicle is not equipped.
    """
    if not equipped:
        raise ValueError("only equipped vehicles receive warnings")
    u = rng.random()
    mag = _truncnorm(rng, rp.decel_mean, rp.decel_sd, rp.decel_lower, rp.decel_upper) \
        if signal.location is col.Location.FRONT else \
        _truncnorm(rng, rp.accel_mean, rp.accel_sd, rp.accel_lower, rp.accel_upper)
    if u < rp.speed_adjust_prob:
        signed = -mag if signal.location is col.Location.FRONT else mag
        return ScheduledResponse(ResponseKind.SPEED, signal.location, signed,
                                 now + reaction, now + reaction + rp.duration, now)
    return ScheduledResponse(ResponseKind.PRIMED, signal.location, 0.0, now,
                             now + reaction + rp.duration, now)


# ---------------------------------------------------------------------------
# results


@dataclass
class SimResult:
    seed: int
    config: dict
    throughput: int
    spawned: int
    exited: int
    remaining: int
    queued: int
    collisions: list
    warnings: list
    lane_changes: list
    behavior: list  # per lane-change vehicle: BehaviorRecord dict plus flags
    hazard_steps_equipped: int
    exits: list
    trajectories: list | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["trajectories"] is None:
            d.pop("trajectories")
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def equipped_lc_drac(self) -> list[float]:
        return [b["max_drac"] for b in self.behavior if b["equipped"]]


# ---------------------------------------------------------------------------
# simulation state


class _Fleet:
    """Struct-of-arrays vehicle storage indexed by vehicle id."""

    FLOAT = ("x", "y", "v", "a", "v0", "headway", "length", "width", "react",
             "pend_t", "lc_t0", "cooldown_until", "next_check", "spawn_t")
    INT = ("lane_a", "lane_b", "lc_state", "target", "perceived", "pending", "lc_count")
    BOOL = ("active", "equipped", "mandatory", "from_ramp")

    def __init__(self, cap: int = 256):
        self.n = 0
        self.cap = cap
        for name in self.FLOAT:
            setattr(self, name, np.zeros(cap))
        for name in self.INT:
            setattr(self, name, np.full(cap, -1, dtype=np.int64))
        for name in self.BOOL:
            setattr(self, name, np.zeros(cap, dtype=bool))

    def add(self, **vals) -> int:
        if self.n == self.cap:
            self.cap *= 2
            for name in self.FLOAT + self.INT + self.BOOL:
                old = getattr(self, name)
                new = np.zeros(self.cap, dtype=old.dtype)
                if old.dtype == np.int64:
                    new[:] = -1
                new[:old.size] = old
                setattr(self, name, new)
        i = self.n
        self.n += 1
        for k, val in vals.items():
            getattr(self, k)[i] = val
        return i


class _Simulation:
    def __init__(self, cfg: SimConfig, model=None):
        self.cfg = cfg
        self.method = WarningMethod.parse(cfg.method)
        self.model = model
        if cfg.predictor == "model" and model is None:
            raise SchemaError("predictor 'model' needs model parameters")
        ss = np.random.SeedSequence(cfg.seed)
        streams = ss.spawn(6)
        self.rng_main = np.random.default_rng(streams[0])
        self.rng_ramp = np.random.default_rng(streams[1])
        self.rng_profile = np.random.default_rng(streams[2])
        self.rng_equip = np.random.default_rng(streams[3])
        self.rng_response = np.random.default_rng(streams[4])
        self.f = _Fleet()
        self.t = 0.0
        self.step_no = 0
        self.H = max(2, int(round(cfg.history / cfg.dt)))
        self.F = max(1, int(round(cfg.horizon / cfg.dt)))
        self.hist_x = np.zeros((self.H, 256))
        self.hist_y = np.zeros((self.H, 256))
        self.queues = {1: [], 2: [], 0: []}
        self.next_arrival = {
            "main": self._draw_headway(self.rng_main, cfg.mainline_demand),
            "ramp": self._draw_headway(self.rng_ramp, cfg.ramp_demand),
        }
        self.responses: dict[int, ScheduledResponse] = {}
        self.collided: set = set()
        self.collisions, self.warnings, self.lane_changes, self.exits = [], [], [], []
        self.log_chunks = []
        self.traj = [] if cfg.record_trajectories else None

    # -- spawning ---------------------------------------------------------

    @staticmethod
    def _draw_headway(rng, demand):
        return math.inf if demand <= 0 else float(rng.exponential(3600.0 / demand))

    def _arrivals(self):
        cfg, t = self.cfg, self.t
        while self.next_arrival["main"] <= t:
            lane = 1 + int(self.rng_main.random() < 0.5)
            self.queues[lane].append(self._new_profile(ramp=False))
            self.next_arrival["main"] += self._draw_headway(self.rng_main, cfg.mainline_demand)
        while self.next_arrival["ramp"] <= t:
            self.queues[0].append(self._new_profile(ramp=True))
            self.next_arrival["ramp"] += self._draw_headway(self.rng_ramp, cfg.ramp_demand)

    def _new_profile(self, ramp: bool) -> dict:
        d = self.cfg.driver
        r = self.rng_profile.standard_normal(3)
        u_route = self.rng_profile.random()
        u_eq = self.rng_equip.random()
        v0 = (d.v0_ramp_mean if ramp else d.v0_mean) + d.v0_sd * float(np.clip(r[0], -2.5, 2.5))
        hw = d.headway_mean + d.headway_sd * float(np.clip(r[1], -2.5, 2.5))
        return {
            "v0": max(v0, 5.0), "headway": max(hw, 0.6), "length": d.length, "width": d.width,
            "equipped": bool(u_eq < self.cfg.penetration), "from_ramp": ramp,
            "mandatory": bool(ramp and u_route < self.cfg.ramp_to_mainline),
        }

    def _insert(self):
        f, cfg = self.f, self.cfg
        for lane in (0, 1, 2):
            q = self.queues[lane]
            if not q:
                continue
            prof = q[0]
            occ = self._occupants(lane)
            v_ins = prof["v0"]
            if occ.size:
                last = occ[np.argmin(f.x[occ])]
                gap = f.x[last] - 0.5 * f.length[last] - 0.5 * prof["length"]
                v_ins = min(v_ins, f.v[last])
                need = cfg.driver.s0 + v_ins * prof["headway"]
                if gap < need:
                    continue
            q.pop(0)
            react = cfg.reaction_equipped if (prof["equipped"] and self.method is not WarningMethod.NONE) \
                else cfg.reaction_unequipped
            i = f.add(x=0.0, y=lane * cfg.lane_width, v=v_ins, a=0.0, v0=prof["v0"], headway=prof["headway"],
                      length=prof["length"], width=prof["width"], react=react, pend_t=math.inf,
                      lc_t0=0.0, cooldown_until=self.t + 2.0, next_check=self.t + 1.0, spawn_t=self.t,
                      lane_a=lane, lane_b=-1, lc_state=0, target=-1, perceived=NO_LEADER,
                      pending=NO_LEADER, lc_count=0, active=True, equipped=prof["equipped"],
                      mandatory=prof["mandatory"], from_ramp=prof["from_ramp"])
            if i >= self.hist_x.shape[1]:
                grow = self.hist_x.shape[1]
                self.hist_x = np.concatenate([self.hist_x, np.zeros((self.H, grow))], axis=1)
                self.hist_y = np.concatenate([self.hist_y, np.zeros((self.H, grow))], axis=1)

    # -- topology -----------------------------------------------------------

    def _occupants(self, lane: int) -> np.ndarray:
        f = self.f
        n = f.n
        m = f.active[:n] & ((f.lane_a[:n] == lane) | (f.lane_b[:n] == lane))
        return np.flatnonzero(m)

    def _leaders(self):
        """Leader of every active vehicle in its current lane and (when sweeping) its target lane."""
        f = self.f
        n = f.n
        act = np.flatnonzero(f.active[:n])
        sweep = act[f.lane_b[act] >= 0]
        veh = np.concatenate([act, sweep])
        lane = np.concatenate([f.lane_a[act], f.lane_b[sweep]])
        part = np.concatenate([np.zeros(act.size, int), np.ones(sweep.size, int)])
        order = np.lexsort((veh, f.x[veh], lane))
        veh_s, lane_s, part_s = veh[order], lane[order], part[order]
        lead = np.full(veh_s.size, NO_LEADER)
        same = lane_s[1:] == lane_s[:-1]
        lead[:-1][same] = veh_s[1:][same]
        lead_a = np.full(n, NO_LEADER)
        lead_b = np.full(n, NO_LEADER)
        lead_a[veh_s[part_s == 0]] = lead[part_s == 0]
        lead_b[veh_s[part_s == 1]] = lead[part_s == 1]
        self.lane_sorted = {}
        for L in (0, 1, 2):
            sel = lane_s == L
            ids = veh_s[sel]
            self.lane_sorted[L] = (f.x[ids].tolist(), ids)
        return lead_a, lead_b

    def _gap(self, i, j):
        f = self.f
        return f.x[j] - f.x[i] - 0.5 * (f.length[i] + f.length[j])

    # -- one step -------------------------------------------------------------

    def step(self):
        cfg, f, drv = self.cfg, self.f, self.cfg.driver
        self._arrivals()
        self._insert()
        n = f.n
        lead_a, lead_b = self._leaders()
        act = np.flatnonzero(f.active[:n])
        if act.size == 0:
            self._advance_time()
            return

        # actual leader: the more constraining of the one or two lanes occupied
        acc_a, gap_a, lv_a = self._idm_to(act, lead_a[act])
        acc_b, gap_b, lv_b = self._idm_to(act, lead_b[act])
        use_b = acc_b < acc_a
        actual = np.where(use_b, lead_b[act], lead_a[act])
        gap_act = np.where(use_b, gap_b, gap_a)
        lv_act = np.where(use_b, lv_b, lv_a)
        acc_act = np.minimum(acc_a, acc_b)

        self._check_collisions(act, lead_a[act], gap_a, lead_b[act], gap_b)

        # perception with reaction delay
        v = f.v[act]
        closing = v - np.nan_to_num(lv_act)
        ttc = np.where((closing > 0) & np.isfinite(gap_act), gap_act / np.where(closing > 0, closing, 1.0), np.inf)
        critical = (actual != NO_LEADER) & ((ttc < cfg.emergency_ttc) |
                                            (gap_act < drv.s0 + cfg.emergency_headway * v))
        changed = actual != f.perceived[act]
        fresh = changed & (f.pending[act] != actual)
        if fresh.any():
            idx = act[fresh]
            f.pending[idx] = actual[fresh]
            f.pend_t[idx] = self.t + f.react[idx]
            for i in idx:
                r = self.responses.get(int(i))
                if r is not None and r.kind is ResponseKind.PRIMED and self.t <= r.end:
                    f.pend_t[i] = max(self.t, r.warned_at + f.react[i])
        ready = changed & ((f.pend_t[act] <= self.t + 1e-9) | critical)
        f.perceived[act[ready]] = actual[ready]
        f.pending[act[~changed | ready]] = NO_LEADER
        f.pend_t[act[~changed | ready]] = math.inf

        acc, _, _ = self._idm_to(act, f.perceived[act])
        acc = np.where(critical, np.minimum(acc, acc_act), acc)
        acc = self._apply_responses(act, acc, acc_act)
        f.a[act] = np.clip(acc, -drv.b_max, max(drv.a_max, cfg.response.accel_upper))

        self._log(act, gap_act, lv_act)
        self._lane_changes(act, lead_a)
        self._warnings(act)
        self._move(act)
        self._advance_time()

    def _idm_to(self, idx, leaders):
        f, drv = self.f, self.cfg.driver
        has = leaders != NO_LEADER
        lj = np.where(has, leaders, 0)
        gap = np.where(has, f.x[lj] - f.x[idx] - 0.5 * (f.length[idx] + f.length[lj]), np.inf)
        ok = has & f.active[lj]
        gap = np.where(ok & (gap > -1e6), gap, np.inf)
        # a perceived leader now behind is treated as gone
        gap = np.where(ok & (f.x[lj] < f.x[idx]), np.inf, gap)
        lv = np.where(np.isfinite(gap), f.v[lj], np.nan)
        return idm_accel(f.v[idx], gap, lv, f.v0[idx], f.headway[idx], drv), gap, lv

    def _check_collisions(self, act, la, ga, lb, gb):
        for leaders, gaps in ((la, ga), (lb, gb)):
            bad = np.flatnonzero((leaders != NO_LEADER) & (gaps < 0))
            for k in bad:
                pair = tuple(sorted((int(act[k]), int(leaders[k]))))
                if pair not in self.collided:
                    self.collided.add(pair)
                    self.collisions.append({"t": round(self.t, 6), "pair": list(pair),
                                            "x": float(self.f.x[act[k]])})

    def _apply_responses(self, act, acc, acc_safe):
        if not self.responses:
            return acc
        pos = {int(i): k for k, i in enumerate(act)}
        for vid, r in list(self.responses.items()):
            if self.t > r.end or vid not in pos:
                if self.t > r.end or not self.f.active[vid]:
                    del self.responses[vid]
                continue
            if r.kind is not ResponseKind.SPEED or not (r.start <= self.t < r.end):
                continue
            k = pos[vid]
            if r.magnitude < 0:
                acc[k] = min(acc[k], r.magnitude)
            else:
                acc[k] = max(acc[k], min(r.magnitude, acc_safe[k]))
        return acc

    def _log(self, act, gap, lv):
        f = self.f
        self.log_chunks.append(np.stack([act.astype(float), f.v[act], gap, lv], axis=1))
        if self.traj is not None:
            fr = self.step_no
            for i in act:
                self.traj.append((int(i), fr, float(f.x[i]), float(f.y[i]), float(f.length[i]), float(f.width[i])))

    # -- lane changes -----------------------------------------------------------

    def _neighbors(self, i, lane):
        xs, ids = self.lane_sorted.get(lane, ([], np.empty(0, int)))
        x = self.f.x[i]
        k = bisect.bisect_right(xs, x)
        lead = lag = NO_LEADER
        kk = k
        while kk < len(ids) and ids[kk] == i:
            kk += 1
        if kk < len(ids):
            lead = int(ids[kk])
        kk = k - 1
        while kk >= 0 and ids[kk] == i:
            kk -= 1
        if kk >= 0:
            lag = int(ids[kk])
        return lead, lag

    def _view(self, i, tgt, cur_lead):
        f = self.f
        lead, lag = self._neighbors(i, tgt)
        kw = {"speed": float(f.v[i])}
        if cur_lead != NO_LEADER:
            kw.update(cur_lead_gap=float(self._gap(i, cur_lead)), cur_lead_speed=float(f.v[cur_lead]))
        if lead != NO_LEADER:
            kw.update(tgt_lead_gap=float(self._gap(i, lead)), tgt_lead_speed=float(f.v[lead]))
        if lag != NO_LEADER:
            kw.update(tgt_lag_gap=float(self._gap(lag, i)), tgt_lag_speed=float(f.v[lag]),
                      tgt_lag_v0=float(f.v0[lag]), tgt_lag_headway=float(f.headway[lag]))
        return GapView(**kw), lead, lag

    def _lane_options(self, i):
        f, cfg = self.f, self.cfg
        lane, x = int(f.lane_a[i]), f.x[i]
        opts = []
        for tgt in (lane + 1, lane - 1):
            if not 0 <= tgt <= 2:
                continue
            if min(lane, tgt) == 0 and x < cfg.merge_x:
                continue
            if tgt == 0 and f.mandatory[i]:
                continue
            opts.append(tgt)
        return opts

    def _lane_changes(self, act, lead_a):
        f, cfg, lcp, drv = self.f, self.cfg, self.cfg.lane_change, self.cfg.driver
        t = self.t
        for i in act:
            st = f.lc_state[i]
            if st == 2:
                frac = (t - f.lc_t0[i]) / lcp.duration
                src, tgt = f.lane_a[i], f.lane_b[i]
                if frac >= 1.0:
                    f.lane_a[i], f.lane_b[i], f.lc_state[i] = tgt, -1, 0
                    f.y[i] = tgt * cfg.lane_width
                    f.cooldown_until[i] = t + lcp.cooldown
                    self.lane_changes[f.target[i]]["end_t"] = round(t, 6)
                    f.target[i] = -1
                else:
                    s = 0.5 * (1.0 - math.cos(math.pi * frac))
                    f.y[i] = (src + s * (tgt - src)) * cfg.lane_width
                continue
            if st == 1:
                if t - f.lc_t0[i] >= lcp.intent - 1e-9:
                    tgt = int(f.target[i])
                    view, _, _ = self._view(i, tgt, lead_a[i])
                    # committing only re-checks safety; the incentive was judged at intent
                    if lc_decide(view, f.v0[i], f.headway[i], drv, lcp, mandatory=True):
                        f.lc_state[i] = 2
                        f.lane_b[i] = tgt
                        f.lc_t0[i] = t
                        f.lc_count[i] += 1
                        self.lane_changes.append({"vehicle": int(i), "start_t": round(t, 6), "end_t": None,
                                                  "source": int(f.lane_a[i]), "target": tgt,
                                                  "intent_t": round(t - lcp.intent, 6)})
                        f.target[i] = len(self.lane_changes) - 1
                    else:
                        f.lc_state[i] = 0
                        f.target[i] = -1
                        f.cooldown_until[i] = t + 1.0
                continue
            if t < f.next_check[i] - 1e-9 or t < f.cooldown_until[i] - 1e-9:
                continue
            f.next_check[i] = t + lcp.check_interval
            if f.x[i] > cfg.road_length - lcp.exit_margin:
                continue
            for tgt in self._lane_options(i):
                view, lead, lag = self._view(i, tgt, lead_a[i])
                mand = bool(f.mandatory[i] and f.lane_a[i] == 0 and tgt == 1)
                bias = lcp.keep_right_bias if tgt < f.lane_a[i] else -lcp.keep_right_bias
                if tgt == 0 and not f.from_ramp[i]:
                    bias -= lcp.keep_right_bias  # mainline drivers rarely enter the merge lane
                if lc_decide(view, f.v0[i], f.headway[i], drv, lcp, mandatory=mand, bias=bias):
                    f.lc_state[i] = 1
                    f.target[i] = tgt
                    f.lc_t0[i] = t
                    if self.method is WarningMethod.TTC and f.equipped[i]:
                        self._ttc_warning(i, view, lead, lag)
                    break

    # -- warnings ---------------------------------------------------------------

    def _ttc_warning(self, i, view: GapView, lead, lag):
        best = None
        if lead != NO_LEADER and view.speed > view.tgt_lead_speed:
            ttc = view.tgt_lead_gap / (view.speed - view.tgt_lead_speed)
            if ttc < self.cfg.ttc_threshold:
                best = (ttc, col.Location.FRONT, lead)
        if lag != NO_LEADER and view.tgt_lag_speed > view.speed:
            ttc = view.tgt_lag_gap / (view.tgt_lag_speed - view.speed)
            if ttc < self.cfg.ttc_threshold and (best is None or ttc < best[0]):
                best = (ttc, col.Location.REAR, lag)
        if best is None:
            return
        ev = col.CollisionEvent(tuple(sorted((int(i), int(best[2])))), 0, 0,
                                (float(self.f.x[best[2]]), float(self.f.y[best[2]])))
        self._respond(i, col.WarningSignal(self.F, best[1], ev))

    def _warnings(self, act):
        if self.method is not WarningMethod.LCEW:
            return
        f = self.f
        if self.step_no + 1 < self.H:
            return
        for i in act:
            if not f.equipped[i] or f.lc_state[i] == 0:
                continue
            r = self.responses.get(int(i))
            if r is not None and self.t <= r.end:
                continue
            sig = self._lcew_signal(i)
            if sig is not None:
                self._respond(i, sig)

    def _roi(self, i) -> np.ndarray:
        f, cfg = self.f, self.cfg
        lanes = {int(f.lane_a[i]), int(f.target[i]) if f.target[i] >= 0 else int(f.lane_a[i])}
        n = f.n
        old_enough = f.spawn_t[:n] <= self.t - (self.H - 1) * cfg.dt + 1e-9
        cand = np.flatnonzero(f.active[:n] & old_enough & (np.isin(f.lane_a[:n], list(lanes)) |
                                                            np.isin(f.lane_b[:n], list(lanes))))
        cand = cand[cand != i]
        if cand.size == 0:
            return np.array([i])
        mask = _roi_mask(f.x[i], f.v[i], f.length[i], f.x[cand], f.length[cand], cfg.roi_thw, cfg.roi_rear)
        return np.concatenate([[i], cand[mask]])

    def _lcew_signal(self, i):
        f, cfg = self.f, self.cfg
        if f.spawn_t[i] > self.t - (self.H - 1) * cfg.dt + 1e-9:
            return None
        members = self._roi(i)
        if members.size < 2:
            return None
        order = (self.step_no + 1 + np.arange(self.H)) % self.H
        hist = np.stack([self.hist_x[order][:, members], self.hist_y[order][:, members]], axis=1)
        pred = self._predict(hist)
        scene = SimpleNamespace(history=hist, vehicle_ids=members.tolist(),
                                lengths=f.length[members], widths=f.width[members])
        events = col.detect_collisions(pred, scene)
        return col.issue_warning(events, pred[:, :, 0], self.F)

    def _predict(self, hist):
        if self.model is None:
            vel = hist[-1] - hist[-2]
            return hist[-1][None] + vel[None] * np.arange(1, self.F + 1)[:, None, None]
        from . import stgcnn
        pred = stgcnn.predict(hist, self.model, self.cfg.kernel)
        if pred.shape[0] < self.F:
            tail = pred[-1] + (pred[-1] - pred[-2])[None] * np.arange(1, self.F - pred.shape[0] + 1)[:, None, None]
            pred = np.concatenate([pred, tail])
        return pred[:self.F]

    def _respond(self, i, sig: col.WarningSignal):
        f = self.f
        resp = apply_warning_response(bool(f.equipped[i]), sig, self.t, float(f.react[i]),
                                      self.cfg.response, self.rng_response)
        self.responses[int(i)] = resp
        if resp.kind is ResponseKind.PRIMED and f.pending[i] != NO_LEADER:
            f.pend_t[i] = min(f.pend_t[i], self.t + f.react[i])
        self.warnings.append({
            "t": round(self.t, 6), "vehicle": int(i), "method": self.method.value,
            "P_c": sig.location.value, "pair": [int(p) for p in sig.first_event.pair],
            "step": sig.first_event.step, "response": resp.kind.value,
            "magnitude": resp.magnitude,
        })

    # -- motion -----------------------------------------------------------------

    def _move(self, act):
        f, cfg = self.f, self.cfg
        dt = cfg.dt
        v, a = f.v[act], f.a[act]
        v_new = v + a * dt
        stop = v_new < 0
        dx = np.where(stop, np.where(a < 0, -0.5 * v * v / np.where(a < 0, a, -1.0), 0.0),
                      v * dt + 0.5 * a * dt * dt)
        f.x[act] += np.maximum(dx, 0.0)
        f.v[act] = np.maximum(v_new, 0.0)
        slot = self.step_no % self.H
        self.hist_x[slot, act] = f.x[act]
        self.hist_y[slot, act] = f.y[act]
        out = act[f.x[act] >= cfg.road_length]
        for i in out:
            f.active[i] = False
            self.exits.append({"vehicle": int(i), "t": round(self.t + dt, 6)})
            if f.lc_state[i] == 2:
                self.lane_changes[f.target[i]]["end_t"] = None

    def _advance_time(self):
        self.step_no += 1
        self.t = self.step_no * self.cfg.dt

    # -- results ------------------------------------------------------------------

    def result(self) -> SimResult:
        cfg, f = self.cfg, self.f
        logs = np.concatenate(self.log_chunks) if self.log_chunks else np.zeros((0, 4))
        order = np.argsort(logs[:, 0], kind="stable")
        logs = logs[order]
        ids, starts = np.unique(logs[:, 0].astype(int), return_index=True)
        bounds = dict(zip(ids.tolist(), zip(starts.tolist(), list(starts[1:]) + [len(logs)])))
        lc_vehicles = sorted({lc["vehicle"] for lc in self.lane_changes if lc["start_t"] >= cfg.warmup})
        behavior, hazard = [], 0
        for vid in lc_vehicles:
            s, e = bounds[vid]
            rows = logs[s:e]
            if rows.shape[0] < 3:
                continue
            rec = safety.behavior_metrics(rows[:, 1], rows[:, 2], rows[:, 3], vehicle_id=vid, dt=cfg.dt)
            d = rec.to_dict()
            d["equipped"] = bool(f.equipped[vid])
            d["lane_changes"] = int(f.lc_count[vid])
            behavior.append(d)
            if f.equipped[vid]:
                closing = rows[:, 1] - np.nan_to_num(rows[:, 3])
                with np.errstate(divide="ignore", invalid="ignore"):
                    ttc = np.where((closing > 0) & np.isfinite(rows[:, 2]), rows[:, 2] / closing, np.inf)
                hazard += int(np.sum(ttc < safety.TTC_HAZARD))
        exit_times = [e["t"] for e in self.exits]
        remaining = int(f.active[:f.n].sum())
        traj = None
        if self.traj is not None:
            traj = [list(r) for r in self.traj]
        return SimResult(
            seed=cfg.seed, config=cfg.to_dict(),
            throughput=safety.throughput(exit_times, cfg.warmup, cfg.duration),
            spawned=f.n, exited=len(self.exits), remaining=remaining,
            queued=sum(len(q) for q in self.queues.values()),
            collisions=self.collisions, warnings=self.warnings, lane_changes=self.lane_changes,
            behavior=behavior, hazard_steps_equipped=hazard, exits=self.exits, trajectories=traj,
        )


def _roi_mask(ego_x, ego_v, ego_len, x, lengths, thw, rear):
    from .trajdata import roi_mask
    return roi_mask(ego_x, max(ego_v, 0.0), ego_len, x, lengths, np.ones(x.size, bool), thw, rear)


def run_sim(config: SimConfig, model=None, steps: int | None = None) -> SimResult:
    """Run one simulation and return its result; deterministic per config."""
    sim = _Simulation(config, model)
    total = config.steps if steps is None else steps
    for _ in range(total):
        sim.step()
    return sim.result()


# ---------------------------------------------------------------------------
# penetration sweep


@dataclass
class SweepCell:
    penetration: float
    method: str
    seeds: list
    throughput_mean: float
    per_seed_throughput: list
    max_drac: dict
    max_decel: dict
    max_jerk: dict
    per_seed_drac_q95: list
    collisions: int
    warnings: int

    def to_dict(self) -> dict:
        return asdict(self)


class SweepError(RuntimeError):
    def __init__(self, cell, cause):
        super().__init__(f"sweep cell {cell} failed: {cause}")
        self.cell = cell


def summarize_cell(rate, method, results: Sequence[SimResult]) -> SweepCell:
    recs = [b for r in results for b in r.behavior if b["equipped"]]
    per_seed = []
    for r in results:
        d = r.equipped_lc_drac()
        per_seed.append(float(np.quantile(d, 0.95)) if d else None)
    return SweepCell(
        penetration=rate, method=WarningMethod.parse(method).value, seeds=[r.seed for r in results],
        throughput_mean=float(np.mean([r.throughput for r in results])),
        per_seed_throughput=[r.throughput for r in results],
        max_drac=safety.quantile_summary([b["max_drac"] for b in recs]),
        max_decel=safety.quantile_summary([b["max_decel"] for b in recs]),
        max_jerk=safety.quantile_summary([b["max_jerk"] for b in recs]),
        per_seed_drac_q95=per_seed,
        collisions=sum(len(r.collisions) for r in results),
        warnings=sum(len(r.warnings) for r in results),
    )


def sweep_penetration(base: SimConfig, rates: Sequence[float], methods: Sequence, seeds: Sequence[int],
                      model=None, runner: Callable | None = None,
                      progress: Callable | None = None) -> list[SweepCell]:
    """Run every (rate, method, seed) combination and summarise each (rate, method) cell.

    ``runner`` may replace :func:`run_sim` (for instance to run cells in
    parallel); results are aggregated by cell key, so execution order does
    not matter.
    """
    if not rates or not methods or not seeds:
        raise ValueError("rates, methods and seeds must be nonempty")
    runner = runner or (lambda cfg: run_sim(cfg, model))
    cells = []
    for rate in rates:
        for method in methods:
            results = []
            for seed in seeds:
                cfg = _replace(base, penetration=float(rate), method=WarningMethod.parse(method).value,
                               seed=int(seed))
                try:
                    results.append(runner(cfg))
                except Exception as exc:  # noqa: BLE001 - re-raised with the cell identified
                    raise SweepError((rate, WarningMethod.parse(method).value, seed), exc) from exc
                if progress:
                    progress(rate, method, seed)
            cells.append(summarize_cell(rate, method, results))
    return cells


def _replace(cfg: SimConfig, **changes) -> SimConfig:
    d = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
    d.update(changes)
    return SimConfig(**d)


SWEEP_COLUMNS = ("penetration", "method", "throughput_mean", "drac_q50", "drac_q95", "drac_max",
                 "decel_q50", "decel_q95", "jerk_q50", "jerk_q95", "collisions", "warnings", "n_vehicles")


def sweep_rows(cells: Sequence[SweepCell]) -> list[dict]:
    rows = []
    for c in cells:
        rows.append({
            "penetration": c.penetration, "method": c.method, "throughput_mean": c.throughput_mean,
            "drac_q50": c.max_drac.get("q50"), "drac_q95": c.max_drac.get("q95"),
            "drac_max": c.max_drac.get("max"), "decel_q50": c.max_decel.get("q50"),
            "decel_q95": c.max_decel.get("q95"), "jerk_q50": c.max_jerk.get("q50"),
            "jerk_q95": c.max_jerk.get("q95"), "collisions": c.collisions, "warnings": c.warnings,
            "n_vehicles": c.max_drac.get("count", 0),
        })
    return rows
