"""Command-line pipeline: each subcommand is one stage, chained through files.

Every artifact embeds the schema version, a hash of the effective
configuration and the seed. Exit codes: 0 success, 1 runtime failure,
2 invalid configuration or arguments.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
import time
from importlib import resources
from pathlib import Path
from types import SimpleNamespace

import numpy as np

from . import collision as col
from . import evaluation, graphkernels as gk, io, microsim, safety, stgcnn, trajdata
from .errors import LCEWError, SchemaError

logger = logging.getLogger("lcew")

SUBCOMMANDS = ("ingest", "extract", "train", "predict", "detect", "warn",
               "simulate", "sweep", "report", "selftest")
TOP_KEYS = {"seed", "kernel", "horizon", "history", "stride", "model", "sim", "sweep", "lanes"}


class ConfigError(LCEWError):
    pass


# ---------------------------------------------------------------------------
# configuration


@dataclasses.dataclass
class PipelineConfig:
    seed: int = 0
    kernel: str = "mi"
    horizon: int = 20
    history: int = 20
    stride: int = 10
    model: dict = dataclasses.field(default_factory=dict)
    sim: dict = dataclasses.field(default_factory=dict)
    sweep: dict = dataclasses.field(default_factory=dict)
    lanes: list | None = None

    def model_config(self, T: int | None = None, F: int | None = None) -> stgcnn.ModelConfig:
        kw = {**self.model, "seed": self.seed}
        kw["T"] = T if T is not None else kw.get("T", self.history)
        kw["F"] = F if F is not None else kw.get("F", self.horizon)
        return stgcnn.ModelConfig(**kw)

    def sim_config(self) -> microsim.SimConfig:
        return microsim.SimConfig.from_dict({**self.sim, "seed": self.seed}, require_seed=True)

    def lane_geometry(self) -> trajdata.LaneGeometry:
        if self.lanes:
            return trajdata.LaneGeometry.from_dict({"lane": self.lanes})
        return trajdata.LaneGeometry.straight(3, 3.5, length=5000.0, first_id=0)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _check_keys(section: dict, allowed, prefix: str) -> None:
    for key in section:
        if key not in allowed:
            raise ConfigError(f"unknown config key '{prefix}{key}'")


SWEEP_KEYS = {"rates", "methods", "seeds"}


def build_config(args) -> PipelineConfig:
    data = io.load_toml(args.config) if args.config else {}
    _check_keys(data, TOP_KEYS, "")
    model_keys = {f.name for f in dataclasses.fields(stgcnn.ModelConfig)}
    _check_keys(data.get("model", {}), model_keys, "model.")
    _check_keys(data.get("sweep", {}), SWEEP_KEYS, "sweep.")
    lanes = data.get("lanes")
    cfg = PipelineConfig(**{k: v for k, v in data.items()})
    if lanes is not None and not isinstance(lanes, list):
        raise ConfigError("config key 'lanes' must be an array of tables")
    if args.seed is not None:
        cfg.seed = args.seed
    if args.kernel is not None:
        cfg.kernel = args.kernel
    if args.horizon is not None:
        cfg.horizon = args.horizon
    try:
        gk.KernelKind.parse(cfg.kernel)
    except ValueError:
        raise ConfigError(f"config key 'kernel': unknown kernel {cfg.kernel!r}") from None
    try:
        # validate the sim table eagerly so errors name their key
        microsim.SimConfig.from_dict({**cfg.sim, "seed": cfg.seed}, prefix="sim")
        cfg.model_config()
    except SchemaError as exc:
        raise ConfigError(str(exc)) from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"model: {exc}") from None
    return cfg


# ---------------------------------------------------------------------------
# helpers


def _out(args, name: str) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out / name


def bundled_scene_path() -> Path:
    return Path(str(resources.files("lcew") / "data" / "synthetic_scene.jsonl"))


def _input(args, default: Path | None = None) -> Path:
    if args.input:
        return Path(args.input)
    if default is not None:
        return default
    raise ConfigError("--input is required for this subcommand")


def _ego_path(rec: dict) -> np.ndarray:
    pred = np.asarray(rec["pred"], dtype=float)
    return pred[:, :, rec["ego_index"]]


# ---------------------------------------------------------------------------
# subcommands


def cmd_ingest(args, cfg: PipelineConfig) -> None:
    tracks = trajdata.parse_trajectory_file(_input(args))
    recs = [{"id": tr.id, "length": tr.length, "width": tr.width, "agent_type": tr.agent_type,
             "t": tr.t.tolist(), "x": tr.x.tolist(), "y": tr.y.tolist(),
             "vx": tr.vx.tolist(), "vy": tr.vy.tolist()} for tr in tracks]
    io.write_jsonl(_out(args, "tracks.jsonl"), "tracks", cfg.to_dict(), cfg.seed, recs)
    print(f"ingested {len(tracks)} tracks")


def _load_tracks(path: Path) -> list[trajdata.VehicleTrack]:
    if path.suffix == ".jsonl":
        _, recs = io.read_jsonl(path, "tracks")
        return [trajdata.VehicleTrack(r["id"], r["length"], r["width"], r["t"], r["x"], r["y"],
                                      r["vx"], r["vy"], r.get("agent_type", "car")) for r in recs]
    return trajdata.parse_trajectory_file(path)


def cmd_extract(args, cfg: PipelineConfig) -> None:
    tracks = _load_tracks(_input(args))
    lanes = cfg.lane_geometry()
    events, diags = trajdata.scan_lane_changes(tracks, lanes)
    by_id = {tr.id: tr for tr in tracks}
    scenes = []
    for ev in events:
        # windows reach a history length before and a horizon after the manoeuvre
        dt = trajdata.DT
        padded = trajdata.pad_event(ev, cfg.history * dt, cfg.horizon * dt, by_id[ev.ego_id])
        scenes += trajdata.make_scene_windows(padded, tracks, lanes, T=cfg.history, F=cfg.horizon,
                                              stride=cfg.stride)
    io.write_jsonl(_out(args, "events.jsonl"), "events", cfg.to_dict(), cfg.seed,
                   [dataclasses.asdict(e) for e in events])
    io.write_jsonl(_out(args, "diagnostics.jsonl"), "diagnostics", cfg.to_dict(), cfg.seed,
                   [dataclasses.asdict(d) for d in diags])
    io.write_scenes(_out(args, "scenes.jsonl"), scenes, cfg.to_dict(), cfg.seed)
    print(f"{len(events)} events, {len(diags)} discarded, {len(scenes)} scenes")


def cmd_train(args, cfg: PipelineConfig) -> None:
    scenes = io.read_scenes(_input(args))
    if not scenes:
        raise LCEWError("no scenes to train on")
    kind = gk.KernelKind.parse(cfg.kernel)
    if args.compare:
        groups = _event_groups(scenes)
        names = sorted(set(groups))
        corpus = evaluation.Corpus(scenes, [names.index(g) for g in groups], names)
        horizons = [h for h in evaluation.HORIZONS if h <= min(s.F for s in scenes)]
        report = evaluation.compare_kernels(corpus, cfg.model_config(T=scenes[0].T), horizons, seed=cfg.seed)
        io.write_json(_out(args, "comparison.json"), "comparison", cfg.to_dict(), cfg.seed, report)
        print(evaluation.table_text(report))
        return
    F = min(cfg.horizon, min(s.F for s in scenes))
    mcfg = cfg.model_config(T=scenes[0].T, F=F)
    # hold out 40% of the events for validation when there are enough of them
    ev = _event_groups(scenes)
    names = sorted(set(ev))
    perm = np.random.default_rng(cfg.seed).permutation(len(names))
    val_ev = {names[k] for k in perm[:int(round(0.4 * len(names)))]} if len(names) > 2 else set()
    train = [s for s, e in zip(scenes, ev) if e not in val_ev]
    val = [s for s, e in zip(scenes, ev) if e in val_ev]
    params, report = stgcnn.train(train, kind, mcfg, validation=val)
    io.save_params(_out(args, "params.bin"), params)
    io.write_json(_out(args, "train_report.json"), "train_report", cfg.to_dict(), cfg.seed, report.to_dict())
    print(f"trained {kind.value} model on {len(train)} scenes, final loss {report.epochs[-1]['train_loss']:.4g}")


def _event_groups(scenes) -> list:
    """Scenes cut from the same event share the id prefix before '@'."""
    return [s.scene_id.rsplit("@", 1)[0] if "@" in s.scene_id else s.scene_id for s in scenes]


def cmd_predict(args, cfg: PipelineConfig) -> None:
    scenes = io.read_scenes(_input(args, bundled_scene_path()))
    kind = gk.KernelKind.parse(cfg.kernel)
    if args.params:
        params = io.load_params(args.params)
    else:
        params = stgcnn.ModelParams.zeros(cfg.model_config(T=scenes[0].T, F=cfg.horizon))
    recs = []
    for sc in scenes:
        pred = stgcnn.predict(sc, params, kind)
        recs.append({"scene_id": sc.scene_id, "ego_index": sc.ego_index, "vehicle_ids": sc.vehicle_ids,
                     "history_tail": sc.history[-2:].tolist(), "pred": pred.tolist(),
                     "lengths": sc.lengths.tolist(), "widths": sc.widths.tolist(),
                     "T": sc.T, "F": int(pred.shape[0])})
    io.write_jsonl(_out(args, "predictions.jsonl"), "predictions", cfg.to_dict(), cfg.seed, recs)
    print(f"predicted {len(recs)} scenes")


def cmd_detect(args, cfg: PipelineConfig) -> None:
    _, preds = io.read_jsonl(_input(args), "predictions")
    out = []
    for rec in preds:
        scene = SimpleNamespace(history=np.asarray(rec["history_tail"]), vehicle_ids=rec["vehicle_ids"],
                                lengths=rec["lengths"], widths=rec["widths"])
        events = col.detect_collisions(np.asarray(rec["pred"]), scene)
        # steps are numbered from the scene's full history length
        shift = rec["T"] - scene.history.shape[0]
        for e in events:
            r = col.event_record(e, rec["scene_id"])
            r["step"] += shift
            out.append(r)
    io.write_jsonl(_out(args, "collisions.jsonl"), "collisions", cfg.to_dict(), cfg.seed, out)
    print(f"{len(out)} predicted collisions")


def cmd_warn(args, cfg: PipelineConfig) -> None:
    _, events = io.read_jsonl(_input(args), "collisions")
    if not args.predictions:
        raise ConfigError("--predictions is required for warn")
    _, preds = io.read_jsonl(Path(args.predictions), "predictions")
    by_scene: dict = {}
    for e in events:
        by_scene.setdefault(e["scene_id"], []).append(
            col.CollisionEvent(tuple(e["pair"]), e["step"], e["horizon_index"], tuple(e["location_hint"])))
    out = []
    for rec in preds:
        sig = col.issue_warning(by_scene.get(rec["scene_id"], []), _ego_path(rec), rec["F"])
        if sig is not None:
            out.append(col.warning_record(sig, rec["scene_id"]))
    io.write_jsonl(_out(args, "warnings.jsonl"), "warnings", cfg.to_dict(), cfg.seed, out)
    print(f"{len(out)} warnings")


def _load_model_for_sim(args):
    return io.load_params(args.params) if args.params else None


def cmd_simulate(args, cfg: PipelineConfig) -> None:
    scfg = cfg.sim_config()
    model = _load_model_for_sim(args)
    if model is not None:
        scfg = dataclasses.replace(scfg, predictor="model")
    res = microsim.run_sim(scfg, model)
    body = res.to_dict()
    log = body.pop("warnings")
    io.write_json(_out(args, "sim_result.json"), "sim_result", cfg.to_dict(), cfg.seed, body)
    io.write_jsonl(_out(args, "sim_events.jsonl"), "sim_events", cfg.to_dict(), cfg.seed,
                   [{"kind": "warning", **w} for w in log] +
                   [{"kind": "collision", **c} for c in res.collisions] +
                   [{"kind": "exit", **e} for e in res.exits])
    summary = safety.behavior_summary([safety.BehaviorRecord(b["vehicle_id"], b["max_drac"], b["max_decel"],
                                                             b["max_jerk"]) for b in res.behavior])
    io.write_json(_out(args, "sim_summary.json"), "sim_summary", cfg.to_dict(), cfg.seed,
                  {"throughput": res.throughput, "collisions": len(res.collisions),
                   "warnings": len(log), "distributions": summary})
    print(f"throughput {res.throughput}, {len(res.collisions)} collisions, {len(log)} warnings")


def cmd_sweep(args, cfg: PipelineConfig) -> None:
    scfg = cfg.sim_config()
    rates = cfg.sweep.get("rates", [0.05, 0.15, 0.25])
    methods = cfg.sweep.get("methods", ["none", "ttc", "lcew"])
    seeds = cfg.sweep.get("seeds", list(range(cfg.seed, cfg.seed + 3)))
    model = _load_model_for_sim(args)
    if model is not None:
        scfg = dataclasses.replace(scfg, predictor="model")
    cells = microsim.sweep_penetration(scfg, rates, methods, seeds, model=model)
    rows = microsim.sweep_rows(cells)
    path = _out(args, "sweep.csv")
    head = io.header("sweep", cfg.to_dict(), cfg.seed)
    with open(path, "w", newline="") as fh:
        fh.write(f"# {json.dumps(head, sort_keys=True)}\n")
        w = csv.DictWriter(fh, fieldnames=microsim.SWEEP_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    io.write_json(_out(args, "sweep_summary.json"), "sweep_summary", cfg.to_dict(), cfg.seed,
                  {"cells": [c.to_dict() for c in cells]})
    print(f"{len(cells)} cells written")


def cmd_report(args, cfg: PipelineConfig) -> None:
    """Render previously written artifacts; never recomputes anything."""
    src = Path(args.input) if args.input else Path(args.out)
    parts = []
    f = src / "comparison.json"
    if f.exists():
        parts.append("Kernel comparison (test scenes)\n" + evaluation.table_text(io.read_json(f, "comparison")))
    f = src / "train_report.json"
    if f.exists():
        rep = io.read_json(f, "train_report")
        last = rep["epochs"][-1]
        parts.append(f"Training: kernel {rep['kind']}, {len(rep['epochs'])} epochs, "
                     f"final train loss {last['train_loss']:.4g}, lr {last['lr']}")
    f = src / "sweep_summary.json"
    if f.exists():
        lines = ["Penetration sweep", "rate    method  throughput  drac_q95  decel_q95  jerk_q95"]
        for c in io.read_json(f, "sweep_summary")["cells"]:
            lines.append(f"{c['penetration']:<7} {c['method']:<7} {c['throughput_mean']:10.1f}  "
                         f"{c['max_drac'].get('q95', float('nan')):8.3f}  "
                         f"{c['max_decel'].get('q95', float('nan')):9.3f}  "
                         f"{c['max_jerk'].get('q95', float('nan')):8.3f}")
        parts.append("\n".join(lines))
    f = src / "sim_summary.json"
    if f.exists():
        s = io.read_json(f, "sim_summary")
        parts.append(f"Simulation: throughput {s['throughput']}, collisions {s['collisions']}, "
                     f"warnings {s['warnings']}")
    f = src / "warnings.jsonl"
    if f.exists():
        _, w = io.read_jsonl(f, "warnings")
        parts.append(f"Offline warnings: {len(w)} ({sum(r['P_c'] == 'front' for r in w)} front)")
    if not parts:
        raise LCEWError(f"no artifacts found in {src}")
    text = "\n\n".join(parts) + "\n"
    _out(args, "report.txt").write_text(text)
    print(text, end="")


def cmd_selftest(args, cfg: PipelineConfig) -> int:
    from . import selftest
    results = selftest.run_all(seed=cfg.seed)
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    return 0 if all(ok for _, ok, _ in results) else 1


COMMANDS = {name: globals()[f"cmd_{name}"] for name in SUBCOMMANDS}


# ---------------------------------------------------------------------------
# entry point


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lcew", description="Lane-change early-warning pipeline")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML configuration file")
    common.add_argument("--seed", type=int, help="random seed (overrides the config)")
    common.add_argument("--kernel", choices=["mi", "l2", "long"], help="adjacency kernel")
    common.add_argument("--horizon", type=int, help="prediction horizon in steps")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--input", help="input artifact or data file")
    sub = p.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        sp = sub.add_parser(name, parents=[common], help=COMMANDS[name].__doc__)
        if name in ("predict", "simulate", "sweep"):
            sp.add_argument("--params", help="trained model parameters")
        if name == "warn":
            sp.add_argument("--predictions", help="predictions artifact matching the collisions")
        if name == "train":
            sp.add_argument("--compare", action="store_true",
                            help="run the kernel comparison across horizons instead")
    return p


def run_command(argv=None) -> int:
    level = os.environ.get("LCEW_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = build_config(args)
    except (ConfigError, SchemaError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        t0 = time.perf_counter()
        code = COMMANDS[args.command](args, cfg)
        logger.info("%s finished in %.1f s", args.command, time.perf_counter() - t0)
        return int(code or 0)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (LCEWError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_command())
