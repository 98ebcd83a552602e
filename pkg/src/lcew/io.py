"""Serialization: TOML configs, scene files, model parameters and artifact headers.

Every artifact written here carries a small header with the schema version,
a hash of the configuration that produced it and the seed. No timestamps or
host details are written, so identical inputs give byte-identical files.

Model parameter layout (little endian)::

    8s   magic  b"LCEWPAR\\0"
    u32  format version
    u32  n   length of the UTF-8 config JSON, then n bytes
    u32  tensor count
    per tensor, in the model's canonical order:
        u16 name length, name bytes (UTF-8)
        u8  ndim, then ndim x u32 dims
        prod(dims) x f64, row-major
"""

from __future__ import annotations

import hashlib
import json
import struct
import sys
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import SchemaError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

SCHEMA_VERSION = 1
PARAMS_MAGIC = b"LCEWPAR\x00"
PARAMS_VERSION = 1


def load_toml(path: str | Path) -> dict:
    with open(path, "rb") as fh:
        try:
            return tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise SchemaError(f"{path}: {exc}") from None


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_json_default)


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if hasattr(o, "value"):
        return o.value
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def config_hash(config) -> str:
    return hashlib.sha256(canonical_json(config).encode()).hexdigest()[:16]


def header(kind: str, config, seed) -> dict:
    return {"schema": f"lcew.{kind}", "schema_version": SCHEMA_VERSION,
            "config_hash": config_hash(config), "seed": seed}


def check_header(doc: dict, kind: str) -> dict:
    if doc.get("schema") != f"lcew.{kind}":
        raise SchemaError(f"expected a lcew.{kind} artifact, found {doc.get('schema')!r}")
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise SchemaError(f"unsupported schema version {doc.get('schema_version')!r}")
    return doc


def write_json(path: str | Path, kind: str, config, seed, body: dict) -> None:
    doc = {"header": header(kind, config, seed), **body}
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=2, default=_json_default) + "\n")


def read_json(path: str | Path, kind: str) -> dict:
    doc = json.loads(Path(path).read_text())
    check_header(doc.get("header", {}), kind)
    return doc


def write_jsonl(path: str | Path, kind: str, config, seed, records: Iterable[dict]) -> None:
    """Line-delimited JSON whose first line is the artifact header."""
    with open(path, "w") as fh:
        fh.write(json.dumps({"header": header(kind, config, seed)}, sort_keys=True) + "\n")
        for r in records:
            fh.write(json.dumps(r, sort_keys=True, default=_json_default) + "\n")


def read_jsonl(path: str | Path, kind: str) -> tuple[dict, list[dict]]:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise SchemaError(f"{path}: empty file")
    head = json.loads(lines[0]).get("header", {})
    check_header(head, kind)
    return head, [json.loads(ln) for ln in lines[1:] if ln.strip()]


# ---------------------------------------------------------------------------
# scenes


def scene_to_record(scene) -> dict:
    return {
        "scene_id": scene.scene_id,
        "ego_index": scene.ego_index,
        "vehicle_ids": list(scene.vehicle_ids),
        "t0": scene.t0,
        "history": scene.history.tolist(),
        "future": scene.future.tolist(),
        "lengths": scene.lengths.tolist(),
        "widths": scene.widths.tolist(),
    }


def scene_from_record(rec: dict):
    from .trajdata import Scene
    try:
        return Scene(
            ego_index=int(rec["ego_index"]),
            vehicle_ids=list(rec["vehicle_ids"]),
            history=np.asarray(rec["history"], dtype=float),
            future=np.asarray(rec["future"], dtype=float),
            t0=float(rec["t0"]),
            lengths=np.asarray(rec["lengths"], dtype=float) if rec.get("lengths") is not None else None,
            widths=np.asarray(rec["widths"], dtype=float) if rec.get("widths") is not None else None,
            scene_id=str(rec.get("scene_id", "")),
        )
    except KeyError as exc:
        raise SchemaError(f"scene record missing {exc}") from None


def write_scenes(path, scenes, config=None, seed=None) -> None:
    write_jsonl(path, "scenes", config or {}, seed, (scene_to_record(s) for s in scenes))


def read_scenes(path) -> list:
    _, recs = read_jsonl(path, "scenes")
    return [scene_from_record(r) for r in recs]


# ---------------------------------------------------------------------------
# model parameters


def params_to_bytes(params) -> bytes:
    cfg = canonical_json(params.config.to_dict()).encode()
    out = [PARAMS_MAGIC, struct.pack("<II", PARAMS_VERSION, len(cfg)), cfg,
           struct.pack("<I", len(params.tensors))]
    for name in params.tensors:
        arr = np.ascontiguousarray(params.tensors[name], dtype="<f8")
        nb = name.encode()
        out.append(struct.pack("<H", len(nb)) + nb)
        out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes(order="C"))
    return b"".join(out)


def params_from_bytes(data: bytes):
    from .stgcnn import ModelConfig, ModelParams
    if data[:8] != PARAMS_MAGIC:
        raise SchemaError("not a model parameter file (bad magic)")
    pos = 8
    version, n = struct.unpack_from("<II", data, pos)
    pos += 8
    if version != PARAMS_VERSION:
        raise SchemaError(f"unsupported parameter format version {version}")
    cfg = json.loads(data[pos:pos + n].decode())
    pos += n
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + ln].decode()
        pos += ln
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(shape).astype(float)
        pos += 8 * size
    if pos != len(data):
        raise SchemaError("trailing bytes in parameter file")
    return ModelParams(ModelConfig(**cfg), tensors)


def save_params(path, params) -> None:
    Path(path).write_bytes(params_to_bytes(params))


def load_params(path):
    return params_from_bytes(Path(path).read_bytes())
