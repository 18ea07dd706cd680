"""Binary checkpoint format.

Little-endian layout::

    b"HDPL" | version u32 | config_len u32 | config (UTF-8 JSON)
    tensor_count u32
    per tensor: name_len u32 | name | rank u32 | dims u64 * rank | dtype u8
    raw tensor bytes, manifest order
    step u64 | adam_t u64 | best_val f64
    rng seed u64 | rng counter u64
    crc32 u32 of everything above

Tensors are the model parameters followed by the AdamW moments, named
``m.<param>`` and ``v.<param>``.
"""

from __future__ import annotations

import io
import json
import os
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import ModelConfig, TransformerModel
from .rng import RngState
from .training import OptimizerState, ScheduleConfig, TrainState

MAGIC = b"HDPL"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAGS = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class CheckpointError(ValueError):
    pass


@dataclass
class RawCheckpoint:
    config: dict
    tensors: dict[str, np.ndarray]
    step: int
    adam_t: int
    best_val: float
    rng: RngState


def _state_tensors(state: TrainState) -> dict[str, np.ndarray]:
    params = state.model.named_parameters()
    out = {name: p.data for name, p in params.items()}
    out.update({f"m.{k}": v for k, v in state.opt.m.items()})
    out.update({f"v.{k}": v for k, v in state.opt.v.items()})
    return out


def state_config(state: TrainState, extra: dict | None = None) -> dict:
    cfg = {
        "model": state.model.config.to_dict(),
        "schedule": {
            "peak_lr": state.schedule.peak_lr,
            "min_lr": state.schedule.min_lr,
            "warmup_steps": state.schedule.warmup_steps,
            "max_steps": state.schedule.max_steps,
        },
        "optimizer": {
            "beta1": state.opt.beta1,
            "beta2": state.opt.beta2,
            "eps": state.opt.eps,
            "weight_decay": state.opt.weight_decay,
        },
    }
    if extra:
        cfg["run"] = extra
    return cfg


def encode(config: dict, tensors: dict[str, np.ndarray], step: int, adam_t: int, best_val: float, rng: RngState) -> bytes:
    buf = io.BytesIO()
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(blob)))
    buf.write(blob)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        if arr.dtype not in _TAGS:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
        raw_name = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw_name)))
        buf.write(raw_name)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(struct.pack("<B", _TAGS[arr.dtype]))
    for arr in tensors.values():
        buf.write(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())
    buf.write(struct.pack("<QQd", step, adam_t, best_val))
    buf.write(struct.pack("<QQ", *rng.words()))
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode(data: bytes) -> RawCheckpoint:
    if len(data) < 8 or data[:4] != MAGIC:
        raise CheckpointError("not an HDPL checkpoint (bad magic)")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointError("checkpoint is corrupt or truncated (CRC mismatch)")
    view = memoryview(body)
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(view):
            raise CheckpointError("checkpoint ends early")
        vals = struct.unpack_from(fmt, view, pos)
        pos += size
        return vals

    version, blob_len = take("<II")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    config = json.loads(bytes(view[pos : pos + blob_len]).decode("utf-8"))
    pos += blob_len
    (count,) = take("<I")
    manifest = []
    for _ in range(count):
        (name_len,) = take("<I")
        name = bytes(view[pos : pos + name_len]).decode("utf-8")
        pos += name_len
        (rank,) = take("<I")
        dims = take(f"<{rank}Q") if rank else ()
        (tag,) = take("<B")
        if tag not in _DTYPES:
            raise CheckpointError(f"unknown dtype tag {tag} for {name}")
        manifest.append((name, tuple(dims), _DTYPES[tag]))
    tensors = {}
    for name, dims, dtype in manifest:
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        if pos + nbytes > len(view):
            raise CheckpointError("checkpoint ends early")
        tensors[name] = np.frombuffer(view[pos : pos + nbytes], dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))
        pos += nbytes
    step, adam_t, best_val = take("<QQd")
    seed, counter = take("<QQ")
    if pos != len(view):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return RawCheckpoint(config, tensors, step, adam_t, best_val, RngState(seed, counter))


def save_checkpoint(state: TrainState, path: str | Path, extra_config: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = encode(
        state_config(state, extra_config),
        _state_tensors(state),
        state.step,
        state.opt.t,
        state.best_val,
        state.rng,
    )
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def read_checkpoint(path: str | Path) -> RawCheckpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode(data)


def load_checkpoint(path: str | Path, model: TransformerModel | None = None) -> TrainState:
    """Rebuild a TrainState; with ``model`` given, its manifest must match."""
    raw = read_checkpoint(path)
    cfg = raw.config
    if model is None:
        model_cfg = ModelConfig(**cfg["model"])
        model = TransformerModel(model_cfg, seed=raw.rng.seed)
    params = model.named_parameters()
    expected = {name: p.shape for name, p in params.items()}
    expected.update({f"m.{k}": s for k, s in list(expected.items())})
    expected.update({f"v.{k}": s for k, s in list(expected.items()) if not k.startswith("m.")})
    found = {name: arr.shape for name, arr in raw.tensors.items()}
    if found != expected:
        missing = sorted(set(expected) - set(found))[:3]
        extra = sorted(set(found) - set(expected))[:3]
        raise CheckpointError(f"tensor manifest mismatch (missing {missing}, unexpected {extra})")
    for name, p in params.items():
        p.data = raw.tensors[name].astype(p.dtype).copy()
    opt = OptimizerState(
        m={k: raw.tensors[f"m.{k}"].copy() for k in params},
        v={k: raw.tensors[f"v.{k}"].copy() for k in params},
        t=raw.adam_t,
        **cfg.get("optimizer", {}),
    )
    schedule = ScheduleConfig(**cfg["schedule"])
    return TrainState(model=model, opt=opt, schedule=schedule, rng=raw.rng, step=raw.step, best_val=raw.best_val)
