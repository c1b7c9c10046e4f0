"""Versioned binary checkpoints (``.rsck``).

Layout, integers little-endian::

    b"RSCK" | u16 version | u32 len | ModelConfig JSON | u32 len | metadata JSON
    | u32 blob count | blobs...

    blob: u16 name len | name (utf-8) | u8 rank | u32 extent * rank
          | float32 LE values (row-major)

Blob names are prefixed by kind: ``param/``, ``buffer/``, ``velocity/``,
``second/`` (Adam second moments) and,
for the best-so-far snapshot kept by training, ``best/param/`` and
``best/buffer/``. Values are stored at 32-bit, so float32 state round-trips
bit-exactly.
"""
import json
import struct
from pathlib import Path

import numpy as np

from .model import ModelConfig, RscnetModel
from .numerics import OptimizerState, Tensor

MAGIC = b"RSCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _pack_blob(name, array):
    raw = name.encode()
    array = np.ascontiguousarray(array, dtype="<f4")
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<B", array.ndim)
    head += struct.pack(f"<{array.ndim}I", *array.shape)
    return head + array.tobytes()


def write_checkpoint(path, config, blobs, meta=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cfg = json.dumps(config.to_dict(), sort_keys=True).encode()
    meta = json.dumps(meta or {}, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<H", VERSION),
             struct.pack("<I", len(cfg)), cfg,
             struct.pack("<I", len(meta)), meta,
             struct.pack("<I", len(blobs))]
    parts += [_pack_blob(name, arr) for name, arr in blobs.items()]
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)
    return path


def read_checkpoint(path):
    """Return ``(ModelConfig, metadata dict, {name: float32 array})``."""
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:4]!r}, expected {MAGIC!r}")
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        out = struct.unpack_from(fmt, data, pos)
        pos += size
        return out

    def take_bytes(n):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        out = data[pos:pos + n]
        pos += n
        return out

    (version,) = take("<H")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    (n,) = take("<I")
    config = ModelConfig.from_dict(json.loads(take_bytes(n)))
    (n,) = take("<I")
    meta = json.loads(take_bytes(n))
    (count,) = take("<I")
    blobs = {}
    for _ in range(count):
        (n,) = take("<H")
        name = take_bytes(n).decode()
        (rank,) = take("<B")
        shape = take(f"<{rank}I")
        size = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(take_bytes(4 * size), dtype="<f4").reshape(shape)
        blobs[name] = arr.astype(np.float32)
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes")
    return config, meta, blobs


def model_blobs(model, prefix=""):
    blobs = {f"{prefix}param/{k}": v.data for k, v in model.params.items()}
    blobs.update({f"{prefix}buffer/{k}": v for k, v in model.buffers.items()})
    return blobs


def model_from_blobs(config, blobs, prefix="", dtype=np.float32):
    params, buffers = {}, {}
    for name, arr in blobs.items():
        if not name.startswith(prefix):
            continue
        kind, _, key = name[len(prefix):].partition("/")
        if kind == "param":
            params[key] = Tensor(arr, requires_grad=True, dtype=dtype)
        elif kind == "buffer":
            buffers[key] = arr.astype(dtype)
    if not params:
        raise CheckpointError(f"no parameters under prefix {prefix!r}")
    template = RscnetModel.initialize(config, seed=0, dtype=dtype)
    missing = set(template.params) - set(params)
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
    for k, v in params.items():
        if k in template.params and v.shape != template.params[k].shape:
            raise CheckpointError(f"parameter {k}: shape {v.shape} != {template.params[k].shape}")
    return RscnetModel(config, params, buffers)


def checkpoint_save(path, model, optimizer_state=None, meta=None, best_model=None):
    blobs = model_blobs(model)
    meta = dict(meta or {})
    if optimizer_state is not None:
        blobs.update({f"velocity/{k}": v for k, v in optimizer_state.velocity.items()})
        blobs.update({f"second/{k}": v for k, v in optimizer_state.second_moment.items()})
        meta["optimizer"] = optimizer_state.hyperparameters()
    if best_model is not None:
        blobs.update(model_blobs(best_model, prefix="best/"))
    return write_checkpoint(path, model.config, blobs, meta)


def checkpoint_load(path, dtype=np.float32):
    """Return ``(model, optimizer_state or None, meta, best_model or None)``."""
    config, meta, blobs = read_checkpoint(path)
    model = model_from_blobs(config, blobs, dtype=dtype)
    state = None
    if "optimizer" in meta:
        def slots(prefix):
            return {k[len(prefix):]: v.astype(dtype) for k, v in blobs.items()
                    if k.startswith(prefix)}
        state = OptimizerState(velocity=slots("velocity/"), second_moment=slots("second/"),
                               **meta["optimizer"])
    best = None
    if any(k.startswith("best/") for k in blobs):
        best = model_from_blobs(config, blobs, prefix="best/", dtype=dtype)
    return model, state, meta, best


def load_model(path, dtype=np.float32, prefer_best=True):
    """Model for inference: the best snapshot when present, else the final weights."""
    model, _, _, best = checkpoint_load(path, dtype)
    return best if (prefer_best and best is not None) else model
