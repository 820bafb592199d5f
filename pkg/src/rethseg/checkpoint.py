"""Binary checkpoints: model config, parameters, optimizer state, RNG.

Layout, all integers little-endian u32 unless noted:

* magic ``RTHN``, format version
* header byte length, then that many bytes of UTF-8 ``key = value`` text
  carrying the model config (``model.`` prefix), completed epoch count,
  best validation score so far, and the training RNG state (``rng.``
  prefix; the 128-bit PCG64 words travel as decimal text because they do
  not fit any fixed-width field)
* tensor count, then per tensor: name length, name bytes, rank, one u32
  per dimension, payload as little-endian float32

Tensor names are prefixed ``param.`` / ``vel.`` / ``buf.`` for parameters,
optimizer velocities, and normalization running statistics.  Payloads are
float32 regardless of the active precision mode, so a checkpoint written
while training in the default mode restores bit-exactly.
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .configio import format_kv, parse_kv_text, rethnet_from_kv, rethnet_to_kv
from .errors import DataError, UsageError
from .network import Model, RethNetConfig, build_model

__all__ = ["Checkpoint", "save_checkpoint", "load_checkpoint", "restore_model"]

_MAGIC = b"RTHN"
_VERSION = 1


@dataclass
class Checkpoint:
    config: RethNetConfig
    epoch: int
    best_score: float
    params: dict[str, np.ndarray]
    norm_buffers: dict[str, np.ndarray]
    velocities: dict[str, np.ndarray]
    rng_state: dict | None


def _header_text(model: Model, epoch: int, best_score: float,
                 rng_state: dict | None) -> str:
    kv = {f"model.{k}": v for k, v in rethnet_to_kv(model.config).items()}
    kv["epoch"] = str(epoch)
    kv["best_score"] = repr(float(best_score))
    if rng_state is not None:
        if rng_state.get("bit_generator") != "PCG64":
            raise UsageError(
                f"only PCG64 rng state can be saved, got {rng_state.get('bit_generator')!r}")
        kv["rng.bit_generator"] = "PCG64"
        kv["rng.state"] = str(rng_state["state"]["state"])
        kv["rng.inc"] = str(rng_state["state"]["inc"])
        kv["rng.has_uint32"] = str(int(rng_state["has_uint32"]))
        kv["rng.uinteger"] = str(int(rng_state["uinteger"]))
    return format_kv(kv)


def _tensor_records(model: Model, velocities: dict[str, np.ndarray] | None):
    for name, p in model.named_parameters():
        yield f"param.{name}", p.data
    for name, state in sorted(model.norms.items()):
        yield f"buf.{name}.mean", state.mean
        yield f"buf.{name}.var", state.var
    if velocities:
        for name in sorted(velocities):
            yield f"vel.{name}", velocities[name]


def save_checkpoint(path, model: Model, *, epoch: int = 0,
                    best_score: float = -math.inf,
                    velocities: dict[str, np.ndarray] | None = None,
                    rng_state: dict | None = None) -> None:
    header = _header_text(model, epoch, best_score, rng_state).encode()
    records = list(_tensor_records(model, velocities))
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", _VERSION))
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        f.write(struct.pack("<I", len(records)))
        for name, arr in records:
            nb = name.encode()
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf: bytes, path: str):
        self.buf = buf
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise DataError(
                f"{self.path}: truncated at byte {len(self.buf)}, "
                f"needed {n} bytes from byte {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: checkpoint not found")
    r = _Reader(path.read_bytes(), str(path))
    magic = r.take(4)
    if magic != _MAGIC:
        raise DataError(f"{path}: bad magic {magic!r} at byte 0")
    version = r.u32()
    if version != _VERSION:
        raise DataError(f"{path}: unsupported format version {version}")
    try:
        header = r.take(r.u32()).decode()
    except UnicodeDecodeError as exc:
        raise DataError(f"{path}: header is not valid UTF-8 ({exc})") from None
    try:
        kv = parse_kv_text(header, source=f"{path}(header)")
        model_kv = {k[len("model."):]: v for k, v in kv.items()
                    if k.startswith("model.")}
        config = rethnet_from_kv(model_kv, exact=True)
        epoch = int(kv.get("epoch", "0"))
        best_score = float(kv.get("best_score", "-inf"))
        rng_state = None
        if "rng.bit_generator" in kv:
            if kv["rng.bit_generator"] != "PCG64":
                raise DataError(
                    f"{path}: unsupported rng {kv['rng.bit_generator']!r}")
            rng_state = {
                "bit_generator": "PCG64",
                "state": {"state": int(kv["rng.state"]), "inc": int(kv["rng.inc"])},
                "has_uint32": int(kv["rng.has_uint32"]),
                "uinteger": int(kv["rng.uinteger"]),
            }
    except (UsageError, KeyError, ValueError) as exc:
        raise DataError(f"{path}: bad header: {exc}") from None

    count = r.u32()
    params: dict[str, np.ndarray] = {}
    norm_buffers: dict[str, np.ndarray] = {}
    velocities: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = r.take(r.u32()).decode()
        rank = r.u32()
        if rank > 8:
            raise DataError(f"{path}: tensor {name!r} has implausible rank {rank}")
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank))
        n_items = int(np.prod(dims, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(r.take(4 * n_items), dtype="<f4").reshape(dims).copy()
        if name.startswith("param."):
            params[name[len("param."):]] = arr
        elif name.startswith("buf."):
            norm_buffers[name[len("buf."):]] = arr
        elif name.startswith("vel."):
            velocities[name[len("vel."):]] = arr
        else:
            raise DataError(f"{path}: unknown tensor kind {name!r}")
    if r.pos != len(r.buf):
        raise DataError(f"{path}: {len(r.buf) - r.pos} trailing bytes at byte {r.pos}")
    return Checkpoint(config=config, epoch=epoch, best_score=best_score,
                      params=params, norm_buffers=norm_buffers,
                      velocities=velocities, rng_state=rng_state)


def restore_model(ckpt: Checkpoint) -> Model:
    """Rebuild a model and overwrite its tensors with checkpoint values."""
    model = build_model(ckpt.config)
    names = {name for name, _ in model.named_parameters()}
    if names != set(ckpt.params):
        extra = sorted(set(ckpt.params) - names)
        missing = sorted(names - set(ckpt.params))
        raise DataError(
            f"checkpoint parameters do not match the config: "
            f"missing {missing[:4]}, unexpected {extra[:4]}")
    for name, p in model.named_parameters():
        arr = ckpt.params[name]
        if tuple(arr.shape) != p.shape:
            raise DataError(
                f"checkpoint tensor {name!r} has shape {tuple(arr.shape)}, "
                f"model expects {p.shape}")
        p.data = np.asarray(arr, dtype=p.data.dtype)
    for name, state in model.norms.items():
        mean = ckpt.norm_buffers.get(f"{name}.mean")
        var = ckpt.norm_buffers.get(f"{name}.var")
        if mean is None or var is None:
            raise DataError(f"checkpoint is missing running stats for {name!r}")
        state.mean = np.asarray(mean, dtype=state.mean.dtype)
        state.var = np.asarray(var, dtype=state.var.dtype)
    return model
