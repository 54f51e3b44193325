"""Binary checkpoint container.

Layout (all integers little-endian)::

    magic            8 bytes  b"MERIDCKP"
    format_version   u32
    meta_len         u32, followed by UTF-8 JSON (config snapshot, step counter, extras)
    section_count    u32
    per section:     u16 name_len, name, u32 array_count
      per array:     u16 name_len, name, u8 dtype code, u8 ndim, u32 dims[ndim], raw data

Sections and arrays are written in sorted order so identical contents give identical bytes.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

MAGIC = b"MERIDCKP"
FORMAT_VERSION = 1

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("u1")}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: dict
    sections: dict[str, dict[str, np.ndarray]]
    step: int = 0
    extra: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION


def module_arrays(module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def load_module_arrays(module: torch.nn.Module, arrays: dict[str, np.ndarray]):
    state = module.state_dict()
    missing = sorted(set(state) - set(arrays))
    if missing:
        raise CheckpointError(f"checkpoint section lacks parameters {missing[:5]}")
    module.load_state_dict({k: torch.as_tensor(arrays[k]).to(state[k].dtype) for k in state})


def _encode_array(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype == np.bool_:
        arr = arr.astype(np.uint8)
    if arr.dtype.kind == "f":
        code = 0 if arr.dtype.itemsize == 4 else 1
    elif arr.dtype.kind in "iu" and arr.dtype != np.uint8:
        code = 2
    elif arr.dtype == np.uint8:
        code = 3
    else:
        raise CheckpointError(f"unsupported dtype {arr.dtype}")
    arr = arr.astype(_DTYPES[code], copy=False)
    head = struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr).tobytes()


def _name(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def dumps(ckpt: Checkpoint) -> bytes:
    meta = {"config": ckpt.config, "step": int(ckpt.step), "extra": ckpt.extra}
    meta_raw = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", ckpt.format_version, len(meta_raw)), meta_raw,
             struct.pack("<I", len(ckpt.sections))]
    for sec_name in sorted(ckpt.sections):
        arrays = ckpt.sections[sec_name]
        parts += [_name(sec_name), struct.pack("<I", len(arrays))]
        for arr_name in sorted(arrays):
            parts += [_name(arr_name), _encode_array(arrays[arr_name])]
    return b"".join(parts)


class _Reader:
    def __init__(self, raw: bytes):
        self.raw, self.pos = raw, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError("truncated checkpoint")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def name(self) -> str:
        (n,) = self.unpack("<H")
        return self.take(n).decode("utf-8")


def loads(raw: bytes) -> Checkpoint:
    r = _Reader(raw)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, meta_len = r.unpack("<II")
    if version > FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format {version} is newer than supported {FORMAT_VERSION}")
    meta = json.loads(r.take(meta_len).decode("utf-8"))
    (n_sections,) = r.unpack("<I")
    sections = {}
    for _ in range(n_sections):
        sec_name = r.name()
        (n_arrays,) = r.unpack("<I")
        arrays = {}
        for _ in range(n_arrays):
            arr_name = r.name()
            code, ndim = r.unpack("<BB")
            shape = r.unpack(f"<{ndim}I") if ndim else ()
            dt = _DTYPES[code]
            count = int(np.prod(shape)) if shape else 1
            arrays[arr_name] = np.frombuffer(r.take(count * dt.itemsize), dtype=dt).reshape(shape).copy()
        sections[sec_name] = arrays
    return Checkpoint(meta["config"], sections, meta["step"], meta.get("extra", {}), version)


def save_checkpoint(path, ckpt: Checkpoint):
    Path(path).write_bytes(dumps(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return loads(Path(path).read_bytes())


def save_sections(path, sections: dict, extra: dict | None = None, config: dict | None = None, step: int = 0):
    save_checkpoint(path, Checkpoint(config or {}, sections, step, extra or {}))
