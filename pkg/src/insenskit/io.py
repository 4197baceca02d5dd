"""Serialization of fields, traces and controls.

Binary container: little-endian header (magic, version, kind, dims) followed by
T and dt as float64 and the payload as row-major float64, time level outermost.
CSV emission is for eyeballing, one row per time level.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Union

import numpy as np

from .domain import Grid
from .errors import DimensionMismatch, ParseError
from .pde import BoundaryTrace, Control, SpaceTimeField

_MAGIC = b"ISKB"
_VERSION = 1
_KINDS = {"field": 0, "trace": 1, "control": 2}
_KIND_NAMES = {v: k for k, v in _KINDS.items()}

Payload = Union[SpaceTimeField, BoundaryTrace, Control]


def _kind_and_dims(obj: Payload) -> tuple[int, tuple[int, ...]]:
    if isinstance(obj, SpaceTimeField):
        return _KINDS["field"], obj.values.shape
    if isinstance(obj, BoundaryTrace):
        return _KINDS["trace"], obj.values.shape
    if isinstance(obj, Control):
        return _KINDS["control"], obj.values.shape
    raise DimensionMismatch(f"cannot serialize object of type {type(obj).__name__}")


def save_binary(obj: Payload, path) -> None:
    kind, dims = _kind_and_dims(obj)
    header = _MAGIC + struct.pack("<BBB", _VERSION, kind, len(dims))
    header += struct.pack(f"<{len(dims)}q", *dims)
    header += struct.pack("<dd", obj.t_horizon, obj.dt)
    data = np.ascontiguousarray(obj.values, dtype="<f8").tobytes()
    Path(path).write_bytes(header + data)


def load_binary(path, grid: Grid | None = None) -> Payload:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ParseError(f"{path}: not a toolkit binary container")
    version, kind, ndim = struct.unpack("<BBB", raw[4:7])
    if version != _VERSION:
        raise ParseError(f"{path}: unsupported container version {version}")
    off = 7
    dims = struct.unpack(f"<{ndim}q", raw[off : off + 8 * ndim])
    off += 8 * ndim
    t_horizon, dt = struct.unpack("<dd", raw[off : off + 16])
    off += 16
    count = int(np.prod(dims))
    values = np.frombuffer(raw[off:], dtype="<f8", count=count).reshape(dims).copy()
    nt = dims[0] - 1
    if abs(t_horizon / max(nt, 1) - dt) > 1e-12 * max(1.0, dt):
        raise ParseError(f"{path}: header dt inconsistent with T and level count")
    name = _KIND_NAMES.get(kind)
    if name == "field":
        return SpaceTimeField(values, t_horizon)
    if name == "trace":
        return BoundaryTrace(values, t_horizon)
    if name == "control":
        if grid is not None and dims[1] != grid.n_omega:
            raise DimensionMismatch(
                f"{path}: control has {dims[1]} columns, grid omega has {grid.n_omega} nodes"
            )
        return Control(values, t_horizon)
    raise ParseError(f"{path}: unknown payload kind {kind}")


def save_csv(obj: Payload, path) -> None:
    flat = obj.values.reshape(obj.values.shape[0], -1)
    times = np.linspace(0.0, obj.t_horizon, flat.shape[0])
    header = "t," + ",".join(f"v{i}" for i in range(flat.shape[1]))
    np.savetxt(path, np.column_stack([times, flat]), delimiter=",", header=header, comments="")
