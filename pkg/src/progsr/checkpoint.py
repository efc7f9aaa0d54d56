"""Versioned binary checkpoints.

Layout (all integers little-endian)::

    magic            4 bytes  b"PGSR"
    format_version   u32
    growth_state     u32 stage, f64 alpha, u32 epochs_in_stage, u8 phase, u64 images_seen
    meta             u32 byte length, UTF-8 ``key = value`` lines
    manifest         u32 entry count, then per entry:
                       u16 name length, UTF-8 name, u8 ndim, ndim x u32 extents
    payload          float32 values, entries concatenated in manifest order

Payload values are stored as 32-bit floats; float32 parameters round-trip
bitwise.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"PGSR"
FORMAT_VERSION = 1
_PHASES = ("fading", "stable")


class CheckpointError(ValueError):
    pass


@dataclass
class GrowthState:
    stage: int = 0
    alpha: float = 1.0
    epochs_in_stage: int = 0
    phase: str = "stable"
    images_seen: int = 0

    def __post_init__(self):
        if self.stage < 0:
            raise ValueError("stage must be >= 0")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.phase not in _PHASES:
            raise ValueError(f"phase must be one of {_PHASES}")
        if self.phase == "stable" and self.alpha != 1.0:
            raise ValueError("a stable phase requires alpha == 1")

    @property
    def resolution(self) -> int:
        return 4 * 2**self.stage


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    growth_state: GrowthState = field(default_factory=GrowthState)
    meta: dict[str, str] = field(default_factory=dict)


def save_checkpoint(path, params: dict[str, np.ndarray], growth_state: GrowthState | None = None,
                    meta: dict[str, str] | None = None) -> Path:
    path = Path(path)
    gs = growth_state or GrowthState()
    meta = meta or {}
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    buf.write(struct.pack("<IdIBQ", gs.stage, gs.alpha, gs.epochs_in_stage, _PHASES.index(gs.phase), gs.images_seen))
    meta_bytes = "".join(f"{k} = {v}\n" for k, v in meta.items()).encode("utf-8")
    buf.write(struct.pack("<I", len(meta_bytes)))
    buf.write(meta_bytes)
    buf.write(struct.pack("<I", len(params)))
    for name, arr in params.items():
        nb = name.encode("utf-8")
        shape = np.shape(arr)
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", len(shape)))
        buf.write(struct.pack(f"<{len(shape)}I", *shape))
    for arr in params.values():
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)
    return path


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(
                f"truncated checkpoint: need {n} bytes for {what} at offset {self.pos}, "
                f"file has {len(self.raw)}"
            )
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    r = _Reader(raw)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r} at offset 0 (expected {MAGIC!r})")
    (version,) = r.unpack("<I", "format_version")
    if version > FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint format_version {version} is newer than supported version "
            f"{FORMAT_VERSION}; upgrade progsr to read it"
        )
    if version < 1:
        raise CheckpointError(f"invalid format_version {version} at offset 4")
    stage, alpha, epochs, phase, seen = r.unpack("<IdIBQ", "growth_state")
    if phase >= len(_PHASES):
        raise CheckpointError(f"bad phase code {phase} at offset {r.pos - 9}")
    gs = GrowthState(stage=stage, alpha=alpha, epochs_in_stage=epochs, phase=_PHASES[phase], images_seen=seen)
    (meta_len,) = r.unpack("<I", "meta length")
    meta = {}
    for line in r.take(meta_len, "meta").decode("utf-8").splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            meta[k.strip()] = v.strip()
    (count,) = r.unpack("<I", "manifest count")
    manifest = []
    for _ in range(count):
        (nlen,) = r.unpack("<H", "entry name length")
        name = r.take(nlen, "entry name").decode("utf-8")
        (ndim,) = r.unpack("<B", "entry rank")
        shape = r.unpack(f"<{ndim}I", f"shape of {name}") if ndim else ()
        manifest.append((name, tuple(shape)))
    expected = sum(int(np.prod(s)) for _, s in manifest) * 4
    remaining = len(raw) - r.pos
    if remaining != expected:
        raise CheckpointError(
            f"payload length mismatch at offset {r.pos}: manifest needs {expected} bytes, "
            f"found {remaining}"
        )
    params = {}
    for name, shape in manifest:
        n = int(np.prod(shape))
        params[name] = np.frombuffer(r.take(4 * n, name), dtype="<f4").reshape(shape).astype(np.float32)
    return Checkpoint(params=params, growth_state=gs, meta=meta)
