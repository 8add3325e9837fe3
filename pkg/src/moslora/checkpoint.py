"""Binary adapter checkpoints and raw matrix files.

Checkpoint layout, all little-endian and packed (30-byte header)::

    magic     4s   b"MSLA"
    version   u32  1
    d1, d2, r u32 x 3
    mixer     u8   Mixer ordinal
    init      u8   InitKind ordinal, 255 for fixed mixers
    alpha     f64
    payload   f64  A, then W, then B, each row-major

Raw matrix files are ``rows: u32, cols: u32`` followed by row-major f64.
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from moslora.adapter import Adapter, AdapterConfig, ConfigError, Mixer, MixerKind, merge
from moslora.matrix import InitKind, Matrix, as_matrix

MAGIC = b"MSLA"
VERSION = 1
NO_INIT_TAG = 255
HEADER = struct.Struct("<4sIIIIBBd")
HEADER_SIZE = HEADER.size
RAW_HEADER = struct.Struct("<II")
_F64 = np.dtype("<f8")


class CheckpointError(ValueError):
    """Malformed checkpoint or matrix file."""


class BadMagicError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class LengthMismatchError(CheckpointError):
    pass


def _atomic_write(path: Path, data: bytes) -> None:
    directory = path.parent if str(path.parent) else Path(".")
    try:
        fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=directory)
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
            os.replace(tmp, path)
        except BaseException:
            Path(tmp).unlink(missing_ok=True)
            raise
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def _read(path: Path) -> bytes:
    try:
        return path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc}") from exc


def checkpoint_bytes(adapter: Adapter) -> bytes:
    c = adapter.config
    init_tag = NO_INIT_TAG if c.mixer.init is None else int(c.mixer.init)
    header = HEADER.pack(MAGIC, VERSION, c.d1, c.d2, c.r, int(c.mixer.kind), init_tag, c.alpha)
    payload = b"".join(m.astype(_F64).tobytes(order="C") for m in (adapter.A, adapter.W, adapter.B))
    return header + payload


def save_checkpoint(adapter: Adapter, path: str | os.PathLike) -> None:
    _atomic_write(Path(path), checkpoint_bytes(adapter))


def parse_checkpoint(data: bytes, source: str = "<bytes>") -> Adapter:
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError(f"{source}: bad magic {data[:4]!r}, expected {MAGIC!r}")
    if len(data) < HEADER_SIZE:
        raise LengthMismatchError(f"{source}: truncated header ({len(data)} < {HEADER_SIZE} bytes)")
    _, version, d1, d2, r, mixer_tag, init_tag, alpha = HEADER.unpack_from(data)
    if version != VERSION:
        raise UnsupportedVersionError(f"{source}: unsupported version {version}")
    expected = 8 * (d1 * r + r * r + r * d2)
    if len(data) - HEADER_SIZE != expected:
        raise LengthMismatchError(
            f"{source}: payload is {len(data) - HEADER_SIZE} bytes, expected {expected} for d1={d1} d2={d2} r={r}"
        )
    try:
        kind = Mixer(mixer_tag)
        init = None if init_tag == NO_INIT_TAG else InitKind(init_tag)
        config = AdapterConfig(d1, d2, r, MixerKind(kind, init), alpha)
    except (ValueError, ConfigError) as exc:
        raise CheckpointError(f"{source}: invalid header fields: {exc}") from exc

    values = np.frombuffer(data, dtype=_F64, offset=HEADER_SIZE).astype(np.float64)
    sizes = np.cumsum([d1 * r, r * r])
    A, W, B = np.split(values, sizes)
    return Adapter(config, A.reshape(d1, r), W.reshape(r, r), B.reshape(r, d2))


def load_checkpoint(path: str | os.PathLike) -> Adapter:
    path = Path(path)
    return parse_checkpoint(_read(path), str(path))


def save_matrix(m: Matrix, path: str | os.PathLike) -> None:
    rows, cols = m.shape
    _atomic_write(Path(path), RAW_HEADER.pack(rows, cols) + m.astype(_F64).tobytes(order="C"))


def load_matrix(path: str | os.PathLike) -> Matrix:
    path = Path(path)
    data = _read(path)
    if len(data) < RAW_HEADER.size:
        raise LengthMismatchError(f"{path}: truncated matrix header")
    rows, cols = RAW_HEADER.unpack_from(data)
    if len(data) - RAW_HEADER.size != 8 * rows * cols:
        raise LengthMismatchError(f"{path}: payload does not match {rows}x{cols}")
    values = np.frombuffer(data, dtype=_F64, offset=RAW_HEADER.size)
    return as_matrix(values.reshape(rows, cols))


def merge_files(base_path: str | os.PathLike, adapter_path: str | os.PathLike, out_path: str | os.PathLike) -> None:
    """Fold a checkpointed adapter into a raw base matrix file."""
    W0 = load_matrix(base_path)
    adapter = load_checkpoint(adapter_path)
    c = adapter.config
    if W0.shape != (c.d1, c.d2):
        raise ValueError(f"base {base_path} is {W0.shape[0]}x{W0.shape[1]} but adapter expects {c.d1}x{c.d2}")
    save_matrix(merge(adapter, W0), out_path)
