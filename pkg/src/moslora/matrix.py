"""Dense float64 matrices, seeded random streams and the initializers.

Matrices are plain 2-D ``numpy.float64`` arrays. Every product goes through
:func:`matmul`, which accumulates over the inner dimension strictly left to
right so results do not depend on the BLAS build or thread count.
"""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

Matrix = NDArray[np.float64]

NORMAL_STD = 0.02


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class InitKind(enum.IntEnum):
    # Ordinals are persisted in checkpoints; do not reorder.
    ZEROS = 0
    IDENTITY = 1
    NORMAL = 2
    ORTHOGONAL = 3
    KAIMING_UNIFORM = 4

    @classmethod
    def parse(cls, name: str) -> InitKind:
        key = name.strip().lower().replace("-", "_")
        aliases = {"zero": "zeros", "kaiming": "kaiming_uniform", "orth": "orthogonal"}
        key = aliases.get(key, key)
        try:
            return cls[key.upper()]
        except KeyError:
            raise ValueError(f"unknown init kind {name!r}") from None

    @property
    def label(self) -> str:
        return self.name.lower()


@dataclass(frozen=True)
class Rng:
    """Seeded source of independent, label-keyed random streams.

    ``stream(label)`` returns a fresh PCG64 generator whose state depends only
    on ``(seed, label)``, so adding a new stream never perturbs existing ones.
    """

    seed: int

    def __post_init__(self) -> None:
        if not 0 <= self.seed < 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {self.seed}")

    def stream(self, label: str) -> np.random.Generator:
        digest = hashlib.blake2b(label.encode("utf-8"), digest_size=16).digest()
        key = tuple(int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4))
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=key)
        return np.random.Generator(np.random.PCG64(seq))


def as_matrix(data) -> Matrix:
    """Copy ``data`` into a read-only 2-D float64 array, rejecting NaN/Inf."""
    m = np.array(data, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise ShapeError(f"expected a non-empty 2-D matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix contains non-finite entries")
    m.flags.writeable = False
    return m


def matmul(a: Matrix, b: Matrix) -> Matrix:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    # Reducing over a non-contiguous axis makes numpy add the k terms in
    # sequence, i.e. c[i, j] = ((a[i,0]*b[0,j] + a[i,1]*b[1,j]) + ...).
    return (a[:, :, None] * b[None, :, :]).sum(axis=1)


def transpose(a: Matrix) -> Matrix:
    return np.ascontiguousarray(a.T)


def max_abs_diff(a: Matrix, b: Matrix) -> float:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b)))


def orthogonal_from_gaussian(g: Matrix) -> Matrix:
    """QR-factorize a square Gaussian matrix and sign-fix Q by diag(R)."""
    q, r = np.linalg.qr(g)
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return q * signs[None, :]


def init_matrix(kind: InitKind, rows: int, cols: int, rng: np.random.Generator) -> Matrix:
    """Draw a ``rows x cols`` matrix of the given kind from ``rng``.

    Kaiming-uniform uses the bound ``1/sqrt(rows)``: under post-multiplication
    ``x @ M`` the row count is the fan-in.
    """
    if rows < 1 or cols < 1:
        raise ShapeError(f"matrix dimensions must be positive, got {rows}x{cols}")
    if kind in (InitKind.IDENTITY, InitKind.ORTHOGONAL) and rows != cols:
        raise ShapeError(f"{kind.label} init needs a square shape, got {rows}x{cols}")

    if kind is InitKind.ZEROS:
        m = np.zeros((rows, cols))
    elif kind is InitKind.IDENTITY:
        m = np.eye(rows)
    elif kind is InitKind.NORMAL:
        m = rng.normal(0.0, NORMAL_STD, size=(rows, cols))
    elif kind is InitKind.KAIMING_UNIFORM:
        bound = 1.0 / np.sqrt(rows)
        m = rng.uniform(-bound, bound, size=(rows, cols))
    elif kind is InitKind.ORTHOGONAL:
        m = orthogonal_from_gaussian(rng.standard_normal((rows, cols)))
    else:
        raise ValueError(f"unsupported init kind {kind!r}")
    return as_matrix(m)
