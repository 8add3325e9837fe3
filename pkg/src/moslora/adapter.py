"""The low-rank branch ``s * A @ W @ B`` and its three mixer families.

A fixed identity mixer gives vanilla LoRA, the fixed butterfly factor
``[[I, I], [I, I]]`` gives two-subspaces mixing, and a trainable dense mixer
gives MoSLoRA. All functions are pure; adapters are frozen values.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np

from moslora.matrix import (
    InitKind,
    Matrix,
    Rng,
    ShapeError,
    as_matrix,
    init_matrix,
    matmul,
    transpose,
)


class ConfigError(ValueError):
    """Raised for invalid adapter configurations."""


class Mixer(enum.IntEnum):
    # Ordinals are the checkpoint mixer tags.
    FIXED_IDENTITY = 0
    FIXED_BUTTERFLY = 1
    FIXED_ORTHOGONAL = 2
    LEARNABLE = 3


@dataclass(frozen=True)
class MixerKind:
    kind: Mixer
    init: InitKind | None = None

    def __post_init__(self) -> None:
        if (self.kind is Mixer.LEARNABLE) != (self.init is not None):
            raise ConfigError("an init kind is required for, and only for, a learnable mixer")

    @classmethod
    def identity(cls) -> MixerKind:
        return cls(Mixer.FIXED_IDENTITY)

    @classmethod
    def butterfly(cls) -> MixerKind:
        return cls(Mixer.FIXED_BUTTERFLY)

    @classmethod
    def orthogonal(cls) -> MixerKind:
        return cls(Mixer.FIXED_ORTHOGONAL)

    @classmethod
    def learnable(cls, init: InitKind = InitKind.KAIMING_UNIFORM) -> MixerKind:
        return cls(Mixer.LEARNABLE, init)

    @property
    def trainable(self) -> bool:
        return self.kind is Mixer.LEARNABLE

    def __str__(self) -> str:
        name = self.kind.name.lower()
        return f"{name}({self.init.label})" if self.init is not None else name


@dataclass(frozen=True)
class AdapterConfig:
    d1: int
    d2: int
    r: int
    mixer: MixerKind = field(default_factory=MixerKind.learnable)
    alpha: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if min(self.d1, self.d2, self.r) < 1:
            raise ConfigError(f"d1, d2 and r must be >= 1, got {self.d1}, {self.d2}, {self.r}")
        if self.mixer.kind is Mixer.FIXED_BUTTERFLY and self.r % 2:
            raise ConfigError(f"butterfly mixer needs an even rank, got r={self.r}")
        if not (np.isfinite(self.alpha) and self.alpha >= 0):
            raise ConfigError(f"alpha must be finite and >= 0, got {self.alpha}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError(f"seed must be a 64-bit unsigned integer, got {self.seed}")


@dataclass(frozen=True)
class Adapter:
    """Trainable triple ``(A, W, B)`` with shapes ``d1xr``, ``rxr``, ``rxd2``.

    ``warnings`` carries construction notes, e.g. that a zero-initialized
    learnable mixer together with ``B = 0`` can never leave its start point.
    """

    config: AdapterConfig
    A: Matrix
    W: Matrix
    B: Matrix
    warnings: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        c = self.config
        expected = {"A": (c.d1, c.r), "W": (c.r, c.r), "B": (c.r, c.d2)}
        for name, shape in expected.items():
            m = as_matrix(getattr(self, name))
            if m.shape != shape:
                raise ShapeError(f"{name} must be {shape[0]}x{shape[1]}, got {m.shape}")
            object.__setattr__(self, name, m)

    @property
    def w_trainable(self) -> bool:
        return self.config.mixer.trainable

    def with_factors(self, **factors: Matrix) -> Adapter:
        return replace(self, **factors)


@dataclass(frozen=True)
class SubspacePair:
    A1: Matrix
    B1: Matrix
    A2: Matrix
    B2: Matrix


@dataclass(frozen=True)
class GradTriple:
    """Gradients for ``(A, W, B)``; ``w_active`` is False when W is frozen."""

    gA: Matrix
    gW: Matrix
    gB: Matrix
    w_active: bool = True


def butterfly_mixer(r: int) -> Matrix:
    """The ``r x r`` block matrix ``[[I, I], [I, I]]`` with ``r/2`` blocks."""
    if r < 2 or r % 2:
        raise ConfigError(f"butterfly mixer needs an even rank >= 2, got r={r}")
    return as_matrix(np.kron(np.ones((2, 2)), np.eye(r // 2)))


def _initial_mixer(config: AdapterConfig, rng: Rng) -> Matrix:
    mixer, r = config.mixer, config.r
    if mixer.kind is Mixer.FIXED_IDENTITY:
        return init_matrix(InitKind.IDENTITY, r, r, rng.stream("W"))
    if mixer.kind is Mixer.FIXED_BUTTERFLY:
        return butterfly_mixer(r)
    if mixer.kind is Mixer.FIXED_ORTHOGONAL:
        return init_matrix(InitKind.ORTHOGONAL, r, r, rng.stream("W"))
    return init_matrix(mixer.init, r, r, rng.stream("W"))


def new_adapter(config: AdapterConfig) -> Adapter:
    """Fresh adapter: Kaiming-uniform A, zero B, mixer per ``config.mixer``."""
    rng = Rng(config.seed)
    A = init_matrix(InitKind.KAIMING_UNIFORM, config.d1, config.r, rng.stream("A"))
    W = _initial_mixer(config, rng)
    B = init_matrix(InitKind.ZEROS, config.r, config.d2, rng.stream("B"))
    warnings: tuple[str, ...] = ()
    if config.mixer.init is InitKind.ZEROS:
        warnings = ("zero mixer with zero B: every gradient vanishes, training cannot progress",)
    return Adapter(config, A, W, B, warnings)


def scaling(config: AdapterConfig) -> float:
    """``alpha / r``, or 1 when alpha is 0 (no scaling)."""
    if config.alpha == 0:
        return 1.0
    return config.alpha / config.r


def delta_weight(adapter: Adapter) -> Matrix:
    s = scaling(adapter.config)
    return s * matmul(matmul(adapter.A, adapter.W), adapter.B)


def _check_base(adapter: Adapter, W0: Matrix) -> None:
    c = adapter.config
    if W0.shape != (c.d1, c.d2):
        raise ShapeError(f"base weight must be {c.d1}x{c.d2}, got {W0.shape}")


def forward(adapter: Adapter, W0: Matrix, x: Matrix) -> Matrix:
    """``x @ W0 + s * x @ A @ W @ B`` evaluated through the unmerged branch."""
    _check_base(adapter, W0)
    if x.ndim != 2 or x.shape[1] != adapter.config.d1:
        raise ShapeError(f"input must have {adapter.config.d1} columns, got shape {x.shape}")
    s = scaling(adapter.config)
    branch = matmul(matmul(matmul(x, adapter.A), adapter.W), adapter.B)
    return matmul(x, W0) + s * branch


def merge(adapter: Adapter, W0: Matrix) -> Matrix:
    _check_base(adapter, W0)
    return W0 + delta_weight(adapter)


def decompose_two_subspaces(adapter: Adapter) -> SubspacePair:
    r = adapter.config.r
    if r % 2:
        raise ConfigError(f"two-subspace split needs an even rank, got r={r}")
    h = r // 2
    A, B = adapter.A, adapter.B
    return SubspacePair(
        A1=as_matrix(A[:, :h]), B1=as_matrix(B[:h]), A2=as_matrix(A[:, h:]), B2=as_matrix(B[h:])
    )


def ts_mix_delta(pair: SubspacePair) -> Matrix:
    """Two-subspaces mixing: ``(A1 + A2) @ (B1 + B2)``."""
    return matmul(pair.A1 + pair.A2, pair.B1 + pair.B2)


def rank1_expand(adapter: Adapter) -> list[tuple[float, int, int]]:
    """Nonzero mixer weights ``(W[i, j], i, j)`` in row-major order.

    ``A @ W @ B == sum(w * outer(A[:, i], B[j]))`` over the returned terms.
    """
    W = adapter.W
    return [
        (float(W[i, j]), i, j) for i in range(W.shape[0]) for j in range(W.shape[1]) if W[i, j] != 0
    ]


def rank1_reconstruct(adapter: Adapter, terms: list[tuple[float, int, int]]) -> Matrix:
    out = np.zeros((adapter.config.d1, adapter.config.d2))
    for weight, i, j in terms:
        out += weight * np.multiply.outer(adapter.A[:, i], adapter.B[j])
    return out


def grad(adapter: Adapter, upstream: Matrix) -> GradTriple:
    """Gradients of a loss w.r.t. ``A``, ``W``, ``B`` given ``dL/dW_merge``.

    ``upstream`` is taken before scaling; ``s`` is folded in here. With
    ``D = s * upstream``: ``gA = D B^T W^T``, ``gW = A^T D B^T``,
    ``gB = W^T A^T D``.
    """
    c = adapter.config
    if upstream.shape != (c.d1, c.d2):
        raise ShapeError(f"upstream gradient must be {c.d1}x{c.d2}, got {upstream.shape}")
    D = scaling(c) * upstream
    At, Wt, Bt = transpose(adapter.A), transpose(adapter.W), transpose(adapter.B)
    DBt = matmul(D, Bt)
    return GradTriple(
        gA=matmul(DBt, Wt),
        gW=matmul(At, DBt),
        gB=matmul(Wt, matmul(At, D)),
        w_active=adapter.w_trainable,
    )


def param_count(config: AdapterConfig) -> int:
    base = (config.d1 + config.d2) * config.r
    if config.mixer.trainable:
        return base + config.r * config.r
    return base
