"""Full-batch SGD, finite-difference gradients and one-step trajectory algebra."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from moslora.adapter import Adapter, GradTriple, grad, merge
from moslora.matrix import Matrix, ShapeError, matmul, max_abs_diff, transpose

ORTHOGONALITY_TOL = 1e-8


class NumericError(ArithmeticError):
    """Raised when a gradient or update contains NaN or Inf."""


class PreconditionError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    eta: float
    steps: int
    loss: str = "mse"
    seed: int = 0

    def __post_init__(self) -> None:
        if not (math.isfinite(self.eta) and self.eta > 0):
            raise ValueError(f"learning rate must be finite and positive, got {self.eta}")
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if self.loss != "mse":
            raise ValueError(f"only the 'mse' loss is supported, got {self.loss!r}")


@dataclass(frozen=True)
class StepRecord:
    step: int
    loss: float
    norm_gA: float
    norm_gW: float
    norm_gB: float


@dataclass(frozen=True)
class TrainLog:
    records: tuple[StepRecord, ...]
    final_adapter: Adapter
    diverged: bool = False
    diagnostic: str = ""

    @property
    def losses(self) -> list[float]:
        return [rec.loss for rec in self.records]


@dataclass(frozen=True)
class TrajectoryReport:
    """Branch weights after one SGD step under three parameterizations.

    ``w_lora`` trains A, W and B; ``w_hat`` trains the merged ``AW`` and B;
    ``w_fixed_orth`` trains A and B around a frozen W. ``fixed_orth_valid`` is
    False when the supplied W is not orthogonal.
    """

    w_lora: Matrix
    w_hat: Matrix
    w_fixed_orth: Matrix
    diff_learnable_vs_merged: Matrix
    diff_closed_form: Matrix
    fixed_orth_valid: bool = field(default=True)


def _require_finite(name: str, m: Matrix) -> None:
    if not np.all(np.isfinite(m)):
        raise NumericError(f"{name} contains non-finite entries")


def sgd_step(adapter: Adapter, grads: GradTriple, eta: float) -> Adapter:
    """One plain SGD update; W moves only if the mixer is trainable."""
    for name in ("gA", "gW", "gB"):
        g = getattr(grads, name)
        _require_finite(name, g)
        target = getattr(adapter, name[1:])
        if g.shape != target.shape:
            raise ShapeError(f"{name} has shape {g.shape}, expected {target.shape}")
    A = adapter.A - eta * grads.gA
    B = adapter.B - eta * grads.gB
    W = adapter.W - eta * grads.gW if adapter.w_trainable else adapter.W
    for name, m in (("A", A), ("W", W), ("B", B)):
        _require_finite(f"updated {name}", m)
    return adapter.with_factors(A=A, W=W, B=B)


def mse_loss_and_upstream(
    adapter: Adapter, W0: Matrix, x: Matrix, y_target: Matrix
) -> tuple[float, Matrix]:
    """Mean squared error over all ``n*d2`` outputs and its gradient w.r.t.
    the merged weight, ``(2/(n*d2)) * x^T (y_hat - y)``."""
    if x.ndim != 2 or y_target.ndim != 2 or x.shape[0] != y_target.shape[0]:
        raise ShapeError(f"inputs {x.shape} and targets {y_target.shape} disagree")
    if y_target.shape[1] != adapter.config.d2:
        raise ShapeError(f"targets must have {adapter.config.d2} columns, got {y_target.shape}")
    merged = merge(adapter, W0)
    residual = matmul(x, merged) - y_target
    count = residual.size
    loss = float(np.sum(residual * residual)) / count
    upstream = (2.0 / count) * matmul(transpose(x), residual)
    return loss, upstream


def one_step_trajectory(
    A: Matrix, W: Matrix, B: Matrix, delta: Matrix, eta: float, *, require_orthogonal: bool = False
) -> TrajectoryReport:
    """Evaluate the three one-step branch weights and the closed-form gap.

    All outputs are always computed. With ``require_orthogonal`` a W that is
    not orthogonal within 1e-8 raises instead of only clearing the flag.
    """
    r = W.shape[0]
    if W.shape != (r, r) or A.shape[1] != r or B.shape[0] != r:
        raise ShapeError(f"inconsistent factor shapes A{A.shape} W{W.shape} B{B.shape}")
    if delta.shape != (A.shape[0], B.shape[1]):
        raise ShapeError(f"delta must be {A.shape[0]}x{B.shape[1]}, got {delta.shape}")

    At, Wt, Bt = transpose(A), transpose(W), transpose(B)
    DBt = matmul(delta, Bt)
    At_D_Bt = matmul(At, DBt)
    Wt_At_D = matmul(Wt, matmul(At, delta))

    A_new = A - eta * matmul(DBt, Wt)
    W_new = W - eta * At_D_Bt
    B_new = B - eta * Wt_At_D

    w_lora = matmul(matmul(A_new, W_new), B_new)
    w_hat = matmul(matmul(A, W) - eta * DBt, B_new)
    w_fixed_orth = matmul(matmul(A_new, W), B_new)

    eye = np.eye(r)
    closed = matmul(
        eta * matmul(A_new, At_D_Bt) + eta * matmul(DBt, matmul(Wt, W) - eye),
        B_new,
    )
    orth_err = max_abs_diff(matmul(W, Wt), eye)
    valid = orth_err <= ORTHOGONALITY_TOL
    if require_orthogonal and not valid:
        raise PreconditionError(f"W is not orthogonal: max |W W^T - I| = {orth_err:.3e}")
    return TrajectoryReport(
        w_lora=w_lora,
        w_hat=w_hat,
        w_fixed_orth=w_fixed_orth,
        diff_learnable_vs_merged=w_hat - w_lora,
        diff_closed_form=closed,
        fixed_orth_valid=valid,
    )


def finite_diff_grads(
    adapter: Adapter, W0: Matrix, x: Matrix, y_target: Matrix, h: float = 1e-5
) -> GradTriple:
    """Central differences of the MSE loss w.r.t. every entry of A, W and B."""
    if not h > 0:
        raise ValueError(f"step h must be positive, got {h}")

    def loss_at(**factors: Matrix) -> float:
        return mse_loss_and_upstream(adapter.with_factors(**factors), W0, x, y_target)[0]

    grads = {}
    for name in ("A", "W", "B"):
        base = getattr(adapter, name)
        g = np.zeros(base.shape)
        for idx in np.ndindex(base.shape):
            plus = base.copy()
            plus[idx] += h
            minus = base.copy()
            minus[idx] -= h
            g[idx] = (loss_at(**{name: plus}) - loss_at(**{name: minus})) / (2 * h)
        grads[name] = g
    return GradTriple(grads["A"], grads["W"], grads["B"], w_active=adapter.w_trainable)


def train(adapter: Adapter, W0: Matrix, task, cfg: TrainConfig) -> TrainLog:
    """Full-batch SGD on ``task.x_train``/``task.y_train``.

    Records the loss and gradient norms before each update plus one final
    record, so a successful run has ``cfg.steps + 1`` entries. A non-finite
    loss or gradient stops the run and marks the log as diverged.
    """
    x, y = task.x_train, task.y_train
    records: list[StepRecord] = []
    current = adapter
    for step in range(cfg.steps + 1):
        loss, upstream = mse_loss_and_upstream(current, W0, x, y)
        g = grad(current, upstream)
        norms = tuple(float(np.linalg.norm(m)) for m in (g.gA, g.gW, g.gB))
        records.append(StepRecord(step, loss, *norms))
        if not (math.isfinite(loss) and all(map(math.isfinite, norms))):
            return TrainLog(tuple(records), current, True, f"non-finite loss or gradient at step {step}")
        if step == cfg.steps:
            break
        try:
            current = sgd_step(current, g, cfg.eta)
        except NumericError as exc:
            return TrainLog(tuple(records), current, True, f"step {step}: {exc}")
    return TrainLog(tuple(records), current)
