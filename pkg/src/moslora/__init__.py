"""Mixture-of-subspaces low-rank adapters (MoSLoRA) with vanilla LoRA and
two-subspaces mixing as fixed-mixer special cases."""

from moslora.adapter import (
    Adapter,
    AdapterConfig,
    ConfigError,
    GradTriple,
    Mixer,
    MixerKind,
    SubspacePair,
    butterfly_mixer,
    decompose_two_subspaces,
    delta_weight,
    forward,
    grad,
    merge,
    new_adapter,
    param_count,
    rank1_expand,
    scaling,
    ts_mix_delta,
)
from moslora.dynamics import (
    TrainConfig,
    TrainLog,
    TrajectoryReport,
    finite_diff_grads,
    mse_loss_and_upstream,
    one_step_trajectory,
    sgd_step,
    train,
)
from moslora.matrix import InitKind, Rng, ShapeError, init_matrix, matmul, max_abs_diff, transpose

__version__ = "0.1.0"
