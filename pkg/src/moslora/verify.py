"""Self-contained property checks run by ``moslora verify``.

Each check returns a :class:`CheckResult`; ``run_checks`` filters by name or
group substring and prints one PASS/FAIL line per check.
"""

from __future__ import annotations

import sys
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, TextIO

import numpy as np

from moslora import adapter as adapter_mod
from moslora import checkpoint, dynamics
from moslora.adapter import Adapter, AdapterConfig, Mixer, MixerKind, new_adapter, param_count
from moslora.matrix import InitKind, Rng, init_matrix, matmul, max_abs_diff

GRAD_RTOL = 1e-6
FD_STEP = 1e-5
EXACT_TOL = 1e-12
MERGE_TOL = 1e-10
INEQUIV_TOL = 1e-8


@dataclass(frozen=True)
class CheckResult:
    name: str
    group: str
    passed: bool
    max_error: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f"  {self.detail}" if self.detail else ""
        return f"{status}  {self.group}/{self.name:<28} max_err={self.max_error:.3e}{extra}"


def random_adapter(
    rng: np.random.Generator, d1: int, d2: int, r: int, mixer: MixerKind | None = None, alpha: float = 0.0
) -> Adapter:
    """Adapter with dense standard-normal A, W and B (no zero start)."""
    mixer = mixer or MixerKind.learnable()
    config = AdapterConfig(d1, d2, r, mixer, alpha)
    if mixer.kind is Mixer.FIXED_IDENTITY:
        W = np.eye(r)
    elif mixer.kind is Mixer.FIXED_BUTTERFLY:
        W = adapter_mod.butterfly_mixer(r)
    elif mixer.kind is Mixer.FIXED_ORTHOGONAL:
        W = init_matrix(InitKind.ORTHOGONAL, r, r, rng)
    else:
        W = rng.standard_normal((r, r))
    return Adapter(config, rng.standard_normal((d1, r)), W, rng.standard_normal((r, d2)))


def grad_relative_error(a: adapter_mod.GradTriple, b: adapter_mod.GradTriple) -> float:
    """Worst entry-wise gap over all three gradients, relative to their scale."""
    diff = max(max_abs_diff(a.gA, b.gA), max_abs_diff(a.gW, b.gW), max_abs_diff(a.gB, b.gB))
    scale = max(float(np.max(np.abs(m))) for m in (a.gA, a.gW, a.gB, b.gA, b.gW, b.gB))
    return 0.0 if scale == 0 else diff / scale


def check_gradients(instances: int = 100, seed: int = 0) -> CheckResult:
    rng = Rng(seed).stream("verify/gradients")
    worst = 0.0
    for _ in range(instances):
        d1, d2 = (int(v) for v in rng.integers(1, 17, size=2))
        r = int(rng.integers(1, 5))
        alpha = float(rng.choice([0.0, 2.0 * r]))
        ad = random_adapter(rng, d1, d2, r, alpha=alpha)
        n = int(rng.integers(1, 9))
        W0 = rng.standard_normal((d1, d2))
        x = rng.standard_normal((n, d1))
        y = rng.standard_normal((n, d2))
        _, upstream = dynamics.mse_loss_and_upstream(ad, W0, x, y)
        analytic = adapter_mod.grad(ad, upstream)
        numeric = dynamics.finite_diff_grads(ad, W0, x, y, FD_STEP)
        worst = max(worst, grad_relative_error(analytic, numeric))
    return CheckResult("analytic_vs_central_diff", "gradient", worst <= GRAD_RTOL, worst, f"n={instances}")


def check_zero_init_gradients(instances: int = 50, seed: int = 1) -> CheckResult:
    rng = Rng(seed).stream("verify/zero-grad")
    worst = 0.0
    for _ in range(instances):
        d1, d2, r = 8, 6, 4
        ad = Adapter(AdapterConfig(d1, d2, r), rng.standard_normal((d1, r)), np.zeros((r, r)), np.zeros((r, d2)))
        g = adapter_mod.grad(ad, rng.standard_normal((d1, d2)))
        worst = max(worst, *(float(np.max(np.abs(m))) for m in (g.gA, g.gW, g.gB)))
    return CheckResult("zero_mixer_zero_b_gradients", "stagnation", worst == 0.0, worst)


def check_zero_init_training(steps: int = 100, seed: int = 2) -> CheckResult:
    from moslora.harness import TaskSpec, make_task

    task = make_task(TaskSpec(d1=8, d2=8, n_train=32, n_eval=8, k=2, seed=seed))
    ad = new_adapter(AdapterConfig(8, 8, 2, MixerKind.learnable(InitKind.ZEROS), seed=seed))
    log = dynamics.train(ad, task.W0, task, dynamics.TrainConfig(eta=0.05, steps=steps))
    end = log.final_adapter
    unchanged = all(np.array_equal(getattr(ad, f), getattr(end, f)) for f in "AWB")
    spread = max(log.losses) - min(log.losses)
    ok = unchanged and spread == 0.0 and len(log.records) == steps + 1
    return CheckResult("zero_mixer_training_frozen", "stagnation", ok, spread)


def check_identity_mixer(instances: int = 1000, seed: int = 3) -> CheckResult:
    rng = Rng(seed).stream("verify/identity")
    mismatches = 0
    worst = 0.0
    for _ in range(instances):
        ad = random_adapter(rng, 6, 5, 4, MixerKind.identity(), alpha=8.0)
        lora = adapter_mod.scaling(ad.config) * matmul(ad.A, ad.B)
        delta = adapter_mod.delta_weight(ad)
        mismatches += not np.array_equal(delta, lora)
        worst = max(worst, max_abs_diff(delta, lora))
    return CheckResult("identity_mixer_equals_lora", "unification", mismatches == 0, worst, "bitwise")


def check_butterfly_mixer(instances: int = 1000, seed: int = 4) -> CheckResult:
    rng = Rng(seed).stream("verify/butterfly")
    worst = 0.0
    for _ in range(instances):
        r = 2 * int(rng.integers(1, 5))
        ad = random_adapter(rng, 7, 6, r, MixerKind.butterfly())
        ts = adapter_mod.ts_mix_delta(adapter_mod.decompose_two_subspaces(ad))
        worst = max(worst, max_abs_diff(ts, adapter_mod.delta_weight(ad)))
    return CheckResult("butterfly_mixer_equals_ts_mixing", "unification", worst <= EXACT_TOL, worst)


def check_rank1_counts(seed: int = 5) -> CheckResult:
    rng = Rng(seed).stream("verify/rank1")
    worst = 0.0
    ok = True
    for r in (2, 4, 8):
        cases = (
            (MixerKind.identity(), r),
            (MixerKind.butterfly(), 2 * r),
            (MixerKind.learnable(), r * r),
        )
        for mixer, expected in cases:
            ad = random_adapter(rng, 9, 7, r, mixer)
            terms = adapter_mod.rank1_expand(ad)
            rebuilt = adapter_mod.rank1_reconstruct(ad, terms)
            worst = max(worst, max_abs_diff(rebuilt, matmul(matmul(ad.A, ad.W), ad.B)))
            ok &= len(terms) == expected
    return CheckResult("rank1_term_counts", "unification", ok and worst <= EXACT_TOL, worst)


def _trajectory_instance(rng: np.random.Generator, orthogonal: bool):
    d1, d2, r = 6, 5, 3
    W = init_matrix(InitKind.ORTHOGONAL, r, r, rng) if orthogonal else rng.standard_normal((r, r))
    return rng.standard_normal((d1, r)), W, rng.standard_normal((r, d2)), rng.standard_normal((d1, d2))


def check_trajectory_closed_form(instances: int = 200, seed: int = 6) -> CheckResult:
    rng = Rng(seed).stream("verify/trajectory")
    worst = 0.0
    for _ in range(instances):
        A, W, B, D = _trajectory_instance(rng, orthogonal=False)
        rep = dynamics.one_step_trajectory(A, W, B, 0.1 * D, 0.1)
        worst = max(worst, max_abs_diff(rep.diff_learnable_vs_merged, rep.diff_closed_form))
    return CheckResult("closed_form_difference", "trajectory", worst <= EXACT_TOL, worst)


def check_trajectory_fixed_orthogonal(instances: int = 200, seed: int = 7) -> CheckResult:
    rng = Rng(seed).stream("verify/orth")
    worst = 0.0
    for _ in range(instances):
        A, W, B, D = _trajectory_instance(rng, orthogonal=True)
        rep = dynamics.one_step_trajectory(A, W, B, 0.1 * D, 0.1, require_orthogonal=True)
        worst = max(worst, max_abs_diff(rep.w_fixed_orth, rep.w_hat))
    return CheckResult("fixed_orthogonal_equals_merged", "trajectory", worst <= EXACT_TOL, worst)


def check_trajectory_inequivalence(seeds: int = 100, seed: int = 8) -> CheckResult:
    hits = 0
    smallest = np.inf
    for s in range(seeds):
        rng = Rng(seed).stream(f"verify/inequiv/{s}")
        A, W, B, D = _trajectory_instance(rng, orthogonal=False)
        diff = dynamics.one_step_trajectory(A, W, B, D, 0.1).diff_learnable_vs_merged
        gap = float(np.max(np.abs(diff)))
        hits += gap > INEQUIV_TOL
        smallest = min(smallest, gap)
    return CheckResult(
        "learnable_differs_from_merged", "trajectory", hits >= 99 * seeds / 100, float(smallest), f"{hits}/{seeds}"
    )


def check_merge(instances: int = 100, seed: int = 9) -> CheckResult:
    rng = Rng(seed).stream("verify/merge")
    worst = 0.0
    with tempfile.TemporaryDirectory() as tmp:
        for i in range(instances):
            ad = random_adapter(rng, 8, 8, 2, alpha=4.0)
            W0 = rng.standard_normal((8, 8))
            x = rng.standard_normal((5, 8))
            fwd = adapter_mod.forward(ad, W0, x)
            worst = max(worst, max_abs_diff(fwd, matmul(x, adapter_mod.merge(ad, W0))))
            if i % 10 == 0:
                base, ckpt, out = (Path(tmp) / name for name in ("base.bin", "ad.msla", "merged.bin"))
                checkpoint.save_matrix(W0, base)
                checkpoint.save_checkpoint(ad, ckpt)
                checkpoint.merge_files(base, ckpt, out)
                worst = max(worst, max_abs_diff(fwd, matmul(x, checkpoint.load_matrix(out))))
    return CheckResult("forward_equals_merged", "merge", worst <= MERGE_TOL, worst)


def check_param_counts() -> CheckResult:
    cases = [
        (AdapterConfig(8, 8, 2, MixerKind.identity()), 32),
        (AdapterConfig(8, 8, 2, MixerKind.learnable()), 36),
        (AdapterConfig(4096, 4096, 16, MixerKind.identity()), 131072),
        (AdapterConfig(4096, 4096, 16, MixerKind.learnable()), 131328),
    ]
    bad = sum(param_count(c) != expected for c, expected in cases)
    return CheckResult("figure_one_counts", "params", bad == 0, float(bad))


CHECKS: tuple[Callable[[], CheckResult], ...] = (
    check_gradients,
    check_zero_init_gradients,
    check_zero_init_training,
    check_identity_mixer,
    check_butterfly_mixer,
    check_rank1_counts,
    check_trajectory_closed_form,
    check_trajectory_fixed_orthogonal,
    check_trajectory_inequivalence,
    check_merge,
    check_param_counts,
)

def _selected(check: Callable[[], CheckResult], pattern: str | None) -> bool:
    if not pattern:
        return True
    name = check.__name__.removeprefix("check_")
    group = _GROUP_OF[check]
    return pattern in name or pattern in group


_GROUP_OF = {
    check_gradients: "gradient",
    check_zero_init_gradients: "stagnation",
    check_zero_init_training: "stagnation",
    check_identity_mixer: "unification",
    check_butterfly_mixer: "unification",
    check_rank1_counts: "unification",
    check_trajectory_closed_form: "trajectory",
    check_trajectory_fixed_orthogonal: "trajectory",
    check_trajectory_inequivalence: "trajectory",
    check_merge: "merge",
    check_param_counts: "params",
}


def run_checks(pattern: str | None = None, out: TextIO | None = None) -> list[CheckResult]:
    out = out or sys.stdout
    results = []
    for check in CHECKS:
        if not _selected(check, pattern):
            continue
        result = check()
        print(result.line(), file=out)
        results.append(result)
    return results
