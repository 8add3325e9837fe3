import numpy as np
import pytest

from moslora.adapter import AdapterConfig, MixerKind, new_adapter
from moslora.dynamics import TrainConfig, train
from moslora.harness import (
    CSV_HEADER,
    Method,
    Report,
    ReportRow,
    SweepSpec,
    TargetKind,
    TaskSpec,
    emit_csv,
    make_task,
    parse_sweep_spec,
    planted_update,
    read_csv,
    report_to_csv,
    run_sweep,
    steps_to_fraction,
)
from moslora.matrix import InitKind, matmul


@pytest.mark.parametrize("kind", list(TargetKind))
def test_task_residual_has_planted_rank(kind):
    spec = TaskSpec(d1=12, d2=10, n_train=40, n_eval=5, k=3, target_kind=kind, seed=2)
    task = make_task(spec)
    residual = task.y_train - matmul(task.x_train, task.W0)
    assert np.linalg.matrix_rank(residual, tol=1e-8) <= 3
    assert np.linalg.matrix_rank(planted_update(spec), tol=1e-8) == 3


def test_task_is_bitwise_reproducible():
    spec = TaskSpec(noise_std=0.01, seed=9)
    a, b = make_task(spec), make_task(spec)
    for x, y in zip(a, b):
        assert x.tobytes() == y.tobytes()


def test_task_noise_changes_targets_only():
    quiet = make_task(TaskSpec(seed=3))
    noisy = make_task(TaskSpec(noise_std=0.1, seed=3))
    assert np.array_equal(quiet.x_train, noisy.x_train)
    assert not np.array_equal(quiet.y_train, noisy.y_train)


def test_task_rank_validation():
    with pytest.raises(ValueError):
        TaskSpec(d1=4, d2=8, k=5)
    with pytest.raises(ValueError):
        TaskSpec(n_train=0)


def test_realizable_task_is_recovered_by_lora():
    task = make_task(TaskSpec(d1=16, d2=16, k=4, seed=0))
    ad = new_adapter(AdapterConfig(16, 16, 4, MixerKind.identity(), seed=0))
    log = train(ad, task.W0, task, TrainConfig(0.05, 1000))
    assert min(log.losses) < 1e-6


def test_steps_to_fraction():
    assert steps_to_fraction([10.0, 5.0, 1.0, 0.5]) == 2
    assert steps_to_fraction([10.0, 10.0]) is None
    assert steps_to_fraction([0.0]) == 0


def _spec(**kw):
    base = dict(
        methods=(Method.LORA,),
        ranks=(2,),
        seeds=(0,),
        train=TrainConfig(0.05, 0),
        task=TaskSpec(d1=8, d2=8, n_train=32, n_eval=8, k=2),
    )
    base.update(kw)
    return SweepSpec(**base)


def test_sweep_zero_steps_single_row():
    report = run_sweep(_spec())
    assert len(report.rows) == 1
    row = report.rows[0]
    assert row.final_loss == row.best_loss
    assert row.method == "LoRA" and row.mixer_init == "none"
    assert row.param_count == 32


def test_sweep_zero_init_never_improves():
    spec = _spec(
        methods=(Method.MOSLORA_LEARNABLE,),
        inits=(InitKind.ZEROS, InitKind.KAIMING_UNIFORM),
        train=TrainConfig(0.05, 400),
    )
    zeros, kaiming = run_sweep(spec).rows
    assert zeros.mixer_init == "zeros"
    assert zeros.steps_to_90pct is None
    assert zeros.final_loss == zeros.best_loss
    assert kaiming.steps_to_90pct is not None


def test_sweep_rows_cover_grid_in_order():
    spec = _spec(
        methods=(Method.MOSLORA_LEARNABLE, Method.LORA, Method.TS_MIXING),
        inits=(InitKind.ORTHOGONAL, InitKind.IDENTITY),
        ranks=(4, 2),
        seeds=(1, 0),
        train=TrainConfig(0.05, 3),
    )
    rows = run_sweep(spec).rows
    assert len(rows) == (1 + 1 + 2) * 2 * 2
    keys = [(r.method, r.mixer_init, r.rank, r.seed) for r in rows]
    assert keys[0] == ("LoRA", "none", 2, 0)
    assert keys[-1] == ("MoSLoRA-learnable", "orthogonal", 4, 1)
    assert len(set(keys)) == len(keys)


def test_sweep_is_deterministic_across_runs_and_workers():
    spec = _spec(methods=tuple(Method), ranks=(2,), seeds=(0, 1), train=TrainConfig(0.05, 20))
    a = report_to_csv(run_sweep(spec))
    b = report_to_csv(run_sweep(spec))
    c = report_to_csv(run_sweep(_spec(methods=tuple(Method), ranks=(2,), seeds=(0, 1), train=TrainConfig(0.05, 20), workers=2)))
    assert a == b == c


def test_sweep_records_divergence():
    with np.errstate(over="ignore", invalid="ignore"):
        row = run_sweep(_spec(train=TrainConfig(100.0, 200))).rows[0]
    assert row.diverged
    assert "diverged" in report_to_csv(Report((row,)))


def test_sweep_rejects_odd_rank_for_ts_mixing():
    with pytest.raises(ValueError):
        _spec(methods=(Method.TS_MIXING,), ranks=(3,))


def test_sweep_rejects_empty_lists():
    with pytest.raises(ValueError):
        _spec(seeds=())


def test_emit_csv_empty_report(tmp_path):
    path = tmp_path / "r.csv"
    emit_csv(Report(), path)
    assert path.read_bytes() == (",".join(CSV_HEADER) + "\n").encode()


def test_emit_csv_line_count_and_format(tmp_path):
    rows = (
        ReportRow("LoRA", "none", 4, 0, 0.1, 0.1, 5, 128),
        ReportRow("MoSLoRA-learnable", "zeros", 4, 0, 1 / 3, 1 / 3, None, 144),
    )
    path = tmp_path / "r.csv"
    emit_csv(Report(rows), path)
    data = path.read_bytes()
    assert b"\r" not in data
    lines = data.decode().splitlines()
    assert len(lines) == 3
    assert "0.33333333333333331" in lines[2]
    assert ",never," in lines[2]


def test_csv_roundtrip(tmp_path):
    spec = _spec(
        methods=(Method.LORA, Method.MOSLORA_LEARNABLE),
        inits=(InitKind.ZEROS, InitKind.NORMAL),
        train=TrainConfig(0.05, 30),
        record_timing=True,
    )
    report = run_sweep(spec)
    path = tmp_path / "r.csv"
    emit_csv(report, path)
    back = read_csv(path)
    strip = lambda rep: [(r.method, r.mixer_init, r.rank, r.seed, r.final_loss, r.best_loss,
                          r.steps_to_90pct, r.param_count, r.diverged) for r in rep.rows]
    assert strip(back) == strip(report)


def test_emit_csv_reports_path_on_failure(tmp_path):
    bad = tmp_path / "missing" / "r.csv"
    with pytest.raises(OSError, match="missing"):
        emit_csv(Report(), bad)


def test_parse_sweep_spec():
    spec = parse_sweep_spec(
        """
        # init sweep
        methods = LoRA, MoSLoRA-learnable
        inits = zeros, kaiming
        ranks = 2, 4
        seeds = 0
        eta = 0.01
        steps = 7
        d1 = 12
        target = mixed
        """
    )
    assert spec.methods == (Method.LORA, Method.MOSLORA_LEARNABLE)
    assert spec.inits == (InitKind.ZEROS, InitKind.KAIMING_UNIFORM)
    assert spec.ranks == (2, 4)
    assert spec.train == TrainConfig(0.01, 7)
    assert spec.task.d1 == 12 and spec.task.target_kind is TargetKind.LOW_RANK_MIXED


def test_parse_sweep_spec_rejects_unknown_keys():
    with pytest.raises(ValueError, match="line 1"):
        parse_sweep_spec("momentum = 0.9")


def test_ts_mixing_reaches_half_rank_optimum():
    # The butterfly mixer is rank r/2, so on a rank-r target TS-mixing can only
    # reach the best rank-(r/2) least-squares fit, computed here by SVD.
    spec = TaskSpec(d1=16, d2=16, k=4, seed=0)
    task = make_task(spec)
    residual = task.y_train - matmul(task.x_train, task.W0)
    q, _ = np.linalg.qr(task.x_train)
    s = np.linalg.svd(q.T @ residual, compute_uv=False)
    optimum = float(np.sum(s[2:] ** 2)) / residual.size

    ad = new_adapter(AdapterConfig(16, 16, 4, MixerKind.butterfly(), seed=0))
    log = train(ad, task.W0, task, TrainConfig(0.05, 1500))
    assert optimum > 1.0
    assert abs(min(log.losses) - optimum) <= 1e-8 * optimum
