import numpy as np
import pytest

from moslora import adapter as adapter_mod
from moslora.adapter import GradTriple
from moslora.checkpoint import load_checkpoint, load_matrix, save_matrix
from moslora.cli import main


def test_train_writes_checkpoint_and_is_deterministic(tmp_path, capsys):
    args = ["train", "--d1", "8", "--d2", "8", "--rank", "2", "--steps", "40", "--seed", "3"]
    assert main([*args, "--out", str(tmp_path / "a.msla")]) == 0
    first = capsys.readouterr().out
    assert main([*args, "--out", str(tmp_path / "b.msla")]) == 0
    assert capsys.readouterr().out == first
    assert (tmp_path / "a.msla").read_bytes() == (tmp_path / "b.msla").read_bytes()
    assert first.splitlines()[0] == "step,loss,norm_gA,norm_gW,norm_gB"


def test_train_rejects_unknown_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--momentum", "0.9"])
    assert exc.value.code == 1


def test_train_odd_rank_butterfly_fails(capsys):
    assert main(["train", "--mixer", "butterfly", "--rank", "3", "--steps", "1"]) == 1
    assert "even rank" in capsys.readouterr().err


def test_inspect(tmp_path, capsys):
    path = tmp_path / "a.msla"
    main(["train", "--d1", "8", "--d2", "6", "--rank", "2", "--mixer", "butterfly", "--steps", "5", "--out", str(path)])
    capsys.readouterr()
    assert main(["inspect", str(path)]) == 0
    out = capsys.readouterr().out
    assert "d1=8 d2=6 r=2" in out
    assert "param_count=28" in out
    assert "rank1_terms=4" in out


def test_merge_command(tmp_path, rng):
    ckpt = tmp_path / "a.msla"
    main(["train", "--d1", "8", "--d2", "8", "--rank", "2", "--steps", "30", "--alpha", "4", "--out", str(ckpt)])
    W0 = rng.standard_normal((8, 8))
    save_matrix(W0, tmp_path / "base.bin")
    rc = main(["merge", "--base", str(tmp_path / "base.bin"), "--adapter", str(ckpt), "--out", str(tmp_path / "m.bin")])
    assert rc == 0
    ad = load_checkpoint(ckpt)
    x = rng.standard_normal((4, 8))
    merged = load_matrix(tmp_path / "m.bin")
    assert np.max(np.abs(x @ merged - adapter_mod.forward(ad, W0, x))) <= 1e-10


def test_merge_command_shape_mismatch(tmp_path, rng, capsys):
    ckpt = tmp_path / "a.msla"
    main(["train", "--d1", "8", "--d2", "8", "--rank", "2", "--steps", "1", "--out", str(ckpt)])
    save_matrix(rng.standard_normal((7, 8)), tmp_path / "base.bin")
    rc = main(["merge", "--base", str(tmp_path / "base.bin"), "--adapter", str(ckpt), "--out", str(tmp_path / "m.bin")])
    assert rc == 1
    assert not (tmp_path / "m.bin").exists()


def test_sweep_command(tmp_path, capsys):
    spec = tmp_path / "sweep.txt"
    spec.write_text("methods = LoRA, MoSLoRA-learnable\ninits = zeros\nranks = 2\nsteps = 10\nd1 = 8\nd2 = 8\nk = 2\n")
    assert main(["sweep", "--spec", str(spec), "--out", str(tmp_path / "a.csv")]) == 0
    assert main(["sweep", "--spec", str(spec), "--out", str(tmp_path / "b.csv")]) == 0
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert len((tmp_path / "a.csv").read_text().splitlines()) == 3
    assert main(["sweep", "--spec", str(spec)]) == 0
    assert capsys.readouterr().out.encode() == (tmp_path / "a.csv").read_bytes()


def test_verify_all_pass(capsys):
    assert main(["verify"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 11
    assert all(line.startswith("PASS") for line in lines)


def test_verify_filter(capsys):
    assert main(["verify", "--filter", "trajectory"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 3
    assert all("trajectory/" in line for line in lines)


def test_verify_catches_sign_flip_in_b_gradient(monkeypatch, capsys):
    real = adapter_mod.grad

    def broken(adapter, upstream):
        g = real(adapter, upstream)
        return GradTriple(g.gA, g.gW, -g.gB, g.w_active)

    monkeypatch.setattr(adapter_mod, "grad", broken)
    assert main(["verify", "--filter", "gradient"]) == 1
    assert capsys.readouterr().out.startswith("FAIL  gradient/")


def test_verify_unknown_filter(capsys):
    assert main(["verify", "--filter", "nonexistent"]) == 1
