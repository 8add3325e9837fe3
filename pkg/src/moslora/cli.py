"""Command-line entry point: ``moslora {train,sweep,verify,merge,inspect}``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from moslora import checkpoint, verify
from moslora.adapter import AdapterConfig, Mixer, MixerKind, new_adapter, param_count, rank1_expand, scaling
from moslora.dynamics import TrainConfig, train
from moslora.harness import TargetKind, TaskSpec, emit_csv, make_task, parse_sweep_spec, report_to_csv, run_sweep
from moslora.matrix import InitKind

MIXERS = {
    "identity": Mixer.FIXED_IDENTITY,
    "butterfly": Mixer.FIXED_BUTTERFLY,
    "orthogonal": Mixer.FIXED_ORTHOGONAL,
    "learnable": Mixer.LEARNABLE,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="moslora", description="Mixture-of-subspaces low-rank adapters.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train one adapter on a synthetic teacher-student task")
    p.add_argument("--d1", type=int, default=16)
    p.add_argument("--d2", type=int, default=16)
    p.add_argument("--rank", type=int, default=4)
    p.add_argument("--mixer", choices=sorted(MIXERS), default="learnable")
    p.add_argument("--mixer-init", default="kaiming", help="zeros|identity|normal|orthogonal|kaiming")
    p.add_argument("--alpha", type=float, default=0.0)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--task", choices=[k.value for k in TargetKind], default="plain")
    p.add_argument("--out", type=Path, help="write the trained adapter checkpoint here")

    p = sub.add_parser("sweep", help="run a method/initialization sweep from a key=value spec file")
    p.add_argument("--spec", type=Path, required=True)
    p.add_argument("--out", type=Path, help="CSV output path (default: stdout)")

    p = sub.add_parser("verify", help="run the built-in property checks")
    p.add_argument("--filter", dest="pattern", help="only run checks whose name or group contains this")

    p = sub.add_parser("merge", help="fold an adapter checkpoint into a raw base matrix")
    p.add_argument("--base", type=Path, required=True)
    p.add_argument("--adapter", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("inspect", help="describe a checkpoint")
    p.add_argument("checkpoint", type=Path)
    return parser


def cmd_train(args: argparse.Namespace) -> int:
    kind = MIXERS[args.mixer]
    mixer = MixerKind(kind, InitKind.parse(args.mixer_init) if kind is Mixer.LEARNABLE else None)
    config = AdapterConfig(args.d1, args.d2, args.rank, mixer, args.alpha, args.seed)
    k = min(args.rank, args.d1, args.d2)
    task = make_task(TaskSpec(args.d1, args.d2, k=k, target_kind=TargetKind(args.task), seed=args.seed))
    log = train(new_adapter(config), task.W0, task, TrainConfig(args.lr, args.steps, seed=args.seed))

    every = max(1, args.steps // 10)
    print("step,loss,norm_gA,norm_gW,norm_gB")
    for rec in log.records:
        if rec.step % every == 0 or rec is log.records[-1]:
            print(f"{rec.step},{rec.loss:.17g},{rec.norm_gA:.17g},{rec.norm_gW:.17g},{rec.norm_gB:.17g}")
    if log.diverged:
        print(f"diverged: {log.diagnostic}", file=sys.stderr)
    if args.out:
        checkpoint.save_checkpoint(log.final_adapter, args.out)
    return 1 if log.diverged else 0


def cmd_sweep(args: argparse.Namespace) -> int:
    report = run_sweep(parse_sweep_spec(args.spec.read_text(encoding="utf-8")))
    if args.out:
        emit_csv(report, args.out)
    else:
        sys.stdout.write(report_to_csv(report))
    return 0


def cmd_verify(args: argparse.Namespace) -> int:
    results = verify.run_checks(args.pattern)
    if not results:
        print(f"no checks match {args.pattern!r}", file=sys.stderr)
        return 1
    return 0 if all(r.passed for r in results) else 1


def cmd_merge(args: argparse.Namespace) -> int:
    checkpoint.merge_files(args.base, args.adapter, args.out)
    return 0


def cmd_inspect(args: argparse.Namespace) -> int:
    adapter = checkpoint.load_checkpoint(args.checkpoint)
    c = adapter.config
    print(f"d1={c.d1} d2={c.d2} r={c.r}")
    print(f"mixer={c.mixer} trainable={adapter.w_trainable}")
    print(f"alpha={c.alpha:.17g} scaling={scaling(c):.17g}")
    print(f"param_count={param_count(c)}")
    print(f"rank1_terms={len(rank1_expand(adapter))}")
    return 0


COMMANDS = {
    "train": cmd_train,
    "sweep": cmd_sweep,
    "verify": cmd_verify,
    "merge": cmd_merge,
    "inspect": cmd_inspect,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (OSError, ValueError) as exc:
        print(f"moslora {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
