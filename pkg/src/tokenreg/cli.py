"""``tokenreg`` command line: gen-data, train, register, evaluate, gradcheck, inspect.

Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.
Environment: ``REG_THREADS`` caps torch threads, ``REG_DETERMINISTIC=1``
forces deterministic training.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import torch

from tokenreg import diffops
from tokenreg.config import ConfigFileError, RunConfig, load_config
from tokenreg.evalkit import evaluate_pair, register
from tokenreg.model import RegModel, shape_walk
from tokenreg.synthgen import RetryExhaustedError, gen_dataset, load_dataset
from tokenreg.trainer import (
    CheckpointError,
    PhaseOrderError,
    TrainingError,
    load_checkpoint,
    train,
)
from tokenreg.volume import (
    DisplacementField,
    LabelVolume,
    ScalarVolume,
    VolumeError,
    read_volume,
    write_volume,
)
from tokenreg.warp import apply_field

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    """Bad arguments or inputs; maps to exit code 2."""


def _triple(text: str) -> tuple[int, int, int]:
    try:
        parts = tuple(int(p) for p in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected X,Y,Z integers, got {text!r}") from None
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected X,Y,Z integers, got {text!r}")
    return parts


def _existing(path: str | None, what: str) -> Path | None:
    if path is None:
        return None
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


def _run_config(path: str | None) -> RunConfig:
    return RunConfig() if path is None else load_config(_existing(path, "config file"))


def _print_config(cfg: RunConfig) -> None:
    print("# effective configuration")
    print(cfg.to_toml())


def _env_deterministic() -> bool:
    return os.environ.get("REG_DETERMINISTIC", "") == "1"


def _apply_threads() -> None:
    value = os.environ.get("REG_THREADS")
    if value:
        try:
            threads = int(value)
        except ValueError:
            raise UsageError(f"REG_THREADS must be a positive integer, got {value!r}") from None
        if threads < 1:
            raise UsageError(f"REG_THREADS must be a positive integer, got {value!r}")
        torch.set_num_threads(threads)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    cfg = _run_config(args.config).with_overrides(
        "synth", size=args.size, count=args.count, seed=args.seed, max_disp=args.max_disp, smooth_sigma=args.smooth
    )
    _print_config(cfg)
    entries = gen_dataset(cfg.synth, args.out)
    print(f"wrote {len(entries)} pairs to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _run_config(args.config).with_overrides(
        "train", phase=args.phase, steps=args.steps, seed=args.seed, lr=args.lr
    )
    if _env_deterministic():
        cfg = cfg.with_overrides("train", deterministic=True)
    _print_config(cfg)
    data = _existing(args.data, "data directory")
    pairs = load_dataset(data)
    if args.limit is not None:
        pairs = pairs[: args.limit]

    resume = None
    if args.resume is not None:
        model, resume = load_checkpoint(_existing(args.resume, "checkpoint"), cfg.model)
        if resume is None:
            raise UsageError(f"{args.resume} holds no resumable training state")
    elif args.init is not None:
        model, _ = load_checkpoint(_existing(args.init, "checkpoint"), cfg.model)
    else:
        model = RegModel(cfg.model, seed=cfg.train.seed)
    out = Path(args.out)
    trace = Path(str(out) + ".trace")
    result = train(model, pairs, cfg.train, trace_path=trace, checkpoint_path=out, resume=resume)
    first, last = result.trace[0], result.trace[-1]
    print(f"steps {first.step}..{last.step} loss {first.loss:.6g} -> {last.loss:.6g}")
    print(f"checkpoint {out}\ntrace {trace}")
    return EXIT_OK


def cmd_register(args) -> int:
    model, _ = load_checkpoint(_existing(args.ckpt, "checkpoint"))
    moving = read_volume(_existing(args.moving, "moving volume"), ScalarVolume)
    fixed = read_volume(_existing(args.fixed, "fixed volume"), ScalarVolume)
    if moving.geometry.dims != model.cfg.dims or fixed.geometry.dims != model.cfg.dims:
        raise UsageError(
            f"geometry mismatch: moving {moving.geometry.dims}, fixed {fixed.geometry.dims}, model {model.cfg.dims}"
        )
    steps = max(model.trained_steps, default=1)
    phi, elapsed = register(model, moving, fixed, steps)
    write_volume(phi, args.out_field)
    if args.out_warped:
        write_volume(apply_field(moving, phi), args.out_warped)
    print(f"registered with {steps} cascade step(s) in {elapsed:.1f} ms -> {args.out_field}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    phi = read_volume(_existing(args.field, "field"), DisplacementField)
    seg_m = read_volume(_existing(args.moving_seg, "moving segmentation"), LabelVolume)
    seg_f = read_volume(_existing(args.fixed_seg, "fixed segmentation"), LabelVolume)
    report = evaluate_pair(phi, None, None, seg_m, seg_f)
    text = report.to_json()
    print(text)
    if args.report:
        Path(args.report).write_text(text + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    report = diffops.gradcheck(seed=args.seed, eps=args.eps, tol=args.tol, trials=args.trials)
    print(report.format())
    if not report.passed:
        print("failing: " + ", ".join(report.failing), file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_inspect(args) -> int:
    cfg = _run_config(args.config)
    _print_config(cfg)
    for name, shape in shape_walk(cfg.model).items():
        print(f"{name}\t{shape}")
    model = RegModel(cfg.model)
    total = sum(p.numel() for p in model.parameters())
    frozen = sum(p.numel() for p in model.stack_parameters())
    print(f"parameters\t{total}\nstack parameters\t{frozen}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tokenreg", description="Deformable 3D registration toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("gen-data", help="write a synthetic dataset", description="Write a synthetic dataset.")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--size", type=_triple, help="volume dims X,Y,Z (each divisible by 8)")
    p.add_argument("--count", type=int, help="number of pairs")
    p.add_argument("--seed", type=int, help="dataset seed")
    p.add_argument("--max-disp", type=float, help="largest ground-truth displacement in voxels")
    p.add_argument("--smooth", type=float, help="Gaussian sigma of the ground-truth field in voxels")
    p.add_argument("--config", help="TOML run config; flags override its [synth] section")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model", description="Train a model and write a checkpoint.")
    p.add_argument("--config", help="TOML run config")
    p.add_argument("--data", required=True, help="dataset directory written by gen-data")
    p.add_argument("--out", required=True, help="checkpoint path; the loss trace goes to OUT.trace")
    p.add_argument("--phase", help="single, joint or cascade_step_K")
    p.add_argument("--init", help="start from this checkpoint (e.g. the previous cascade step)")
    p.add_argument("--resume", help="continue the run stored in this checkpoint")
    p.add_argument("--steps", type=int, help="optimizer steps to run")
    p.add_argument("--seed", type=int, help="seed for model init and pair order")
    p.add_argument("--lr", type=float, help="Adam learning rate")
    p.add_argument("--limit", type=int, help="train on the first N pairs only")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("register", help="predict a field", description="Register a moving volume to a fixed one.")
    p.add_argument("--ckpt", required=True, help="model checkpoint")
    p.add_argument("--moving", required=True, help="moving scalar volume")
    p.add_argument("--fixed", required=True, help="fixed scalar volume")
    p.add_argument("--out-field", required=True, help="output displacement field")
    p.add_argument("--out-warped", help="optional output for the warped moving volume")
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("evaluate", help="score a field", description="Score a field against label maps.")
    p.add_argument("--field", required=True, help="displacement field")
    p.add_argument("--moving-seg", required=True, help="moving label map")
    p.add_argument("--fixed-seg", required=True, help="fixed label map")
    p.add_argument("--report", help="also write the JSON report here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference check", description="Check primitive gradients.")
    p.add_argument("--eps", type=float, default=1e-5, help="central-difference step")
    p.add_argument("--tol", type=float, default=1e-4, help="relative error tolerance")
    p.add_argument("--seed", type=int, default=0, help="input seed")
    p.add_argument("--trials", type=int, default=20, help="random cases per primitive")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("inspect", help="show model shapes", description="Print the model shape walk.")
    p.add_argument("--config", help="TOML run config")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse: 0 for --help, 2 for usage errors
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        _apply_threads()
        return args.func(args)
    except (UsageError, ConfigFileError, PhaseOrderError, CheckpointError, VolumeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, RetryExhaustedError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
