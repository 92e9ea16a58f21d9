"""``ibf`` command line: train, generate, weights, gradcheck, synth.

Exit status is 0 on success, 1 for usage or validation errors and 2 for
runtime failures.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise UsageError(message)


def _override(text: str):
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    k, v = text.split("=", 1)
    return k.strip(), v.strip()


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ibf", description="Train and apply a per-cut inbetweening network.")
    p.add_argument("--seed", type=int, default=None, help="random seed (overrides config)")
    p.add_argument("--config", default=None, help="TOML config file or preset name")
    # the global flags may also follow the subcommand; SUPPRESS keeps the top-level value
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--config", default=argparse.SUPPRESS)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", parents=[common], help="overfit a network to one cut")
    t.add_argument("--cut", required=True, type=Path)
    t.add_argument("--out", required=True, type=Path, help="checkpoint path")
    t.add_argument("--resume", type=Path, help="continue from this checkpoint")
    t.add_argument("--set", dest="overrides", action="append", type=_override, default=[],
                   metavar="KEY=VALUE", help="override a config key")
    t.add_argument("--log", type=Path, help="also write the training log here")

    g = sub.add_parser("generate", parents=[common], help="quadruple the frame count of a cut")
    g.add_argument("--cut", required=True, type=Path)
    g.add_argument("--ckpt", required=True, type=Path)
    g.add_argument("--out", required=True, type=Path)

    w = sub.add_parser("weights", parents=[common], help="write a loss weight map as grayscale")
    w.add_argument("--mode", choices=("scan", "cell"), required=True)
    w.add_argument("--in", dest="inp", required=True, type=Path)
    w.add_argument("--out", required=True, type=Path)

    c = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    c.add_argument("--full", action="store_true")

    s = sub.add_parser("synth", parents=[common], help="render a synthetic line-art cut")
    s.add_argument("--preset", default="circle")
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--frames", type=int, default=None)
    return p


def cmd_train(args) -> int:
    from .config import load_config
    from .io import load_cut
    from .trainer import resume_from, train_cut

    overrides = dict(args.overrides)
    if args.seed is not None:
        overrides["seed"] = args.seed
    run = load_config(args.config, overrides)
    cfg = run.train_config()
    cut = load_cut(args.cut)
    if cut.n_frames < 3:
        raise ValueError(f"training needs at least 3 frames, {args.cut} has {cut.n_frames}")
    resume = resume_from(args.resume, cfg) if args.resume else None
    log_fh = open(args.log, "a") if args.log else None

    def emit(line):
        print(line, flush=True)
        if log_fh:
            log_fh.write(line + "\n")
            log_fh.flush()

    try:
        _, tlog = train_cut(cut, cfg, out=args.out, resume=resume,
                            log_every=run["log_every"], on_log=emit)
        for path, step in tlog.checkpoints:
            emit(f"checkpoint={path} step={step}")
    finally:
        if log_fh:
            log_fh.close()
    return EXIT_OK


def cmd_generate(args) -> int:
    from .generator import generate_4x, write_sequence
    from .io import load_cut
    from .network import load_checkpoint

    cut = load_cut(args.cut)
    params = load_checkpoint(args.ckpt)
    seq = generate_4x(cut, params)
    manifest = write_sequence(seq, args.out)
    print(f"wrote {len(seq)} frames and {manifest}")
    return EXIT_OK


def cmd_weights(args) -> int:
    from .io import load_image, save_gray
    from .loss import WeightConfig, W_MAX, weights

    img = load_image(args.inp)
    w = weights(img[None], WeightConfig(args.mode))[0, 0]
    save_gray(w / W_MAX, args.out)
    print(f"min={w.min():.6g} max={w.max():.6g} mean={w.mean():.6g}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import TOLERANCE, run_all

    results = run_all(full=args.full)
    for name, err in results.items():
        print(f"{name:20s} max_rel_err={err:.3e}")
    worst = max(results.values())
    print(f"max relative error {worst:.3e} (tolerance {TOLERANCE:g})")
    return EXIT_OK if worst < TOLERANCE else EXIT_RUNTIME


def cmd_synth(args) -> int:
    import dataclasses

    from .io import SYNTH_PRESETS, make_synthetic_cut

    if args.preset not in SYNTH_PRESETS:
        raise ValueError(f"unknown synth preset {args.preset!r}; choose from {', '.join(SYNTH_PRESETS)}")
    spec = SYNTH_PRESETS[args.preset]
    if args.frames is not None:
        spec = dataclasses.replace(spec, n_frames=args.frames)
    cut, mids = make_synthetic_cut(spec, args.out, seed=args.seed or 0)
    print(f"wrote {cut.n_frames} frames and {len(mids)} midframes to {args.out}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "generate": cmd_generate,
    "weights": cmd_weights,
    "gradcheck": cmd_gradcheck,
    "synth": cmd_synth,
}


def main(argv=None) -> int:
    from .config import ConfigError
    from .io import CutError
    from .network import CheckpointError
    from .tensor import ShapeError

    logging.basicConfig(level=logging.INFO, format="%(message)s")
    try:
        args = build_parser().parse_args(argv)
    except UsageError:
        return EXIT_INVALID
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, CutError, CheckpointError, ShapeError, ValueError) as exc:
        print(f"ibf {args.command}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - report and map to the runtime exit code
        print(f"ibf {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
