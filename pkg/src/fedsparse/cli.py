"""Command-line entry point: ``fedsparse {run,validate,entropy,resume}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from fedsparse import config as config_mod
from fedsparse.experiment import load_checkpoint, resume, run_experiment
from fedsparse.mask import BinaryMask
from fedsparse.metrics import estimate_entropy


def _cmd_run(args) -> int:
    cfg = config_mod.load(args.config, seed=args.seed)
    result = run_experiment(cfg, workers=args.workers)
    last = result.history.entries[-1][1] if result.history.entries else None
    if last is not None:
        print(f"{len(result.history)} rounds -> {result.output_dir}  "
              f"final accuracy {last.accuracy:.4f}  bpp {last.bpp_avg:.4f}")
    else:
        print(f"0 rounds -> {result.output_dir}")
    return 0


def _cmd_validate(args) -> int:
    cfg = config_mod.load(args.config, seed=args.seed)
    topo = cfg.topology()
    print(f"ok: method={cfg.method} rounds={cfg['rounds']} parameters={topo.n_params}")
    return 0


def _cmd_entropy(args) -> int:
    data = Path(args.maskfile).read_bytes()
    n = args.n if args.n is not None else 8 * len(data)
    mask = BinaryMask.from_bytes(data, n)
    print(f"{estimate_entropy(mask):.6f}")
    return 0


def _cmd_resume(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    cfg = config_mod.from_text(ckpt.config_text)
    if ckpt.round >= cfg["rounds"]:
        print(f"checkpoint is at round {ckpt.round} of {cfg['rounds']}; nothing to do")
        return 0
    result = resume(args.checkpoint, workers=args.workers)
    print(f"resumed at round {ckpt.round}; finished {cfg['rounds']} rounds -> {result.output_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedsparse", description="Federated sparse random-network mask training")
    parser.add_argument("-v", "--verbose", action="store_true", help="log every round")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="execute an experiment")
    p.add_argument("config")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--workers", type=int, help="client threads per round (results do not depend on it)")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("validate", help="parse and check a config without running it")
    p.add_argument("config")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=_cmd_validate)

    p = sub.add_parser("entropy", help="empirical bits per parameter of a packed mask dump")
    p.add_argument("maskfile")
    p.add_argument("--n", type=int, help="mask length in bits (default: 8 x file size)")
    p.set_defaults(func=_cmd_entropy)

    p = sub.add_parser("resume", help="continue an experiment from a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--workers", type=int)
    p.set_defaults(func=_cmd_resume)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (config_mod.ConfigError, ValueError, OSError, RuntimeError) as exc:
        print(f"fedsparse {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
