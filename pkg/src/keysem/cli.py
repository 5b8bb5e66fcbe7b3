"""``keysem`` command line: verification suites, cost reports, memory
benchmark and the toy denoising run.

Exit status: 0 success, 1 verification failure, 2 usage or configuration
error.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

from .cost_model import CostInputs
from .pnm import PnmError, read_pnm, write_pnm
from .suites import (run_bench, run_denoise, run_equiv, run_flops, run_gradcheck,
                     synthetic_target)

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def _int_list(text: str):
    try:
        vals = tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _common(p: argparse.ArgumentParser, seed: int):
    p.add_argument("--seed", type=int, default=seed)
    p.add_argument("--threads", type=int, default=1, help="worker threads (results do not depend on it)")
    p.add_argument("--json", action="store_true", help="print the JSON report on stdout")
    p.add_argument("--out", metavar="PATH", help="write the JSON report to PATH")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="keysem",
                                     description="Key-semantic sparse attention toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("equiv", help="sparse vs dense and gather vs mask equivalence")
    _common(p, 0)
    p.add_argument("--cases", type=int, default=500)
    p.add_argument("--tolerance", type=float, default=1e-9)
    p.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    _common(p, 0)
    p.add_argument("--cases", type=int, default=50)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--levels", default="attention,layer,stage,model")

    p = sub.add_parser("flops", help="analytic operation and memory counts")
    _common(p, 0)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--channels", type=int, default=16)
    p.add_argument("--window", type=int, default=8)
    p.add_argument("--k", type=int, default=16)
    p.add_argument("--heads", type=int, default=1)
    p.add_argument("--layers", type=int, default=6)
    p.add_argument("--token-pixels", type=int, default=1)

    p = sub.add_parser("bench", help="peak live elements of both variants over N and k sweeps")
    _common(p, 0)
    p.add_argument("--n-set", type=_int_list, default=(64, 256, 1024, 4096))
    p.add_argument("--k-set", type=_int_list, default=(32, 64, 128, 256, 512))
    p.add_argument("--k", type=int, default=32, help="k for the N sweep")
    p.add_argument("--n", type=int, default=1024, help="N for the k sweep")
    p.add_argument("--embed", type=int, default=32)
    p.add_argument("--heads", type=int, default=1)
    p.add_argument("--budget", type=int, default=1 << 24, help="peak-element budget")
    p.add_argument("--no-timing", action="store_true", help="omit wall-clock fields")

    p = sub.add_parser("denoise", help="train the toy model on one noisy image")
    _common(p, 42)
    p.add_argument("--input", metavar="PGM", help="clean target image (default: synthetic)")
    p.add_argument("--height", type=int, default=32)
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--channels", type=int, default=16)
    p.add_argument("--window", type=int, default=8)
    p.add_argument("--k", type=int, default=None, help="fixed k (default: random from --k-set)")
    p.add_argument("--k-set", type=_int_list, default=(4, 8, 16))
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--embed", type=int, default=16)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--stages", type=int, default=2)
    p.add_argument("--variant", choices=("gather", "mask"), default="mask")
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--sigma", type=float, default=25.0, help="noise std in 8-bit levels")
    p.add_argument("--artifacts", metavar="DIR",
                   help="directory for the checkpoint and the restored image")
    return parser


def _emit(report: dict, args) -> None:
    text = json.dumps(report, indent=2) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    if args.json:
        sys.stdout.write(text)
    else:
        status = "PASS" if report.get("pass") else "FAIL"
        print(f"keysem {report['command']}: {status}")


def _run(args) -> int:
    if args.threads < 1:
        raise ValueError("--threads must be >= 1")
    cmd = args.command
    if cmd == "equiv":
        report, ok = run_equiv(args.seed, args.cases, args.tolerance, args.threads,
                               args.inject_fault)
    elif cmd == "gradcheck":
        levels = tuple(v.strip() for v in args.levels.split(",") if v.strip())
        bad = [v for v in levels if v not in ("attention", "layer", "stage", "model")]
        if bad:
            raise ValueError(f"unknown gradcheck level(s): {', '.join(bad)}")
        report, ok = run_gradcheck(args.seed, args.cases, args.tolerance, args.threads, levels)
    elif cmd == "flops":
        ci = CostInputs(args.height, args.width, args.channels, args.window, args.k,
                        args.heads, args.layers, args.token_pixels)
        report, ok = run_flops(ci, args.seed)
    elif cmd == "bench":
        report, ok = run_bench(args.seed, args.n_set, args.k_set, args.k, args.n, args.embed,
                               args.heads, args.budget, timing=not args.no_timing)
    else:
        clean = read_pnm(args.input) if args.input else synthetic_target(args.height, args.width)
        ckpt = None
        if args.artifacts:
            os.makedirs(args.artifacts, exist_ok=True)
            ckpt = os.path.join(args.artifacts, "model.ksem")
        report, ok, restored, _ = run_denoise(
            clean, seed=args.seed, steps=args.steps, lr=args.lr, sigma=args.sigma,
            stages=args.stages, layers=args.layers, channels=args.channels,
            window=args.window, embed=args.embed, heads=args.heads, k=args.k,
            k_set=args.k_set, variant=args.variant, threads=args.threads,
            checkpoint_path=ckpt)
        if args.artifacts and restored is not None:
            write_pnm(os.path.join(args.artifacts, "restored.pgm"), restored)
    _emit(report, args)
    return EXIT_OK if ok else EXIT_FAIL


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 on bad usage
    try:
        return _run(args)
    except (ValueError, TypeError, PnmError, OSError) as e:
        print(f"keysem {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
