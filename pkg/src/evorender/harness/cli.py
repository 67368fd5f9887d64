"""Command-line entry point.

Subcommands: train-volume, train-splat, render, gradcheck, bench.
Exit codes: 0 success, 1 usage error, 2 runtime failure. The ERM_THREADS
environment variable caps BLAS worker counts for the numerics backend.
"""

from __future__ import annotations

import argparse
import os
import sys
import time


def _apply_thread_cap():
    cap = os.environ.get("ERM_THREADS")
    if not cap:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(var, cap)


def build_parser():
    p = argparse.ArgumentParser(prog="evorender",
                                description="desk-scale differentiable renderer")
    sub = p.add_subparsers(dest="command")

    def add_train(name):
        t = sub.add_parser(name)
        t.add_argument("config")
        t.add_argument("--seed", type=int, default=None)
        t.add_argument("--out-dir", default=None)
        t.add_argument("--iters", type=int, default=None)
        return t

    add_train("train-volume")
    add_train("train-splat")

    r = sub.add_parser("render")
    r.add_argument("checkpoint")
    r.add_argument("camera", type=int)
    r.add_argument("out")

    g = sub.add_parser("gradcheck")
    g.add_argument("--module", default=None,
                   choices=["diffcore", "fields", "sampling", "volren",
                            "primitives"])

    b = sub.add_parser("bench")
    b.add_argument("config")
    b.add_argument("--iters", type=int, default=20)
    return p


def _load_cfg(args):
    from .config import load_config
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.set("train.seed", args.seed)
    if args.iters is not None:
        cfg.set("train.iters", args.iters)
    return cfg


def _out_dir(args, cfg):
    if args.out_dir is not None:
        return args.out_dir
    if "out.dir" in cfg:
        return cfg.get("out.dir")
    return "out"


def cmd_train(args, kind):
    from . import train as tr
    cfg = _load_cfg(args)
    out = _out_dir(args, cfg)
    run = tr.train_volume if kind == "volume" else tr.train_splat
    result = run(cfg, out_dir=out)
    print(f"final psnr: {result['final_psnr']:.4f} dB "
          f"(loss {result['final_loss']:.6g}); artifacts in {out}")
    return 0


def cmd_render(args):
    from . import train as tr
    tr.render_from_checkpoint(args.checkpoint, args.camera, args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_gradcheck(args):
    from .gradcheck import run_suites
    results = run_suites(only=args.module)
    width = max(len(n) for n, _, _ in results)
    ok = True
    for name, max_rel, passed in results:
        status = "pass" if passed else "FAIL"
        print(f"{name:<{width}}  max rel err {max_rel:.3e}  {status}")
        ok = ok and passed
    return 0 if ok else 2


def cmd_bench(args):
    from . import train as tr
    from .config import load_config
    cfg = load_config(args.config)
    cfg.set("train.iters", args.iters)
    cfg.set("train.eval_every", max(args.iters, 1))
    kind = cfg.get("pipeline.kind", "volume")
    t0 = time.perf_counter()
    run = tr.train_volume if kind == "volume" else tr.train_splat
    run(cfg, out_dir=None)
    dt = time.perf_counter() - t0
    print(f"{args.iters} iters in {dt:.2f} s "
          f"({1000.0 * dt / max(args.iters, 1):.1f} ms/iter)")
    return 0


def main(argv=None):
    _apply_thread_cap()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 1 if e.code not in (0, None) else 0
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    try:
        if args.command == "train-volume":
            return cmd_train(args, "volume")
        if args.command == "train-splat":
            return cmd_train(args, "splat")
        if args.command == "render":
            return cmd_render(args)
        if args.command == "gradcheck":
            return cmd_gradcheck(args)
        if args.command == "bench":
            return cmd_bench(args)
        parser.print_usage(sys.stderr)
        return 1
    except (ValueError, KeyError) as e:
        # config and input validation problems count as usage errors
        from .config import ConfigError
        if isinstance(e, ConfigError):
            print(f"error: {e}", file=sys.stderr)
            return 1
        print(f"runtime failure: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
