"""Command line driver.

    crackfield <solve|eps-conv|domain-study|cod-study|sneddon3d> --config PATH
               [--out DIR] [--threads N] [--dump-matrices]

Exit status: 0 success, 2 non-convergence, 3 configuration error, 4 I/O error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

EXIT_OK = 0
EXIT_NONCONVERGED = 2
EXIT_CONFIG = 3
EXIT_IO = 4

COMMANDS = {
    "solve": "solve",
    "eps-conv": "eps_convergence",
    "domain-study": "domain_study",
    "cod-study": "cod_study",
    "sneddon3d": "sneddon3d",
}

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="crackfield", description="Phase-field fracture benchmark driver")
    p.add_argument("command", choices=list(COMMANDS))
    p.add_argument("--config", required=True, help="key = value configuration file")
    p.add_argument("--out", help="output directory (overrides the config's output key)")
    p.add_argument("--threads", type=int, default=None, help="BLAS threads; 1 guarantees bitwise reproducibility")
    p.add_argument("--dump-matrices", action="store_true", help="write every Newton matrix as Matrix Market")
    p.add_argument("--no-figures", action="store_true", help="skip the matplotlib figures")
    p.add_argument("-v", "--verbose", action="count", default=0)
    return p


def _limit_threads(n: int) -> None:
    for var in _THREAD_VARS:
        os.environ[var] = str(n)
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover - env vars still apply to fresh pools
        return
    threadpool_limits(n)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    from .config import ConfigError, load_config

    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"crackfield: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"crackfield: {exc}", file=sys.stderr)
        return EXIT_IO
    threads = args.threads if args.threads is not None else cfg.threads
    if threads < 1:
        print("crackfield: config error: --threads must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    _limit_threads(threads)

    from .studies import run_study

    out = args.out or cfg.output
    try:
        res = run_study(COMMANDS[args.command], cfg, out, dump_matrices=args.dump_matrices,
                        figures=not args.no_figures)
    except OSError as exc:
        print(f"crackfield: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ConfigError as exc:
        print(f"crackfield: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    for c in res.checks:
        print(c.line())
    print(f"wrote {len(res.files)} files to {out}")
    if not res.converged:
        print("crackfield: a level did not converge; partial results kept", file=sys.stderr)
        return EXIT_NONCONVERGED
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
