"""Command-line entry point: ``spgd {run,compare,check,probe}``.

Exit codes: 0 success, 1 failed self-checks, 2 configuration error,
3 internal failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import warnings

from . import config as config_mod
from .checks import run_checks
from .diagnostics import spectral_probe
from .errors import InvalidConfigError
from .experiment import build_problem, run_cells, write_comparison, write_outputs
from .optimizers import make_rng

EXIT_OK, EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_INTERNAL = 0, 1, 2, 3


def _seed_list(text):
    try:
        return tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be a comma-separated list of integers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spgd", description="SVD-preconditioned optimizers: experiments and self-checks")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_config=True):
        p.add_argument("--config", required=needs_config, help="experiment config file")
        p.add_argument("--out", help="output directory (overrides [run] out)")
        p.add_argument("--seeds", type=_seed_list, help="comma-separated seeds (overrides [run] seeds)")
        p.add_argument("--epochs", type=int, help="epochs per cell (overrides [run] epochs)")
        p.add_argument("--quiet", action="store_true", help="print nothing but errors")

    common(sub.add_parser("run", help="train every (method, seed) cell and write traces"))
    common(sub.add_parser("compare", help="like run, plus milestone table and median traces"))
    common(sub.add_parser("check", help="run the self-check suite"), needs_config=False)
    common(sub.add_parser("probe", help="singular values of the Jacobian at the initial point"))
    return parser


def _load(args):
    cfg = config_mod.load(args.config)
    return cfg.with_overrides(seeds=args.seeds, epochs=args.epochs, out=args.out)


def _say(args, *msg, **kw):
    if not args.quiet:
        print(*msg, **kw)


def cmd_run(args, compare=False) -> int:
    cfg = _load(args)
    if compare and len(cfg.methods) < 2:
        raise InvalidConfigError("compare needs at least two [method:<label>] sections")

    def progress(label, seed, trace):
        tail = "diverged" if trace.diverged else f"final loss {trace[-1].loss:.3e}"
        _say(args, f"{label} seed={seed}: {len(trace)} epochs, {tail}")

    traces = run_cells(cfg, progress)
    result = write_outputs(cfg, traces)
    if compare:
        _say(args, write_comparison(cfg, traces, result), end="")
    _say(args, f"wrote {len(result['cells'])} traces to {cfg.out}")
    return EXIT_OK


def cmd_check(args, problems=None) -> int:
    results = run_checks(problems)
    for r in results:
        _say(args, f"{'PASS' if r.passed else 'FAIL'}  {r.name}: {r.detail}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"{len(failed)} check(s) failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_CHECK_FAILED
    _say(args, f"all {len(results)} checks passed")
    return EXIT_OK


def cmd_probe(args) -> int:
    cfg = _load(args)
    problem = build_problem(cfg.problem)
    rows = []
    for seed in cfg.seeds:
        theta0 = problem.initial_point(make_rng(seed))
        probe = spectral_probe(problem, theta0, cfg.methods[0].hyper.precond.trunc_tol)
        rows.append({"seed": seed, **probe.__dict__})
    _say(args, json.dumps(rows, indent=2))
    return EXIT_OK


def main(argv=None, *, check_problems=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with warnings.catch_warnings():
            if args.quiet:
                warnings.simplefilter("ignore")
            if args.command == "run":
                return cmd_run(args)
            if args.command == "compare":
                return cmd_run(args, compare=True)
            if args.command == "check":
                return cmd_check(args, check_problems)
            return cmd_probe(args)
    except InvalidConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
