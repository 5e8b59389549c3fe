"""Command-line experiment runner.

Exit codes: 0 success, 2 configuration error, 3 solver non-convergence,
4 I/O error.
"""

import argparse
import sys

from .experiments import (
    ConfigError,
    parse_config,
    run_compare,
    run_convergence,
    run_single,
)
from .linalg import NonConvergenceError
from .solver import FixedPointDiverged

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NONCONVERGENCE = 3
EXIT_IO = 4


def _add_common(sub):
    sub.add_argument("config", help="experiment configuration file")
    sub.add_argument("--output-dir", help="override the configured output directory")
    sub.add_argument("--verbose", action="store_true", help="per-sweep progress output")
    sub.add_argument(
        "--threads",
        type=int,
        default=1,
        help="worker threads for the deterministic-parallel paths (default 1)",
    )
    sub.add_argument(
        "--seed", type=int, default=0, help="reserved; the default paths are seed-free"
    )


def build_parser():
    parser = argparse.ArgumentParser(
        prog="monoiga",
        description="Space-time isogeometric monodomain solver experiments",
    )
    subs = parser.add_subparsers(dest="command", required=True)
    for name, helptext in (
        ("solve", "single solve with field output"),
        ("convergence", "refinement study on the manufactured 1D problem"),
        ("compare", "plain Galerkin versus stabilized comparison"),
    ):
        sub = subs.add_parser(name, help=helptext)
        _add_common(sub)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = parse_config(args.config)
        if args.output_dir:
            cfg.output_dir = args.output_dir
        if args.verbose:
            cfg.verbose = True
        if args.threads < 1:
            raise ConfigError("--threads must be at least 1")
        cfg.threads = args.threads
        cfg.seed = args.seed
        if args.command == "solve":
            cfg.kind = "solve"
            run_single(cfg)
        elif args.command == "convergence":
            cfg.kind = "convergence"
            run_convergence(cfg)
        else:
            cfg.kind = "compare"
            run_compare(cfg)
    except ConfigError as exc:
        print("configuration error: %s" % exc, file=sys.stderr)
        return EXIT_CONFIG
    except (FixedPointDiverged, NonConvergenceError) as exc:
        print("solver did not converge: %s" % exc, file=sys.stderr)
        return EXIT_NONCONVERGENCE
    except OSError as exc:
        print("i/o error: %s" % exc, file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
