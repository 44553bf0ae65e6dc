"""Command line entry point: ``stfem convergence`` and ``stfem adaptive``."""
from __future__ import annotations

import argparse
import logging
import sys

from .driver import RunConfig, config_from, read_config, run_adaptive, run_convergence_study
from .linalg import PRECONDITIONER_NAMES
from .problems import PROBLEMS


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stfem",
        description="Stabilized space-time finite elements for parabolic optimal control.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in (("convergence", "uniform refinement study against a closed-form solution"),
                           ("adaptive", "solve-estimate-mark-refine loop")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", help="flat 'key = value' file; flags given here take precedence")
        p.add_argument("--problem", choices=PROBLEMS)
        p.add_argument("--dim", dest="spatial_dim", type=int, choices=(1, 2), help="spatial dimension (ball only)")
        p.add_argument("--degree", type=int, choices=(1, 2, 3))
        p.add_argument("--n0", type=int, help="initial subdivisions per direction")
        p.add_argument("--levels", type=int, help="number of uniform levels")
        p.add_argument("--steps", type=int, help="number of adaptive refinements")
        p.add_argument("--rho", type=float, help="regularization parameter")
        p.add_argument("--theta", type=float, help="stabilization scale in lam_K = theta h_K^2")
        p.add_argument("--stabilization", choices=("per_element", "global"))
        p.add_argument("--theta-mark", type=float, help="Doerfler bulk fraction")
        p.add_argument("--rtol", type=float)
        p.add_argument("--restart", type=int)
        p.add_argument("--maxit", type=int)
        p.add_argument("--preconditioner", choices=("auto",) + PRECONDITIONER_NAMES)
        p.add_argument("--out", dest="out_dir", help="output directory")
        p.add_argument("--dump-system", action="store_true", default=None,
                       help="write K and f of every solve in Matrix Market format")
        p.add_argument("--no-plots", dest="plots", action="store_false", default=None)
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config", "verbose")}
    try:
        base = RunConfig(**read_config(args.config)) if args.config else None
        config = config_from(base, **flags)
    except (OSError, ValueError, TypeError) as exc:
        print(f"stfem: {exc}", file=sys.stderr)
        return 2
    run = run_convergence_study if args.command == "convergence" else run_adaptive
    try:
        result = run(config)
    except ValueError as exc:
        print(f"stfem: {exc}", file=sys.stderr)
        return 2
    print(f"wrote {result.out_dir / 'report.csv'} ({len(result.rows)} rows)")
    return 0 if result.ok else 1


if __name__ == "__main__":
    sys.exit(main())
