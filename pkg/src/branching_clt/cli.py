"""Command-line entry point.

    branching-clt run --config CFG [--out DIR] [--replicas N] [--seed S]
                      [--threads K] [--dump-trajectories]
    branching-clt list-models
    branching-clt describe-model NAME
    branching-clt check DIR

``--config`` without a subcommand is shorthand for ``run``.  Exit status is 0
when every verdict passes or is inconclusive, 1 on a failed verdict and 2 on
usage or configuration errors.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from importlib import resources

from .config import ConfigError, parse_config
from .models import ModelError

__all__ = ["main", "list_models", "describe_model", "bundled_config"]

_CATALOG = {
    "yule": """yule: binary fission at rate b, one type
  parameters:
    b  fission rate, > 0 (default 1)
  eigen-elements: lambda = b, h = 1, gamma = delta_0; Var(W) = 1""",
    "finite_type": """finite_type: multitype branching on types 0..d-1
  parameters:
    rates            branching rate per type, >= 0
    offspring        offspring law per type, rows p_0 p_1 ... summing to 1
    type_kernel      optional; row i is the type distribution of each child of a
                     type-i parent (identity: children copy the parent)
    mutation_rates   optional; rate of single-child type changes per type
    mutation_kernel  row-stochastic target-type matrix of those changes
  conditions: the mean matrix is irreducible with a real dominant eigenvalue
              lambda > 0""",
    "house_of_cards": """house_of_cards: traits in [0, 1], generator A f = int f - alpha(x) f
  parameters:
    alpha  selection function, an expression in x
  realization: rate |alpha(x)|, death where alpha >= 0, binary fission where
               alpha < 0; mutation at rate 1 adds a child with a Uniform[0, 1] trait
  conditions (checked when the model is built, unless alpha is constant):
    selection gap   alpha(x) - alpha(0) > 0 for x in (0, 1]
    integral        int_0^1 dx / (alpha(x) - alpha(0)) > 1
  eigen-elements: lambda solves int_0^1 dx / (lambda + alpha(x)) = 1,
                  h and gamma proportional to 1 / (lambda + alpha),
                  gap rho = lambda + alpha(0); critical when lambda = -2 alpha(0)""",
}


def list_models():
    return "\n".join(sorted(_CATALOG))


def describe_model(name):
    try:
        return _CATALOG[name]
    except KeyError:
        raise KeyError(f"unknown model {name!r}; available: {', '.join(sorted(_CATALOG))}") from None


def bundled_config(name):
    """Path of a bundled example config (``yule.cfg``, ``two_type_small.cfg``,
    ``hoc_small.cfg``, ``hoc_critical.cfg``)."""
    return str(resources.files("branching_clt") / "configs" / name)


def _run_args(p):
    p.add_argument("--config", required=True, metavar="PATH")
    p.add_argument("--out", metavar="DIR", help="output directory (overrides [output] dir)")
    p.add_argument("--replicas", type=int, metavar="N")
    p.add_argument("--seed", type=int, metavar="S")
    p.add_argument("--threads", type=int, metavar="K")
    p.add_argument("--dump-trajectories", action="store_true",
                   help="write every replica's event log as TSV")


def _parser():
    p = argparse.ArgumentParser(prog="branching-clt",
                                description="Branching-process fluctuation experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command")
    _run_args(sub.add_parser("run", help="run an experiment"))
    sub.add_parser("list-models", help="list model families")
    d = sub.add_parser("describe-model", help="parameters and conditions of a model family")
    d.add_argument("name")
    c = sub.add_parser("check", help="recompute reported numbers from replicas.csv")
    c.add_argument("dir")
    return p


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    if argv and argv[0].startswith("--config"):
        argv = ["run"] + argv
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    if args.command == "list-models":
        print(list_models())
        return 0
    if args.command == "describe-model":
        try:
            print(describe_model(args.name))
        except KeyError as exc:
            print(f"error: {exc.args[0]}", file=sys.stderr)
            return 2
        return 0
    if args.command == "check":
        from .experiment import spot_check
        try:
            bad = spot_check(args.dir)
        except (OSError, KeyError, ValueError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
        for line in bad:
            print(line)
        print("spot check " + ("failed" if bad else "ok"))
        return 1 if bad else 0

    from .experiment import run_experiment
    try:
        cfg = parse_config(args.config).with_overrides(
            replicas=args.replicas, seed=args.seed, threads=args.threads, out_dir=args.out,
            dump_trajectories=args.dump_trajectories)
    except ConfigError as exc:
        for e in exc.errors:
            print(f"config error: {e}", file=sys.stderr)
        return 2
    try:
        report = run_experiment(cfg)
    except (ModelError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    s = report.summary
    print(f"model {s['model']}  lambda={s['lambda']:.10g}  rho={s['rho']:.10g}  regime={s['regime']}")
    for name, v in sorted(report.verdicts.items()):
        print(f"  {name:<28} {v}")
    print(f"results in {os.path.abspath(report.out_dir)}")
    return report.exit_code


if __name__ == "__main__":
    sys.exit(main())
