"""Command-line entry point: ``perturbmc <command> ...``."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys

import numpy as np

from . import __version__
from . import finite_oracle as fo
from . import inverse_problem as ip
from . import runner
from . import samplers as sm
from .errors import BlowupError, ConfigError, MissingOutputError


def _cmd_run(args) -> int:
    cfg = runner.load_config(args.config, seed_override=args.seed)
    if args.workers is not None:
        if args.workers < 1:
            raise ConfigError({"workers": "must be an integer >= 1"})
        cfg = dataclasses.replace(cfg, workers=args.workers)
    manifest = runner.run(cfg)
    print(f"{manifest.directory}/{runner.MANIFEST}")
    return 0


def _cmd_summarize(args) -> int:
    text, code = runner.summarize(args.manifest)
    print(text)
    return code


def _cmd_ladder(args) -> int:
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["k", "beta"])
    for k, b in enumerate(sm.tempering_ladder(args.K, args.alpha)):
        w.writerow([k, format(float(b), ".17g")])
    return 0


def _cmd_oracle_gap(args) -> int:
    chain = fo.read_chain_csv(args.chain)
    rep = fo.spectral_gap(chain)
    print(f"kappa,{format(rep.kappa, '.17g')}")
    print(f"reversibility_residual,{format(rep.reversibility_residual, '.17g')}")
    print("eigenvalues," + ",".join(format(float(e), ".17g") for e in rep.eigenvalues))
    return 0


def _cmd_forward(args) -> int:
    spec = ip.ForwardSpec(args.h)
    y = ip.forward(np.array(args.theta), spec)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["time", "species", "value"])
    for i, t in enumerate(spec.obs_times):
        w.writerow([format(t, ".17g"), "prey", format(y[2 * i], ".17g")])
        w.writerow([format(t, ".17g"), "predator", format(y[2 * i + 1], ".17g")])
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="perturbmc", description="Perturbed MCMC experiments and oracles.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an experiment config (TOML)")
    r.add_argument("config")
    r.add_argument("--seed", type=int, help="override the config's master seed")
    r.add_argument("--workers", type=int, help="override the worker count")
    r.set_defaults(func=_cmd_run)

    s = sub.add_parser("summarize", help="pass/fail table for a run manifest")
    s.add_argument("manifest")
    s.set_defaults(func=_cmd_summarize)

    lad = sub.add_parser("ladder", help="print the tempering ladder")
    lad.add_argument("--K", type=int, required=True)
    lad.add_argument("--alpha", type=float, required=True)
    lad.set_defaults(func=_cmd_ladder)

    o = sub.add_parser("oracle", help="exact finite-chain quantities")
    osub = o.add_subparsers(dest="oracle_command", required=True)
    g = osub.add_parser("gap", help="spectral gap of a chain CSV")
    g.add_argument("chain")
    g.set_defaults(func=_cmd_oracle_gap)

    f = sub.add_parser("forward", help="predator-prey observations for one parameter vector")
    f.add_argument("--theta", type=float, nargs=8, required=True,
                   metavar=("PREY0", "PRED0", "R", "K", "S", "W", "U", "V"))
    f.add_argument("--h", type=float, default=ip.H_REF)
    f.set_defaults(func=_cmd_forward)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, MissingOutputError, BlowupError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
