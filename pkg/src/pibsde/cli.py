"""Command-line entry point: ``pibsde <subcommand> [--config FILE] ...``."""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .closed_form import UnstableRegimeError
from .experiments import (MODEL_DEFAULTS, ConditionAbort, ConfigError, parse_config, run_checks, run_fig1,
                          run_fig2, run_filter, run_riccati, run_simulate, run_xi)
from .bsde import ConditionCheckError
from .filtering import FilterCollapseError
from .sim import InvalidStrategyError, NumericOverflowError

EXIT_OK, EXIT_CONFIG, EXIT_CONDITION, EXIT_NUMERIC = 0, 2, 3, 4

DEFAULT_MODEL = {"fig1": "linear", "fig2": "cir"}

EPILOG = f"""\
config file: 'key = value' lines, '#' comments.  Required key: model (linear | cir).
defaults: gamma=1.2 T=1 r=0 seed=0 n_steps=1000 n_paths=1 n_inner=10 n_checkpoints=50
          grid_n=400 steady=true xi_method=innovations workers=1 out=results
  linear: {' '.join(f'{k}={v}' for k, v in MODEL_DEFAULTS['linear'].items())}
  cir:    {' '.join(f'{k}={v}' for k, v in MODEL_DEFAULTS['cir'].items())} sigmas=0.026,0.15
assumed (echoed with a marker): y0 = 0 (linear) or ybar (cir), s0 = 1, x0 = 1,
          prior = kalman-steady (linear) or point mass at y0 (cir).
exit codes: 0 ok, 2 config error, 3 condition-check abort, 4 numeric failure.
"""


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pibsde", description="Partial-information portfolio experiments.",
                                epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)
    for name, text in (("simulate", "simulate factor and price paths"),
                       ("filter", "filter one simulated path"),
                       ("riccati", "closed-form and RK4 Riccati solutions"),
                       ("xi", "nested Monte Carlo estimate of xi(0)"),
                       ("fig1", "linear example along one path"),
                       ("fig2", "CIR example along one path per noise level"),
                       ("checks", "stability and integrability report")):
        sp = sub.add_parser(name, help=text, epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
        sp.add_argument("--config", type=Path, help="config file (key = value lines)")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out", type=Path, help="output directory")
        sp.add_argument("--n-inner", type=int, dest="n_inner", help="nested Monte Carlo branches")
        sp.add_argument("--sigma", type=float, help="fig2: run a single noise level")
        sp.add_argument("--workers", type=int, help="parallel checkpoint workers")
    return p


def load_config(args) -> object:
    if args.config is not None:
        try:
            text = args.config.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
    else:
        text = f"model = {DEFAULT_MODEL.get(args.command, 'linear')}\n"
    overrides = {"seed": args.seed, "n_inner": args.n_inner, "workers": args.workers,
                 "out": str(args.out) if args.out is not None else None}
    return parse_config(text, overrides)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args)
        cmd = args.command
        if cmd == "checks":
            sys.stdout.write(run_checks(cfg))
        elif cmd == "xi":
            sys.stdout.write(run_xi(cfg))
        else:
            if cmd == "fig2":
                files = run_fig2(cfg, sigmas=(args.sigma,) if args.sigma is not None else None)
            else:
                files = {"simulate": run_simulate, "filter": run_filter, "riccati": run_riccati,
                         "fig1": run_fig1}[cmd](cfg)
            for p in files.values():
                print(p)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConditionAbort, ConditionCheckError) as exc:
        print(f"condition check failed: {exc}", file=sys.stderr)
        return EXIT_CONDITION
    except (NumericOverflowError, FilterCollapseError, UnstableRegimeError, InvalidStrategyError,
            FloatingPointError, ArithmeticError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
