"""CIR example (both noise levels) with nested Monte Carlo for the partial factor."""
from __future__ import annotations

import argparse
from pathlib import Path

from pibsde.experiments import parse_config, run_fig2


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", type=Path)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--n-inner", type=int, default=10)
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--out", type=Path, default=Path("results/fig2"))
    args = ap.parse_args()
    text = args.config.read_text() if args.config else "model = cir\n"
    cfg = parse_config(text, {"seed": args.seed, "n_inner": args.n_inner, "workers": args.workers})
    for p in run_fig2(cfg, args.out).values():
        print(p)


if __name__ == "__main__":
    main()
