"""Linear example along one simulated path; writes CSVs to --out."""
from __future__ import annotations

import argparse
from pathlib import Path

from pibsde.experiments import parse_config, run_fig1


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", type=Path)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", type=Path, default=Path("results/fig1"))
    args = ap.parse_args()
    text = args.config.read_text() if args.config else "model = linear\n"
    cfg = parse_config(text, {"seed": args.seed})
    for p in run_fig1(cfg, args.out).values():
        print(p)


if __name__ == "__main__":
    main()
