"""Scan risk aversion for the linear model: stability of both Riccati
equations and the blow-up time of the value function when unstable."""
from __future__ import annotations

import argparse

import numpy as np

from pibsde.closed_form import Kind, nirvana_blowup_time, stability_full, stability_partial
from pibsde.filtering import abar
from pibsde.model import LinearOuModel


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--kappa", type=float, default=0.9)
    ap.add_argument("--a", type=float, default=0.8)
    ap.add_argument("--rho", type=float, default=0.4)
    ap.add_argument("--sigma", type=float, default=1.0)
    ap.add_argument("--T", type=float, default=10.0)
    args = ap.parse_args()
    m = LinearOuModel(kappa=args.kappa, a=args.a, rho=args.rho, sigma=args.sigma)
    print(f"abar = {abar(m):.6g}")
    print("gamma    full   partial  blowup_full  blowup_partial")
    for g in np.round(np.geomspace(0.02, 5.0, 15), 4):
        if g == 1:
            continue
        f, p = stability_full(m, g), stability_partial(m, g)
        bf = "" if f else nirvana_blowup_time(m, g, args.T, Kind.LINEAR_FULL)
        bp = "" if p else nirvana_blowup_time(m, g, args.T, Kind.LINEAR_PARTIAL)
        print(f"{g:<8g} {str(f):6s} {str(p):8s} {str(bf):12s} {bp}")


if __name__ == "__main__":
    main()
