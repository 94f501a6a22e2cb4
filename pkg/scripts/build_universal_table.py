"""Regenerate the bundled table of the universal hopping exponent I(beta).

Usage:  python3 scripts/build_universal_table.py [--per-decade 30] [--beta-max 5000]
"""
from __future__ import annotations

import argparse
import time
from pathlib import Path

import numpy as np

from nvbath.analytic import universal_exponent

OUT = Path(__file__).resolve().parents[1] / "src" / "nvbath" / "data" / "universal_exponent.csv"


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--per-decade", type=int, default=30)
    ap.add_argument("--beta-min", type=float, default=1e-3)
    ap.add_argument("--beta-max", type=float, default=5e3)
    ap.add_argument("--lin-lo", type=float, default=5.0)
    ap.add_argument("--lin-hi", type=float, default=600.0)
    ap.add_argument("--lin-step", type=float, default=0.25)
    ap.add_argument("--rtol", type=float, default=1e-8)
    ap.add_argument("--out", type=Path, default=OUT)
    args = ap.parse_args()

    n = int(round(np.log10(args.beta_max / args.beta_min) * args.per_decade)) + 1
    # I(beta) carries a weak oscillation of period ~4 in beta (critical points
    # of the coupling geometry); resolve it with a dense linear band.
    lin = np.arange(args.lin_lo, args.lin_hi + 1e-9, args.lin_step)
    betas = np.unique(np.concatenate([np.geomspace(args.beta_min, args.beta_max, n), lin]))
    rows = []
    t0 = time.time()
    for b in betas:
        rows.append((b, universal_exponent(b, rtol=args.rtol)))
        if len(rows) % 50 == 0:
            print(f"beta={b:10.4g}  I={rows[-1][1]: .12g}  t={time.time() - t0:6.1f}s", flush=True)
    header = f"universal exponent I(beta); rtol={args.rtol:g}\nbeta,I"
    np.savetxt(args.out, np.array(rows), delimiter=",", header=header, fmt="%.17g")


if __name__ == "__main__":
    main()
