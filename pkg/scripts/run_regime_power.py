"""Power curves for the sum and higher-criticism tests over a grid of
score counts.

Runs one sparse-mixture regime cell (signal fraction exponent p plus
either the strong-regime mass exponent r or the weak-regime closeness
exponent q) across an ascending m grid, calibrating critical values on
fresh null draws.  Output is a CSV with one row per (m, statistic).

Example:
    python scripts/run_regime_power.py --regime weak --p 0.2 --q 0.3 \
        --m 1000,10000,100000 --reps 2000 --out power.csv
"""

import argparse
import sys
import time
from pathlib import Path

from wmkit.simulation import Regime, RegimeConfig, run_power


def parse_args(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--regime", choices=[r.value for r in Regime], required=True)
    ap.add_argument("--p", type=float, required=True, help="sparsity exponent")
    ap.add_argument("--r", type=float, default=None, help="strong-regime green-mass exponent")
    ap.add_argument("--q", type=float, default=None, help="weak-regime closeness exponent")
    ap.add_argument("--m", default="100,1000,10000,100000", help="comma-separated ascending grid")
    ap.add_argument("--reps", type=int, default=2000)
    ap.add_argument("--alpha", type=float, default=0.01)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", type=Path, default=Path("power.csv"))
    return ap.parse_args(argv)


def main(argv=None) -> int:
    args = parse_args(argv)
    config = RegimeConfig(
        regime=Regime(args.regime),
        p=args.p,
        r=args.r,
        q=args.q,
        m_grid=tuple(int(float(s)) for s in args.m.split(",")),
        reps=args.reps,
        alpha=args.alpha,
        seed=args.seed,
    )
    t0 = time.time()
    curve = run_power(config)
    args.out.write_text(curve.to_csv())
    for row in curve.rows:
        print(f"m={row.m:>7d}  {row.statistic.value:<4s}  power={row.power:.4f}")
    print(f"wrote {args.out} in {time.time() - t0:.1f}s")
    return 0


if __name__ == "__main__":
    sys.exit(main())
