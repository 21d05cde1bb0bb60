"""Relative uncertainty of eta2 <q2> versus measurement time.

Runs the full pipeline on the reference sweep configuration (or a config
file) for each duration and writes the sweep CSV with the fitted power law.

    python scripts/uncertainty_sweep.py --out sweep.csv [--flux 1e10] [--config run.yaml]
"""

import argparse
import logging
import sys
import warnings

from tbcal import experiments as E
from tbcal.errors import WindowTooShort
from tbcal.oracle import run_uncertainty_sweep
from tbcal.pipeline import load_config


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", help="run config (default: built-in sweep configuration)")
    p.add_argument("--flux", type=float, default=1e10, help="mean pair flux of the built-in config")
    p.add_argument("--durations", type=float, nargs="+", default=[2.5e-4, 5e-4, 1e-3, 2.5e-3])
    p.add_argument("--repetitions", type=int, default=30)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", default="sweep.csv")
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    run = load_config(args.config) if args.config else E.sweep_run(mean_flux=args.flux)

    def progress(i, n):
        if i % 10 == 0 or i == n:
            logging.info("%d/%d runs", i, n)

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", WindowTooShort)
        res = run_uncertainty_sweep(run, args.durations, args.repetitions,
                                    workers=args.workers, progress=progress)
    print(res.to_csv(args.out))
    return 0


if __name__ == "__main__":
    sys.exit(main())
