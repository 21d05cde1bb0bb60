"""Simulate and calibrate the reference configurations once each.

    python scripts/demo_calibration.py [--duration 0.01] [--seed 0]
"""

import argparse
import sys

from tbcal import experiments as E
from tbcal.pipeline import simulate_and_calibrate, true_eta_q

CASES = {
    "spontaneous": E.criterion1_run,
    "exponential gain on D2": E.exponential_gain_run,
    "gaussian pulse on D2": E.gaussian_pulse_run,
    "noisy, background subtracted": E.noisy_run,
    "stimulated": E.stimulated_run,
}


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--duration", type=float, default=0.01, help="measurement time per run, s")
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)
    for name, make in CASES.items():
        run = make(duration=args.duration)
        reports = simulate_and_calibrate(run, seed=args.seed)[0]
        print(f"{name}: true eta2<q2> = {true_eta_q(run):.4f}")
        for rep in reports:
            flags = f"  flags={rep.flags}" if rep.flags else ""
            print(f"  {rep.estimator:22s} {rep.eta_q:.4f} +- {rep.eta_q_stderr:.4f}"
                  f"  regime {rep.regime}{flags}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
