"""Run the acceptance suite and print the PASS/FAIL line of each criterion.

    python scripts/run_acceptance.py [--cache DIR] [-k EXPR]
"""

import argparse
import os
import sys
from pathlib import Path

import pytest


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--cache", help="directory for per-repetition results (TBCAL_CACHE)")
    p.add_argument("-k", dest="expr", help="pytest -k expression selecting criteria")
    args = p.parse_args(argv)
    if args.cache:
        os.environ["TBCAL_CACHE"] = args.cache
    root = Path(__file__).resolve().parents[1]
    cmd = [str(root / "tests" / "test_acceptance.py"), "-q", "-rA", "--rootdir", str(root)]
    if args.expr:
        cmd += ["-k", args.expr]
    return pytest.main(cmd)


if __name__ == "__main__":
    sys.exit(main())
