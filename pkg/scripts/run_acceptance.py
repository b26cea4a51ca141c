"""Run the acceptance suite and print one PASS/FAIL line per criterion.

    python3 scripts/run_acceptance.py           # all criteria (about 15 minutes)
    python3 scripts/run_acceptance.py --fast    # skip the planted training and matmul timing
"""

import argparse
import os
import sys

import pytest

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))

if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--fast", action="store_true", help="deselect the slow criteria")
    a = p.parse_args()
    args = [os.path.join(ROOT, "tests", "test_acceptance.py"), "-v", "-s"]
    if a.fast:
        args += ["-m", "not slow"]
    sys.exit(pytest.main(args))
