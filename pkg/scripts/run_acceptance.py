"""Run the acceptance suite and print one PASS/FAIL line per criterion.

Usage:  python3 scripts/run_acceptance.py [-k EXPR]

The suite takes roughly 11 minutes on one core; criterion 10
(200 posterior fits) dominates.  Pass ``-k "not c10"`` for a quick run.
"""
import sys
from pathlib import Path

import pytest

if __name__ == "__main__":
    root = Path(__file__).resolve().parents[1]
    sys.exit(pytest.main([str(root / "tests" / "test_acceptance.py"), "-q", "--tb=no", *sys.argv[1:]]))
