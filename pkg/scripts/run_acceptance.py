"""Run the acceptance checks outside pytest and print one line per criterion."""

import sys
from pathlib import Path

TESTS = Path(__file__).resolve().parents[1] / "tests"
sys.path.insert(0, str(TESTS))

import test_acceptance  # noqa: E402

if __name__ == "__main__":
    sys.exit(test_acceptance.main())
