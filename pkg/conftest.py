import os
import sys

# The repository is a flat package; make its modules importable as top-level names.
ROOT = os.path.dirname(os.path.abspath(__file__))
if ROOT not in sys.path:
    sys.path.insert(0, ROOT)

collect_ignore = ["examples", "runs"]


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long desk-scale acceptance runs (deselect with -m 'not slow')")
