import sys
from pathlib import Path

import pytest

TESTS_DIR = Path(__file__).parent
sys.path.insert(0, str(TESTS_DIR))


@pytest.fixture(scope="session")
def scenarios_dir() -> Path:
    return TESTS_DIR.parent / "scenarios"
