import sys
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture(scope="session")
def sessions_dir():
    return ROOT / "sessions"


@pytest.fixture(scope="session")
def golden_dir():
    return Path(__file__).parent / "golden"
