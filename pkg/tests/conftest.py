"""Shared fixtures: per-test deterministic RNG keyed on the test's node id,
so data is identical whether a test runs alone or in a full suite."""
import sys
import zlib
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture
def rng(request) -> np.random.Generator:
    seed = zlib.crc32(request.node.nodeid.encode())
    return np.random.default_rng(seed)
