import json
import sys
from pathlib import Path

import pytest

HERE = Path(__file__).parent
sys.path.insert(0, str(HERE))

from cribwatch.frames import Region, Resolution, Timeline  # noqa: E402


@pytest.fixture(scope="session")
def derived():
    return json.loads((HERE / "derived_values.json").read_text())


@pytest.fixture
def small_timeline():
    def build(*segments, fps=25.0, seed=0, size=(160, 120)):
        tl = Timeline(fps=fps, resolution=Resolution(*size), noise_seed=seed)
        for label, ms, region in segments:
            tl.add(label, ms, Region(*region))
        return tl.build("test")
    return build
