import copy
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

REPO = Path(__file__).resolve().parents[1]

SMALL = {
    "name": "small",
    "data": {
        "kind": "synthetic", "height": 32, "width": 64, "augment": True,
        "synthetic": {"num_train": 16, "num_val": 4, "num_test": 4, "seed": 5,
                      "scene": {"height": 32, "width": 64, "focal_px": 50.0}},
    },
    "generator": {"backbone": "TINY", "normalization": "BATCH", "num_output_scales": 4, "width_multiplier": 0.125},
    "gan": {"kind": "NONE", "disc_width": 0.125},
    "train": {"epochs": 2, "batch_size": 4, "lr": 1e-3, "seed": 0},
    "eval": {"crop": "none"},
}


@pytest.fixture
def small_raw():
    """A seconds-scale synthetic experiment as a raw config dict."""
    return copy.deepcopy(SMALL)


@pytest.fixture
def repo():
    return REPO


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.RESULTS, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
