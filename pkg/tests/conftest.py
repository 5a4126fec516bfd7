import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from blursplat.lie import Pose, so3_exp  # noqa: E402
from blursplat.rasterizer import CameraIntrinsics  # noqa: E402
from blursplat.scene import Scene  # noqa: E402


def make_scene(seed: int, n: int = 8, spread: float = 0.4, scale=(0.1, 0.3)) -> Scene:
    rng = np.random.default_rng(seed)
    return Scene(rng.normal(size=(n, 3)) * spread, rng.normal(size=(n, 4)),
                 np.log(rng.uniform(*scale, size=(n, 3))), rng.normal(size=n), rng.uniform(size=(n, 3)), 1.0)


def make_camera(seed: int = 0, size: int = 32) -> tuple[Pose, CameraIntrinsics]:
    rng = np.random.default_rng(seed + 1000)
    T = Pose(so3_exp(rng.normal(size=3) * 0.1), np.r_[rng.normal(size=2) * 0.1, 3.0])
    K = CameraIntrinsics(1.25 * size, 1.25 * size, size / 2, size / 2, size, size)
    return T, K


@pytest.fixture
def small_scene():
    return make_scene(1)


@pytest.fixture
def camera():
    return make_camera(0)


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE: dict[int, str] = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
