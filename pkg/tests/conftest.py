import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from mcmlab.data import DataParams  # noqa: E402
from mcmlab.diffusion import Denoiser, seeded  # noqa: E402
from mcmlab.schedule import build_linear_schedule  # noqa: E402


@pytest.fixture(scope="session")
def schedule():
    return build_linear_schedule(1000, 1e-4, 2e-2)


@pytest.fixture(scope="session")
def small_params():
    """Geometry small enough for float64 finite-difference checks."""
    return DataParams(frames=4, height=8, width=8, num_classes=4, watermark_region=(6, 8, 5, 8), blob_sigma=1.0,
                      margin=1.0, speed=0.5)


def make_denoiser(schedule, params=None, parametrization="v", seed=0, hidden=8, dtype=torch.float32):
    params = params or DataParams()
    with seeded(seed):
        net = Denoiser(params.frames, params.channels, params.height, params.width, hidden=hidden, time_dim=8,
                       num_classes=params.num_classes, num_train_steps=schedule.T, schedule=schedule,
                       parametrization=parametrization)
    return net.to(dtype)


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
