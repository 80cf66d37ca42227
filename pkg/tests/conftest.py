import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from feddepth.data import attach_pseudo_depth  # noqa: E402
from feddepth.federation import TrainingEnv  # noqa: E402
from feddepth.models import ArchConfig, NoisyAnalyticDepth  # noqa: E402
from feddepth.synthetic import SceneSpec, generate_synthetic_scene  # noqa: E402

TINY_ARCH = ArchConfig(widths=(4, 8), pose_widths=(4, 8))


def tiny_samples(drives=(4, 3, 2, 2), seed=0, prefix="drive"):
    spec = SceneSpec(width=32, height=16, samples_per_drive=drives, texture_frequency=0.25, drive_prefix=prefix)
    return attach_pseudo_depth(generate_synthetic_scene(spec, seed), NoisyAnalyticDepth(0.1, 3.0, 0))


@pytest.fixture(scope="session")
def tiny_data():
    return tiny_samples(), tiny_samples((2,), seed=1, prefix="val")


@pytest.fixture
def tiny_env(tiny_data):
    train, val = tiny_data
    return TrainingEnv(train, val, TINY_ARCH)
