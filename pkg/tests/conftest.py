"""Test configuration and shared fixtures."""
import numpy as np
import pytest

from myoseg.config import RunConfig
from myoseg.schemas import PhantomSpec
from myoseg.services.phantom import generate_dataset


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long end-to-end runs (deselect with -m 'not slow')")


@pytest.fixture
def rng():
    """Seeded generator for property loops."""
    return np.random.default_rng(20240607)


@pytest.fixture
def small_spec():
    """A 128x128 phantom with four compartments."""
    return PhantomSpec(
        seed=3,
        width=128,
        height=128,
        muscles=4,
        slices=2,
        body_center=(64.0, 64.0),
        body_axes=(56.0, 48.0),
        fat_thickness=6.0,
        bone_center=(56.0, 68.0),
        bone_radius=10.0,
        marrow_radius=5.0,
        volume_variability=0.5,
    )


@pytest.fixture
def fast_config():
    """Pipeline configuration with few boosting rounds."""
    return RunConfig(seed=0, boosting_rounds=15)


@pytest.fixture
def phantom_dataset(tmp_path, small_spec):
    """Three small phantom volumes of two slices each, written to disk."""
    return generate_dataset(5, volumes=3, slices_per_volume=2, out_dir=tmp_path / "data", template=small_spec)
