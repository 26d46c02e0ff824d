"""Shared fixtures: small phantom datasets sized for fast unit tests."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from bpseg.synthetic import (
    PhantomConfig,
    RaterSimConfig,
    attach_simulated_raters,
    generate_phantom_dataset,
)

settings.register_profile(
    "bpseg",
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("bpseg")

FIXTURE_DIR = Path(__file__).parent / "fixtures"


def small_phantom_config(count: int = 12, seed: int = 314) -> PhantomConfig:
    """Phantoms at 64x64 with trunks large enough to survive resizing."""
    return PhantomConfig(
        count=count,
        frame_width=64,
        frame_height=64,
        trunks_min=1,
        trunks_max=2,
        trunk_radius_min=6.0,
        trunk_radius_max=12.0,
        speckle_scale=0.4,
        background_level=40.0,
        seed=seed,
    )


ESCALATING_RATERS = {
    "a": RaterSimConfig(dilate_or_erode=-1, boundary_jitter_sd=0.0, drop_probability=0.0, seed=5),
    "b": RaterSimConfig(dilate_or_erode=-2, boundary_jitter_sd=1.0, drop_probability=0.0, seed=6),
    "c": RaterSimConfig(dilate_or_erode=-3, boundary_jitter_sd=2.0, drop_probability=0.15, seed=7),
}


@pytest.fixture(scope="session")
def phantoms_small():
    return generate_phantom_dataset(small_phantom_config())


@pytest.fixture(scope="session")
def phantoms_with_raters():
    samples = generate_phantom_dataset(small_phantom_config(count=10, seed=99))
    return attach_simulated_raters(samples, ESCALATING_RATERS, second_pass_factor=0.5)


@pytest.fixture
def rng():
    return np.random.default_rng(2024)
