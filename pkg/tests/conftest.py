"""Shared fixtures: one forged kernel and every sample built from it."""

import pytest

from joker.forge import build_clean_image
from joker.samples import SAMPLES, apply_sample


@pytest.fixture(scope="session")
def clean_kernel():
    """The default forged kernel as (image, profile)."""
    return build_clean_image()


@pytest.fixture(scope="session")
def clean_image(clean_kernel):
    return clean_kernel[0]


@pytest.fixture(scope="session")
def profile(clean_kernel):
    return clean_kernel[1]


@pytest.fixture(scope="session")
def sample_images(clean_image, profile):
    """Every named sample applied to the clean image with default parameters."""
    return {name: apply_sample(clean_image, profile, name) for name in SAMPLES}
