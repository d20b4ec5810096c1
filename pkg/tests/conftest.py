"""Fixtures for skinseg tests."""

from __future__ import annotations

import numpy as np
import pytest

from skinseg.bayes import ColorHistogramPair, fit_histograms
from skinseg.ensemble import ModelRegistry
from skinseg.imgio import BinaryMask, Image, SamplePair, generate_synthetic_dataset
from skinseg.skinny import NetworkConfig, WeightStore, build


@pytest.fixture
def rng() -> np.random.Generator:
    """Create a seeded random generator."""
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def synthetic_samples() -> list[SamplePair]:
    """Create a small synthetic dataset shared by the whole session.

    Samples are frozen, so sharing them between tests is safe.
    """
    return generate_synthetic_dataset(6, 32, seed=5)


@pytest.fixture
def rgb_image(rng) -> Image:
    """Create a random 16x16 RGB image."""
    return Image(rng.uniform(0.0, 1.0, size=(16, 16, 3)))


@pytest.fixture
def checkerboard() -> BinaryMask:
    """Create a 16x16 checkerboard mask."""
    rows, cols = np.indices((16, 16))
    return BinaryMask((rows + cols) % 2 == 0)


@pytest.fixture
def histograms(synthetic_samples) -> ColorHistogramPair:
    """Fit coarse color histograms on the synthetic dataset."""
    return fit_histograms(synthetic_samples, bins=8)


@pytest.fixture
def tiny_config() -> NetworkConfig:
    """Create a two-level RGB network small enough for unit tests."""
    return NetworkConfig(in_channels=3, levels=2, base_channels=2, seed=3)


@pytest.fixture
def tiny_weights(tiny_config) -> WeightStore:
    """Create freshly initialised weights for the tiny network."""
    return build(tiny_config)


@pytest.fixture
def tiny_gray_weights() -> WeightStore:
    """Create freshly initialised weights for a tiny grayscale network."""
    return build(NetworkConfig(in_channels=1, levels=2, base_channels=2, seed=4))


@pytest.fixture
def registry(tiny_weights, tiny_gray_weights, histograms, tmp_path) -> ModelRegistry:
    """Create a registry with in-memory base models.

    Following the desk pipeline's naming: rgb and skin/nonskin are RGB
    networks, gs is a grayscale network and bc holds the histograms.
    """
    models = ModelRegistry(tmp_path)
    models.register("rgb", tiny_weights)
    models.register("gs", tiny_gray_weights)
    models.register("skin", build(NetworkConfig(in_channels=3, levels=2, base_channels=2, seed=5)))
    models.register(
        "nonskin", build(NetworkConfig(in_channels=3, levels=2, base_channels=2, seed=6))
    )
    models.register("bc", histograms)
    return models
