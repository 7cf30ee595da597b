import numpy as np
import pytest

from boxseg.dataset import SynthConfig, generate_synthetic


@pytest.fixture(scope="session")
def small_corpus():
    """A couple dozen low-noise samples shared by read-only tests."""
    cfg = SynthConfig(count=24, seed=123, noise=0.05, fg_intensity=(0.7, 0.95), bg_intensity=(0.05, 0.2))
    return cfg, generate_synthetic(cfg)


@pytest.fixture(scope="session")
def default_corpus():
    """Default-config samples (the noise level used for training runs)."""
    cfg = SynthConfig(count=16, seed=77)
    return cfg, generate_synthetic(cfg)
