import numpy as np
import pytest

from rnndsl.randgen import GenConfig, generate_batch


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def random_architectures(n, seed=0, **cfg_overrides):
    """Admissible candidates drawn with the default generator settings."""
    cfg = GenConfig(seed=seed, **cfg_overrides)
    return generate_batch(cfg, n, rng=np.random.default_rng(seed))
