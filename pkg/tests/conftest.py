import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from nucseg.synth import SynthConfig, write_synth_dataset

settings.register_profile(
    "default",
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")

# Shared synthetic corpora. Nuclei of radius 4..7 with a 3 px spacing gap
# survive a width-1 boundary strip, so these datasets support exact
# ternary round trips as well as training runs.
TRAIN_SYNTH = SynthConfig(seed=7, radius_range=(4, 7), min_spacing=3)
TEST_SYNTH = SynthConfig(seed=1007, radius_range=(4, 7), min_spacing=3)


@pytest.fixture(scope="session")
def train_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth_train")
    write_synth_dataset(TRAIN_SYNTH, 25, root)
    return root


@pytest.fixture(scope="session")
def test_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth_test")
    write_synth_dataset(TEST_SYNTH, 10, root)
    return root


@pytest.fixture()
def rng():
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(424242)))


def random_rgb(rng: np.random.Generator, size: int) -> np.ndarray:
    return rng.integers(0, 256, size=(size, size, 3), dtype=np.uint8)
