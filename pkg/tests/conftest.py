import numpy as np
import pytest

from eyeexpr import synthgen
from eyeexpr.labels import AU10, EMO5


@pytest.fixture(scope="session")
def emo5_dataset(tmp_path_factory):
    """Small EMO5 dataset on disk: 3 participants x 2 sessions x 5 classes x 8 frames."""
    root = tmp_path_factory.mktemp("emo5_data")
    cfg = synthgen.GenConfig(
        num_participants=3,
        sessions_per_participant=2,
        frames_per_expression=8,
        frame_rate=1.0,
        eye_size=(48, 48),
        label_set=EMO5,
        global_seed=101,
    )
    samples = synthgen.generate_dataset(cfg, root)
    return cfg, samples, root


@pytest.fixture(scope="session")
def au10_dataset(tmp_path_factory):
    """Small AU10 dataset: 2 participants x 1 session x 10 classes x 4 frames."""
    root = tmp_path_factory.mktemp("au10_data")
    cfg = synthgen.GenConfig(
        num_participants=2,
        sessions_per_participant=1,
        frames_per_expression=4,
        eye_size=(48, 48),
        label_set=AU10,
        global_seed=59,
        skip_fraction=0.0,
    )
    samples = synthgen.generate_dataset(cfg, root)
    return cfg, samples, root


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
