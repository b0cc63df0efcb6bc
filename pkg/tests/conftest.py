import pytest

from hoechstgan import SynthParams, generate_dataset
from hoechstgan.train import TrainConfig

# Small-geometry parameters for fast tests: 32px patches, few cells.
TINY_GEOMETRY = dict(patch_side=32, nucleus_radius=3.0, radius_jitter=0.5,
                     clearance=4.0, n_cells=(1, 3))


def tiny_params(seed: int = 7, **overrides) -> SynthParams:
    kwargs = {**TINY_GEOMETRY, **overrides}
    return SynthParams(seed=seed, **kwargs)


@pytest.fixture(scope="session")
def tiny_dataset():
    return generate_dataset(tiny_params(), 30, n_slides=5, train_slides=4)


@pytest.fixture
def tiny_config():
    return TrainConfig(variant="MCD", depth=5,
                       encoder_filters=(8, 16, 16, 16, 16), batch_size=8,
                       total_epochs=2, seed=3, val_batch_size=8)
