import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_phantom(tmp_path_factory):
    from spectstage.data_io import PhantomSpec, generate_phantom_dataset

    out = tmp_path_factory.mktemp("phantom_small")
    spec = PhantomSpec(
        num_classes=3,
        counts_per_class=[6, 6, 6],
        slice_count_range=(8, 10),
        image_size=(76, 76),
        noise_level=0.05,
        seed=3,
        dataset_id="tiny",
    )
    return generate_phantom_dataset(spec, out)


@pytest.fixture(scope="session")
def toy_dataset(tmp_path_factory):
    """3 classes x 10 patients, already preprocessed, for fast training tests."""
    from spectstage.data_io import PhantomSpec, generate_phantom_dataset
    from spectstage.training import PreparedDataset

    out = tmp_path_factory.mktemp("phantom_toy")
    spec = PhantomSpec(3, [10, 10, 10], (6, 8), (72, 72), 0.05, seed=5, dataset_id="toy")
    return PreparedDataset(generate_phantom_dataset(spec, out))


@pytest.fixture(scope="session")
def toy_dataset_b(tmp_path_factory):
    from spectstage.data_io import PhantomSpec, generate_phantom_dataset
    from spectstage.training import PreparedDataset

    out = tmp_path_factory.mktemp("phantom_toy_b")
    spec = PhantomSpec(2, [12, 10], (6, 8), (72, 72), 0.05, seed=6, dataset_id="toyb")
    return PreparedDataset(generate_phantom_dataset(spec, out))
