import pytest

from ifa import refnet as rn


@pytest.fixture(scope="session")
def small_dataset():
    return rn.gen_dataset(5, 80)


@pytest.fixture(scope="session")
def small_model(small_dataset):
    return rn.train(small_dataset, "gap_linear", epochs=3, seed=0)


@pytest.fixture(scope="session")
def small_archive(small_model, small_dataset, tmp_path_factory):
    path = tmp_path_factory.mktemp("arch") / "small"
    rn.dump_archive(small_model, small_dataset, path, grads="all")
    return path


@pytest.fixture(scope="session")
def flat_model(small_dataset):
    return rn.train(small_dataset, "flatten_linear", epochs=3, seed=0)


@pytest.fixture(scope="session")
def flat_archive(flat_model, small_dataset, tmp_path_factory):
    path = tmp_path_factory.mktemp("arch") / "flat"
    rn.dump_archive(flat_model, small_dataset, path, grads="all")
    return path
