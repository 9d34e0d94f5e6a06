import numpy as np
import pytest

from excitest import engine, store


@pytest.fixture(scope="session")
def blobs_data():
    return store.synthetic_blobs(n=300, classes=3, dim=8, seed=0)


@pytest.fixture(scope="session")
def blobs_model(blobs_data):
    regime = store.DefectSpec(kind="well_trained", epoch_count=6, batch_size=32)
    arch = store.mlp_arch((8,), hidden=8, classes=3)
    return store.train_model(blobs_data, arch, regime, seed=0)


@pytest.fixture(scope="session")
def digits_data():
    return store.digits_dataset()


@pytest.fixture(scope="session")
def digits_model(digits_data):
    regime = store.DefectSpec(kind="well_trained", epoch_count=8, batch_size=32)
    arch = store.mlp_arch((1, 8, 8), hidden=32, classes=10)
    return store.train_model(digits_data, arch, regime, seed=0)


@pytest.fixture(scope="session")
def digits_conv_model(digits_data):
    regime = store.DefectSpec(kind="well_trained", epoch_count=4, batch_size=32)
    arch = store.convnet_arch((1, 8, 8), classes=10)
    return store.train_model(digits_data, arch, regime, seed=0)


def make_linear_model(weight: np.ndarray, bias: np.ndarray) -> engine.NetworkModel:
    """softmax(x @ W + b) with the given parameters; input shape (in_dim,)."""
    in_dim, classes = weight.shape
    layers = [engine.dense(in_dim, classes), engine.softmax()]
    weights = [
        {"W": weight.astype(np.float32), "b": bias.astype(np.float32)},
        {},
    ]
    return engine.NetworkModel((in_dim,), layers, weights, classes)


def make_mlp_model(w1, b1, w2, b2) -> engine.NetworkModel:
    """softmax(relu(x @ W1 + b1) @ W2 + b2) with the given parameters."""
    in_dim, hidden = w1.shape
    classes = w2.shape[1]
    layers = [
        engine.dense(in_dim, hidden),
        engine.relu(),
        engine.dense(hidden, classes),
        engine.softmax(),
    ]
    weights = [
        {"W": np.asarray(w1, np.float32), "b": np.asarray(b1, np.float32)},
        {},
        {"W": np.asarray(w2, np.float32), "b": np.asarray(b2, np.float32)},
        {},
    ]
    return engine.NetworkModel((in_dim,), layers, weights, classes)
