from types import SimpleNamespace

import numpy as np
import pytest

from flowattack.attack import AttackConfig, run_attack
from flowattack.blackbox import ClassifierTrainConfig, train_classifier
from flowattack.datasets import make_dataset
from flowattack.flowmodel import FlowConfig, FlowTrainConfig, init_flow, train_mle


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="run desk-scale experiments marked slow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(scope="session")
def moons():
    return make_dataset("two-moons", 400, np.random.default_rng(0))


@pytest.fixture(scope="session")
def moons_classifier(moons):
    cfg = ClassifierTrainConfig(hidden=(32, 32), epochs=100, batch_size=64, lr=1e-2, seed=0)
    return train_classifier(moons.data, moons.labels, cfg, moons.bounds)


@pytest.fixture
def identity_flow():
    """Dense 2-D flow whose couplings are the identity (permutations only)."""
    return init_flow(FlowConfig(input_shape=(2,), hidden=8, blocks=2, seed=0))


@pytest.fixture
def random_flow():
    def build(dim=4, blocks=2, std=0.3, seed=1):
        return init_flow(FlowConfig(input_shape=(dim,), hidden=16, blocks=blocks,
                                    final_init_std=std, seed=seed))
    return build


@pytest.fixture(scope="session")
def moons_flow(moons):
    """Dense flow trained on the moons fixture; only the slow tier asks for it."""
    flow = init_flow(FlowConfig(input_shape=(2,), hidden=64, blocks=4))
    train_mle(flow, moons.data, FlowTrainConfig(epochs=100, lr=1e-3, lr_final=1e-5))
    return flow


@pytest.fixture(scope="session")
def digits():
    """8x8 digits with a classifier and a flow; ``x`` and ``y`` hold every digit the classifier gets right."""
    rng = np.random.default_rng(0)
    train = make_dataset("digits8", 1500, rng)
    held = make_dataset("digits8", 1797, rng)
    clf = train_classifier(train.data, train.labels,
                           ClassifierTrainConfig(hidden=(64, 64), epochs=60, seed=0), train.bounds)
    flow = init_flow(FlowConfig(kind="image", input_shape=(8, 8), hidden=64,
                                highres_blocks=2, lowres_blocks=2, fc_blocks=2))
    train_mle(flow, train.data, FlowTrainConfig(epochs=60, lr=1e-3, lr_final=1e-5))
    ok = clf.predict(held.data) == held.labels
    return SimpleNamespace(train=train, x=held.data[ok], y=held.labels[ok], classifier=clf, flow=flow)


@pytest.fixture(scope="session")
def digits_runs(digits):
    """AdvFlow and NAttack results at 8/255 on the first 800 correctly classified digits."""
    runs = {}
    for variant in ("advflow", "nattack"):
        runs[variant] = [
            run_attack(AttackConfig(variant=variant, epsilon=8 / 255, seed=i), digits.classifier.oracle(),
                       x.astype(np.float64), int(y), flow=digits.flow)
            for i, (x, y) in enumerate(zip(digits.x[:800], digits.y[:800]))
        ]
    return runs
