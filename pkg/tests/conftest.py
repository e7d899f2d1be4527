import pytest
import torch

from backdoor_excl.datasets import make_synthetic_dataset
from backdoor_excl.model import ModelConfig
from backdoor_excl.poisoning import PoisonConfig, build_poisoned_dataset
from backdoor_excl.training import TrainConfig, train_backdoored_model
from backdoor_excl.triggers import TriggerSpec

SHAPE = (3, 16, 16)

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def desk_data():
    train = make_synthetic_dataset(4, 500, SHAPE, seed=0)
    test = make_synthetic_dataset(4, 250, SHAPE, seed=0, split="test")
    return train, test


@pytest.fixture(scope="session")
def desk_spec():
    return TriggerSpec.patch(SHAPE, 0, size=6, seed=3, style="binary")


@pytest.fixture(scope="session")
def benign_model(desk_data):
    train, test = desk_data
    model, report = train_backdoored_model(train, ModelConfig(), TrainConfig(epochs=5), test_set=test)
    return model, report


@pytest.fixture(scope="session")
def vanilla_model(desk_data, desk_spec):
    """Quickly trained dirty-only backdoor, for unit tests needing a live trigger."""
    train, test = desk_data
    poisoned = build_poisoned_dataset(train, desk_spec, PoisonConfig(poison_rate=0.02, dirty_cover_ratio=(100, 0),
                                                                      stratified=True, seed=0))
    model, report = train_backdoored_model(poisoned, ModelConfig(), TrainConfig(epochs=20), test_set=test)
    return model, report


_ACCEPTANCE = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = {}


@pytest.fixture(scope="session")
def acceptance_log(request):
    """``log(number, ok, detail)`` records one criterion verdict for the terminal summary."""
    store = request.config.stash[_ACCEPTANCE]

    def log(number, ok, detail):
        line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}: {detail}"
        store[number] = line
        print(line)
        return line

    return log


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = config.stash.get(_ACCEPTANCE, {})
    if store:
        terminalreporter.section("acceptance criteria")
        for n in sorted(store):
            terminalreporter.write_line(store[n])
