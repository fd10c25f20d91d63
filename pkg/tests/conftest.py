import numpy as np
import pytest

from backdoor_mesa.testbed import AttackSpec, generate_dataset, inject_backdoor, train_victim, trigger_catalog


@pytest.fixture(scope="session")
def small_data():
    return generate_dataset(0, n_train=1000, n_test=500)


@pytest.fixture(scope="session")
def small_victim(small_data):
    train, test = small_data
    model, rep = train_victim(train, test, epochs=6, rng=np.random.default_rng(0))
    return model, rep


@pytest.fixture(scope="session")
def small_backdoor(small_data, small_victim):
    train, test = small_data
    entry = trigger_catalog(train)[4]  # checkerboard
    model, rep = inject_backdoor(small_victim[0], train, AttackSpec(entry.trigger, 0, 0.1), epochs=15, lr=0.01,
                                 rng=np.random.default_rng(1), eval_set=test)
    return model, rep, entry


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
