import os

import numpy as np
import pytest
from hypothesis import settings

from mixsep import synthworld as sw

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

# lines printed by the acceptance suite, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


SMALL_WORLD = dict(n_sound=80, n_speech=80, n_extended=6)


@pytest.fixture(scope="session")
def small_world():
    return sw.WorldConfig(**SMALL_WORLD)


@pytest.fixture(scope="session")
def small_data_dir(tmp_path_factory, small_world):
    out = tmp_path_factory.mktemp("world")
    sw.make_datasets(small_world, out)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def default_world():
    return sw.WorldConfig()


@pytest.fixture(scope="session")
def default_data_dir(tmp_path_factory, default_world):
    out = tmp_path_factory.mktemp("default_world")
    sw.make_datasets(default_world, out)
    return out


@pytest.fixture(scope="session")
def default_splits(default_data_dir):
    return {name: sw.load_split(default_data_dir, name) for name in sw.SPLITS}
