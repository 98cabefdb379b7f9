import pytest
import torch

from foodfuse.forge import ForgeConfig, build_dataset, load_split

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def toy_data(tmp_path_factory):
    """A 10-scene forge (8/1/1 split) shared across tests."""
    root = tmp_path_factory.mktemp("toy")
    build_dataset(ForgeConfig(triplet_count=10, seed=3), root)
    return root


@pytest.fixture(scope="session")
def toy_splits(toy_data):
    return {s: load_split(toy_data, s) for s in ("train", "val", "test")}


_ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def acceptance_log(pytestconfig):
    """Collects one line per acceptance criterion for the terminal summary."""
    return pytestconfig.stash.setdefault(_ACCEPTANCE_KEY, [])


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
