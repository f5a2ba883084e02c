import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def small_dataset():
    from freqid.synthdata import build_dataset

    return build_dataset(n_identities=16, videos_per_identity=8)


@pytest.fixture(scope="session")
def quick_bundle(small_dataset):
    """Towers pretrained briefly; enough for the separation checks in unit tests."""
    from freqid.pretrain import TowerConfig, pretrain_towers

    bundle, _ = pretrain_towers(small_dataset, TowerConfig(steps=200))
    return bundle


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
