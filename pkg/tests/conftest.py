import sys

import numpy as np
import pytest
from hypothesis import settings

from gaitfusion.data import GaitDataset, SynthSpec, synth_generate

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


@pytest.fixture(scope="session")
def toy_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    synth_generate(SynthSpec(num_ids=4, seqs_per_id=4, frames=12), root, seed=0)
    return root


@pytest.fixture(scope="session")
def toy_dataset(toy_dir):
    return GaitDataset.from_dir(toy_dir)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = module.summary_lines() if module else []
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
