import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from subspace_triplet.synthetic import SyntheticSpec, generate_synthetic  # noqa: E402
from subspace_triplet.training import TrainConfig, train_classifier  # noqa: E402

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_data():
    spec = SyntheticSpec(num_identities=60, samples_per_identity=8, heldout_per_identity=3, d_in=12,
                         num_superclusters=4, sigma_within=0.03, sigma_between=0.15, unseen_identities=20, seed=3)
    return generate_synthetic(spec)


@pytest.fixture(scope="session")
def small_config():
    # tiny datasets need a gentler classifier optimizer than the defaults
    return TrainConfig(hidden_dims=(16,), embedding_dim=8, cls_epochs_per_rate=3, cls_lr=0.03, cls_batch_size=16,
                       logit_scale=8.0, triplet_epochs_per_rate=1, triplet_batch_size=8)


@pytest.fixture(scope="session")
def small_classifier(small_data, small_config):
    return train_classifier(small_data.train, small_config, seed=0)
