import numpy as np
import pytest
import torch

from polrep.dataio import TwoViewBatch
from polrep.model import ModelConfig, PolicyModel

torch.set_num_threads(1)


def random_batch(rng, n_pairs=3, L=5, K=2):
    """Two-view-shaped batch of random normalized data, for gradient checks."""
    n = 2 * n_pairs
    returns = np.repeat(rng.normal(size=(n_pairs, K)), 2, axis=0)
    return TwoViewBatch(rng.normal(size=(n, L, 3)), returns, rng.normal(size=(n, 2)),
                        rng.normal(size=(n, 1)), np.repeat(np.arange(n_pairs), 2))


@pytest.fixture
def tiny_model():
    return PolicyModel(ModelConfig(hidden=6, h_dim=4, z_dim=2), seed=3)


@pytest.fixture
def small_model():
    return PolicyModel(ModelConfig(), seed=1)


@pytest.fixture(scope="session")
def tiny_dataset():
    from polrep.dataio import generate_dataset
    from polrep.env import EnvConfig
    return generate_dataset(EnvConfig(horizon=16, seed=4), n_knobs=10, traj_per_knob=8)


def tiny_train_config(**kw):
    from polrep.trainer import TrainConfig
    base = dict(context_length=8, rep_epochs=2, rep_batch=16, reg_epochs=2, reg_batch=32,
                hidden=8, h_dim=6, z_dim=2, seed=5)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def tiny_bundle(tiny_dataset):
    from polrep.trainer import train
    return train(tiny_dataset, tiny_train_config(rep_epochs=5, reg_epochs=5))[0]


# --- acceptance-suite support ------------------------------------------------------

ACCEPTANCE_LINES = []


@pytest.fixture
def report(capsys):
    """Record and immediately print one PASS/FAIL line for an acceptance criterion."""
    def emit(number, passed, detail):
        line = f"ACCEPTANCE {number:>2} {'PASS' if passed else 'FAIL'}: {detail}"
        ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print("\n" + line)
        return passed
    return emit


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def default_dataset():
    from polrep.config import RunConfig
    from polrep.dataio import generate_dataset
    cfg = RunConfig()
    return generate_dataset(cfg.env, cfg.data.n_knobs, cfg.data.traj_per_knob, cfg.data.heldout_every)


def _timed_train(dataset, **overrides):
    import dataclasses
    import time
    from polrep.trainer import TrainConfig, train
    start = time.process_time()
    bundle, _, _ = train(dataset, dataclasses.replace(TrainConfig(), **overrides))
    return bundle, time.process_time() - start


@pytest.fixture(scope="session")
def default_bundle(default_dataset):
    """Default configuration trained on the default dataset, with its CPU time."""
    return _timed_train(default_dataset)


@pytest.fixture(scope="session")
def vae_bundle(default_dataset):
    return _timed_train(default_dataset, vae_only=True)[0]


@pytest.fixture(scope="session")
def zeta0_bundle(default_dataset):
    return _timed_train(default_dataset, unconstrained_projector=True)[0]
