"""Properties of the default-configuration model; shares the session training."""
import numpy as np
import pytest
import torch

from polrep.env import EnvConfig
from polrep.evalkit import SteeringQuery, encode_means, imitation_eval, run_benchmark
from polrep.steer import Surrogate, _predict
from polrep.trainer import Bundle, TrainConfig, init_model

pytestmark = pytest.mark.slow


def test_projectors_end_semi_orthonormal(default_bundle):
    model = default_bundle[0].model
    for k in range(model.cfg.n_tasks):
        U = model.store[f"proj{k}.U"].detach().numpy()
        assert np.linalg.norm(U @ U.T - np.eye(U.shape[0])) <= 5e-2


def test_decoder_is_representation_conditioned(default_bundle, default_dataset):
    bundle = default_bundle[0]
    idx = default_dataset.test_idx
    h = torch.as_tensor(encode_means(bundle, default_dataset, idx))
    s = np.zeros((len(idx), 2))
    with torch.no_grad():
        mu, _ = bundle.model.decode_action_dist(s, h)
    mu = mu.numpy()[:, 0]
    assert np.abs(mu[:, None] - mu[None, :]).max() > 0.1


def test_untrained_decoder_is_worse(default_bundle, default_dataset):
    bundle = default_bundle[0]
    untrained = Bundle(init_model(TrainConfig()), bundle.config, bundle.stats, bundle.bank)
    idx = default_dataset.test_idx[::4]
    trained = np.median(imitation_eval(bundle, default_dataset, idx, EnvConfig()))
    fresh = np.median(imitation_eval(untrained, default_dataset, idx, EnvConfig()))
    assert fresh > trained


def test_identity_queries_succeed(default_bundle):
    bundle = default_bundle[0]
    sur = Surrogate(bundle.model)
    queries = []
    for i in range(0, len(bundle.bank), 64):
        h0 = bundle.bank.h[i].copy()
        target = float(bundle.stats.denorm_return(_predict(sur, h0))[0])
        queries.append(SteeringQuery(target, h0=h0))
    assert run_benchmark(bundle, queries, EnvConfig(), n_eval=2).success_rate == 100.0
