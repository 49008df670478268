import numpy as np
import pytest
import torch

from polrep.diffnet import fd_check
from polrep.steer import (Surrogate, SteeringQuery, lagrangian, lagrangian_grad, primal_dual_run,
                          tangent_projector)

# min (h - 2)^2 s.t. h <= 1, written as target 2 on v0 = h and lower bound -1 on v1 = -h
KKT_SURROGATE = Surrogate(fns=[lambda h: h.sum(), lambda h: -h.sum()])


def kkt_query(**kw):
    base = dict(target=2.0, constraints=[(1, -1.0)], h0=np.array([0.0]), eta_h=0.05,
                eta_lambda=0.1, max_iters=3000, tol_target=0.0)
    base.update(kw)
    return SteeringQuery(**base)


def test_kkt_fixture():
    trace, h, _ = primal_dual_run(kkt_query(), KKT_SURROGATE, fixed_projector=np.eye(1))
    assert abs(h[0] - 1) <= 1e-3
    assert abs(trace.lam[-1][0] - 2) <= 1e-2
    assert trace.reason == "max_iters" and not trace.success


def test_unprojected_query_uses_identity():
    trace, h, _ = primal_dual_run(kkt_query(project=False), KKT_SURROGATE)
    assert abs(h[0] - 1) <= 1e-3
    assert max(trace.projector_error) == 0


def test_terminates_at_t0_when_feasible():
    q = SteeringQuery(target=0.5, h0=np.array([0.5]), tol_target=1e-9)
    trace, h, pred = primal_dual_run(q, KKT_SURROGATE, fixed_projector=np.eye(1))
    assert trace.success and len(trace.h) == 1 and h[0] == 0.5


def test_infeasible_query_reports_failure():
    # target 2 is unreachable while h <= -3
    q = kkt_query(constraints=[(1, 3.0)], max_iters=200, tol_target=1e-3)
    trace, _, _ = primal_dual_run(q, KKT_SURROGATE, fixed_projector=np.eye(1))
    assert not trace.success and trace.reason == "max_iters"
    assert len(trace.h) == 201


def quadratic_surrogate(A, b):
    At, bt = torch.as_tensor(A), torch.as_tensor(b)
    return Surrogate(fns=[lambda h: torch.tanh(h @ At[0] + bt[0]) + (h ** 2).sum() * 0.1,
                          lambda h: torch.sin(h @ At[1])])


def test_lagrangian_gradient_fd():
    rng = np.random.default_rng(0)
    for _ in range(5):
        sur = quadratic_surrogate(rng.normal(size=(2, 5)), rng.normal(size=2))
        q = SteeringQuery(target=0.3, constraints=[(1, -0.2)])
        h = torch.as_tensor(rng.normal(size=5)).requires_grad_(True)
        lam = [abs(rng.normal())]
        rep = fd_check(lambda: lagrangian(h, lam, sur, 0.3, [(1, -0.2)]), {"h": h})
        assert rep.ok, rep
        (expected,) = torch.autograd.grad(lagrangian(h, lam, sur, 0.3, [(1, -0.2)]), h)
        np.testing.assert_allclose(lagrangian_grad(h.detach().numpy(), lam, q, sur),
                                   expected.numpy(), rtol=1e-12, atol=1e-12)


def test_stationary_and_unconstrained_gradients():
    sur = Surrogate(fns=[lambda h: (h ** 2).sum(), lambda h: h.sum()])
    h = np.array([0.5, -0.5])
    q = SteeringQuery(target=0.5, constraints=[(1, 0.0)])
    assert np.all(lagrangian_grad(h, [0.0], q, sur) == 0)
    q2 = SteeringQuery(target=2.0, constraints=[(1, 0.0)])
    np.testing.assert_allclose(lagrangian_grad(h, [0.0], q2, sur), 2 * (0.5 - 2.0) * 2 * h)


def test_projector_axioms():
    rng = np.random.default_rng(1)
    bank = rng.normal(size=(100, 6))
    for p in (1, 3, 6):
        P = tangent_projector(bank[0], bank, n_neighbors=20, p=p)
        assert np.abs(P @ P - P).max() <= 1e-8
        assert np.abs(P - P.T).max() <= 1e-8
        assert np.trace(P) == pytest.approx(p)


def test_projector_on_a_line():
    t = np.linspace(-1, 1, 40)[:, None]
    direction = np.array([3.0, -4.0, 0.0]) / 5
    bank = t * direction + np.array([1.0, 2.0, 3.0])
    P = tangent_projector(bank[5], bank, n_neighbors=10, p=3)
    np.testing.assert_allclose(P, np.outer(direction, direction), atol=1e-10)


def test_projector_full_rank_is_identity():
    bank = np.random.default_rng(2).normal(size=(30, 4))
    P = tangent_projector(bank[0], bank, n_neighbors=30, p=4)
    np.testing.assert_allclose(P, np.eye(4), atol=1e-10)


def test_projector_argument_checks():
    with pytest.raises(ValueError):
        tangent_projector(np.zeros(2), np.zeros((5, 2)), n_neighbors=6, p=1)
    with pytest.raises(ValueError):
        SteeringQuery(target=1.0, pca_rank=40, n_neighbors=32)
    with pytest.raises(ValueError):
        SteeringQuery(target=1.0, constraints=[(0, 1.0)])


def test_projected_runs_keep_axioms():
    rng = np.random.default_rng(3)
    t = rng.uniform(-1, 1, size=(200, 2))
    bank = np.concatenate([t, np.sin(t)], axis=1)
    sur = Surrogate(fns=[lambda h: h[0] + h[1], lambda h: h[2]])
    for i in range(10):
        q = SteeringQuery(target=float(rng.uniform(-1, 1)), constraints=[(1, -0.5)], h0=bank[i],
                          eta_h=0.2, n_neighbors=16, pca_rank=2, max_iters=50)
        trace, _, _ = primal_dual_run(q, sur, bank)
        assert max(trace.projector_error, default=0.0) <= 1e-8
        assert all(l >= 0 for lam in trace.lam for l in lam)


def test_trace_csv(tmp_path):
    trace, _, _ = primal_dual_run(kkt_query(max_iters=5), KKT_SURROGATE, fixed_projector=np.eye(1))
    trace.write_csv(tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "t,h_norm,pred_0,pred_1,lambda_0,feasible"
    assert len(lines) == 7
