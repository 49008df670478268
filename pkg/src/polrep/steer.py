"""Latent-space behavior synthesis by tangent-projected primal-dual iterations."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .dataio import NormStats
from .diffnet import DTYPE
from .env import EnvConfig, K_OBJECTIVES, step_batch
from .model import PolicyModel


@dataclass
class SteeringQuery:
    """Target for objective 0 and lower bounds on other objectives, in raw return units."""

    target: float
    constraints: list = field(default_factory=list)  # [(task, lower_bound)]
    h0: np.ndarray | None = None
    eta_h: float = 0.05
    eta_lambda: float = 0.1
    max_iters: int = 500
    n_neighbors: int = 32
    pca_rank: int = 8
    tol_target: float = 0.05
    tol_constraint: float = 0.0
    project: bool = True

    def __post_init__(self):
        if any(k == 0 for k, _ in self.constraints):
            raise ValueError("constraints must refer to tasks other than the target task 0")
        if self.pca_rank > self.n_neighbors:
            raise ValueError("pca_rank must not exceed n_neighbors")
        if self.eta_h <= 0 or self.eta_lambda <= 0:
            raise ValueError("step sizes must be positive")


@dataclass
class SteeringTrace:
    h: list = field(default_factory=list)
    lam: list = field(default_factory=list)
    predicted: list = field(default_factory=list)  # normalized, per task
    feasible: list = field(default_factory=list)
    projector_error: list = field(default_factory=list)
    reason: str = ""
    success: bool = False

    def write_csv(self, path, stats: NormStats | None = None):
        K = len(self.predicted[0]) if self.predicted else 0
        n_lam = len(self.lam[0]) if self.lam else 0
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "h_norm"] + [f"pred_{k}" for k in range(K)]
                       + [f"lambda_{c}" for c in range(n_lam)] + ["feasible"])
            for t, (h, lam, pred, feas) in enumerate(zip(self.h, self.lam, self.predicted, self.feasible)):
                pred = stats.denorm_return(pred) if stats is not None else pred
                w.writerow([t, repr(float(np.linalg.norm(h)))] + [repr(float(p)) for p in pred]
                           + [repr(float(v)) for v in lam] + [int(feas)])


@dataclass
class SteeringResult:
    h: np.ndarray
    predicted: np.ndarray  # raw units
    success: bool
    reason: str
    iterations: int
    realized: np.ndarray | None = None
    target_error: float | None = None  # |realized_0 - target| / |target|
    constraint_violation: float | None = None  # max_k max(0, v_c - realized_k) / |v_c|

    def to_record(self, query: SteeringQuery):
        rec = {
            "target": query.target,
            "constraints": [[int(k), float(v)] for k, v in query.constraints],
            "success": bool(self.success),
            "reason": self.reason,
            "iterations": int(self.iterations),
            "predicted": [float(v) for v in self.predicted],
            "realized": None if self.realized is None else [float(v) for v in self.realized],
            "target_error": self.target_error,
            "constraint_violation": self.constraint_violation,
            "h": [float(v) for v in self.h],
        }
        return rec

    def write_json(self, path, query: SteeringQuery):
        with open(path, "w") as fh:
            json.dump(self.to_record(query), fh, indent=2, sort_keys=True)
            fh.write("\n")


def tangent_projector(h, bank_h, n_neighbors=32, p=8, rel_tol=1e-10):
    """``V V^T`` from the top-``p`` principal directions of the nearest bank embeddings.

    Directions whose singular value is below ``rel_tol`` times the largest are
    dropped, so a degenerate neighborhood yields a lower-rank projector.
    """
    bank_h = np.asarray(bank_h, dtype=np.float64)
    if not len(bank_h) >= n_neighbors >= p >= 1:
        raise ValueError("need bank size >= n_neighbors >= p >= 1")
    d2 = ((bank_h - h) ** 2).sum(axis=1)
    nearest = np.argsort(d2, kind="stable")[:n_neighbors]
    E = bank_h[nearest]
    E = E - E.mean(axis=0)
    _, sv, vt = np.linalg.svd(E, full_matrices=False)
    if sv.size == 0 or sv[0] == 0:
        return np.zeros((bank_h.shape[1],) * 2)
    keep = min(p, int((sv > rel_tol * sv[0]).sum()))
    V = vt[:keep].T
    return V @ V.T


class Surrogate:
    """Normalized value predictors ``h -> v_k(h)``; either a trained model or callables."""

    def __init__(self, model: PolicyModel | None = None, fns=None):
        self.model = model
        self.fns = fns

    def values(self, h: torch.Tensor):
        if self.fns is not None:
            return [fn(h) for fn in self.fns]
        return [self.model.value_of(h, k) for k in range(self.model.cfg.n_tasks)]


def _normalized_goal(query: SteeringQuery, stats: NormStats | None):
    if stats is None:
        return query.target, [(k, v) for k, v in query.constraints]
    return (float(stats.norm_return(query.target, 0)),
            [(k, float(stats.norm_return(v, k))) for k, v in query.constraints])


def lagrangian(h: torch.Tensor, lam, surrogate: Surrogate, goal, bounds):
    """``(v_0(h) - goal)^2 + sum_c lam_c * (bound_c - v_k(h))``, all normalized."""
    vals = surrogate.values(h)
    out = (vals[0] - goal) ** 2
    for c, (k, bound) in enumerate(bounds):
        out = out + float(lam[c]) * (bound - vals[k])
    return out


def lagrangian_grad(h, lam, query: SteeringQuery, surrogate: Surrogate, stats=None):
    goal, bounds = _normalized_goal(query, stats)
    ht = torch.as_tensor(np.asarray(h, dtype=np.float64)).clone().requires_grad_(True)
    L = lagrangian(ht, lam, surrogate, goal, bounds)
    if not torch.isfinite(L):
        raise FloatingPointError("non-finite Lagrangian")
    (g,) = torch.autograd.grad(L, ht)
    return g.numpy()


def _predict(surrogate: Surrogate, h):
    with torch.no_grad():
        return np.array([float(v) for v in surrogate.values(torch.as_tensor(h, dtype=DTYPE))])


def primal_dual_run(query: SteeringQuery, surrogate: Surrogate, bank_h=None, stats=None,
                    fixed_projector=None):
    """Projected primal descent on the Lagrangian with clamped dual ascent.

    The projector is rebuilt from ``bank_h`` every iteration unless the query
    disables projection (identity) or ``fixed_projector`` is supplied.
    Returns ``(trace, final_h, final_predicted_normalized)``.
    """
    goal, bounds = _normalized_goal(query, stats)
    h = np.array(query.h0, dtype=np.float64)
    lam = np.zeros(len(bounds))
    trace = SteeringTrace()

    def feasible(pred):
        ok_t = abs(pred[0] - goal) <= query.tol_target
        ok_c = all(b - pred[k] <= query.tol_constraint for k, b in bounds)
        return ok_t and ok_c

    for t in range(query.max_iters + 1):
        pred = _predict(surrogate, h)
        if not np.all(np.isfinite(pred)) or not np.all(np.isfinite(h)):
            trace.reason = "non-finite iterate"
            return trace, h, pred
        feas = feasible(pred)
        trace.h.append(h.copy())
        trace.lam.append(lam.copy())
        trace.predicted.append(pred)
        trace.feasible.append(feas)
        if feas:
            trace.reason, trace.success = "converged", True
            return trace, h, pred
        if t == query.max_iters:
            break
        if fixed_projector is not None:
            P = fixed_projector
        elif query.project:
            P = tangent_projector(h, bank_h, query.n_neighbors, query.pca_rank)
        else:
            P = np.eye(len(h))
        trace.projector_error.append(max(np.abs(P @ P - P).max(), np.abs(P - P.T).max()))
        g = lagrangian_grad(h, lam, query, surrogate, stats)
        h = h - query.eta_h * (P @ g)
        pred_next = _predict(surrogate, h)
        cons = np.array([b - pred_next[k] for k, b in bounds])
        lam = np.maximum(lam + query.eta_lambda * cons, 0.0)
    trace.reason = "max_iters"
    return trace, h, trace.predicted[-1]


def decode_eval(h, model: PolicyModel, stats: NormStats, env_cfg: EnvConfig, n_eval=16,
                rng: np.random.Generator | None = None):
    """Mean raw returns of ``n_eval`` rollouts of the decoded policy, run in lockstep."""
    rng = np.random.default_rng(0) if rng is None else rng
    ht = torch.as_tensor(np.asarray(h, dtype=np.float64))
    states = np.zeros((n_eval, 2))
    returns = np.zeros((n_eval, K_OBJECTIVES))
    with torch.no_grad():
        for _ in range(env_cfg.horizon):
            a_norm = model.sample_action(stats.norm_state(states), ht, rng).numpy()[:, 0]
            states, r = step_batch(states, stats.denorm_action(a_norm), env_cfg)
            returns += r
    return returns.mean(axis=0)


def steer(query: SteeringQuery, model: PolicyModel, bank, stats: NormStats, env_cfg: EnvConfig,
          n_eval=16, rng=None, evaluate=True):
    """Run the optimizer against a trained model and decode the final latent."""
    if query.h0 is None:
        rng0 = np.random.default_rng(0) if rng is None else rng
        query.h0 = bank.h[rng0.integers(len(bank))].copy()
    trace, h, pred = primal_dual_run(query, Surrogate(model), bank.h, stats)
    result = SteeringResult(h, stats.denorm_return(pred), trace.success, trace.reason, len(trace.h) - 1)
    if evaluate:
        realized = decode_eval(h, model, stats, env_cfg, n_eval, rng)
        result.realized = realized
        result.target_error = float(abs(realized[0] - query.target) / abs(query.target))
        viol = [max(0.0, v - realized[k]) / abs(v) for k, v in query.constraints]
        result.constraint_violation = float(max(viol)) if viol else 0.0
    return trace, result
