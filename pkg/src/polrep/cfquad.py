"""Control-functional quadrature with a Langevin Stein kernel over a Gaussian RBF."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve


def standard_normal_score(x):
    return -np.asarray(x, dtype=np.float64)


def gaussian_mixture_score(weights, means, stds):
    """Score of an isotropic Gaussian mixture; ``means`` is (C, d)."""
    weights = np.asarray(weights, dtype=np.float64)
    means = np.atleast_2d(np.asarray(means, dtype=np.float64))
    stds = np.asarray(stds, dtype=np.float64)

    def score(x):
        x = np.atleast_2d(x)
        diff = x[:, None, :] - means[None]  # (n, C, d)
        d = means.shape[1]
        logp = (np.log(weights) - d * np.log(stds) - 0.5 * (diff ** 2).sum(-1) / stds ** 2)
        resp = np.exp(logp - logp.max(axis=1, keepdims=True))
        resp /= resp.sum(axis=1, keepdims=True)
        return -(resp[..., None] * diff / stds[None, :, None] ** 2).sum(axis=1)

    return score


@dataclass
class SteinTarget:
    """Target density (through its score), RBF base kernel and estimator settings.

    ``lengthscale=None`` selects the median pairwise distance of the fitting split.
    The ridge added to the kernel system is ``reg * m``.
    """

    score: Callable = standard_normal_score
    lengthscale: float | None = None
    reg: float = 1e-6
    split: float = 0.5

    def __post_init__(self):
        if self.lengthscale is not None and self.lengthscale <= 0:
            raise ValueError("lengthscale must be positive")
        if self.reg < 0:
            raise ValueError("reg must be non-negative")
        if not 0 < self.split < 1:
            raise ValueError("split fraction must lie in (0, 1)")


def _as_points(x):
    x = np.asarray(x, dtype=np.float64)
    return x[:, None] if x.ndim == 1 else x


def rbf(x, y, lengthscale):
    """Base kernel matrix between point sets (n, d) and (m, d)."""
    x, y = _as_points(x), _as_points(y)
    sq = ((x[:, None, :] - y[None, :, :]) ** 2).sum(-1)
    return np.exp(-0.5 * sq / lengthscale ** 2)


def stein_kernel(x, y, score, lengthscale):
    """Langevin Stein kernel matrix ``k0(x_i, y_j)``.

    ``k0 = div_x grad_y k + grad_x k . u(y) + grad_y k . u(x) + k u(x) . u(y)``
    with ``u`` the score of the target density.
    """
    x, y = _as_points(x), _as_points(y)
    ell2 = lengthscale ** 2
    d = x.shape[1]
    diff = x[:, None, :] - y[None, :, :]
    sq = (diff ** 2).sum(-1)
    k = np.exp(-0.5 * sq / ell2)
    ux, uy = _as_points(score(x)), _as_points(score(y))
    trace_term = d / ell2 - sq / ell2 ** 2
    grad_x_dot_uy = -(diff * uy[None, :, :]).sum(-1) / ell2
    grad_y_dot_ux = (diff * ux[:, None, :]).sum(-1) / ell2
    return k * (trace_term + grad_x_dot_uy + grad_y_dot_ux + ux @ uy.T)


def median_lengthscale(x):
    x = _as_points(x)
    dist = np.sqrt(((x[:, None, :] - x[None, :, :]) ** 2).sum(-1))
    iu = np.triu_indices(len(x), k=1)
    med = float(np.median(dist[iu])) if len(iu[0]) else 1.0
    return med if med > 0 else 1.0


def split_index(N, split=0.5):
    m = int(math.ceil(N * split))
    return min(max(m, 1), N - 1)


def _system(D0, D1, target: SteinTarget):
    ell = target.lengthscale if target.lengthscale is not None else median_lengthscale(D0)
    m = len(_as_points(D0))
    K0 = stein_kernel(D0, D0, target.score, ell)
    K10 = stein_kernel(D1, D0, target.score, ell)
    A = K0 + target.reg * m * np.eye(m)
    try:
        factor = cho_factor(A)
    except LinAlgError as exc:
        raise LinAlgError("control-functional system is singular; increase the ridge `reg`") from exc
    return factor, K10


def cf_weights(D0, D1, target: SteinTarget = SteinTarget()) -> np.ndarray:
    """Weights over ``[D0; D1]`` realizing the split-sample estimator as a linear rule."""
    factor, K10 = _system(D0, D1, target)
    n1 = K10.shape[0]
    ones0 = np.ones(K10.shape[1])
    a = cho_solve(factor, ones0)
    c = ones0 @ a
    w0 = -cho_solve(factor, K10.T @ np.ones(n1)) / n1 + (np.ones(n1) @ K10 @ a) / n1 * a / c
    return np.concatenate([w0, np.full(n1, 1.0 / n1)])


def cf_closed_form(D0, D1, f0, f1, target: SteinTarget = SteinTarget()) -> float:
    """Direct evaluation of the estimator: residual mean on D1 plus the surrogate's integral."""
    factor, K10 = _system(D0, D1, target)
    f0 = np.asarray(f0, dtype=np.float64)
    f1 = np.asarray(f1, dtype=np.float64)
    ones0, ones1 = np.ones(len(f0)), np.ones(len(f1))
    a_f = cho_solve(factor, f0)
    a_1 = cho_solve(factor, ones0)
    const = (ones0 @ a_f) / (ones0 @ a_1)
    f1_hat = K10 @ a_f + (ones1 - K10 @ a_1) * const
    return float(ones1 @ (f1 - f1_hat) / len(f1) + const)


def cf_estimate(samples, fvals, target: SteinTarget = SteinTarget()):
    """Estimate ``E_p[f]`` from N samples; ``fvals`` may be (N,) or (N, q)."""
    x = _as_points(samples)
    N = len(x)
    if N < 4:
        raise ValueError("cf_estimate needs at least 4 samples")
    m = split_index(N, target.split)
    w = cf_weights(x[:m], x[m:], target)
    return w @ np.asarray(fvals, dtype=np.float64)


@dataclass
class RateResult:
    n_grid: list
    cf_err: np.ndarray
    mc_err: np.ndarray
    trials: int
    cf_slope: float
    mc_slope: float
    max_weight_sum_dev: float

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["N", "cf_err", "mc_err", "trials"])
            for N, c, m in zip(self.n_grid, self.cf_err, self.mc_err):
                w.writerow([N, repr(float(c)), repr(float(m)), self.trials])
            w.writerow(["slope", repr(self.cf_slope), repr(self.mc_slope), self.trials])


def loglog_slope(n, err):
    return float(np.polyfit(np.log(n), np.log(err), 1)[0])


def rate_experiment(f=lambda x: x[:, 0] ** 2, truth=1.0, n_grid=(16, 32, 64, 128, 256, 512),
                    trials=100, target: SteinTarget = SteinTarget(), dim=1, seed=0,
                    sampler=None) -> RateResult:
    """Trial-averaged absolute errors of control functionals and plain Monte Carlo.

    Samples come from ``sampler(rng, N)`` (default standard normal in ``dim``
    dimensions); trial ``t`` at size ``N`` uses ``default_rng([seed, N, t])``.
    """
    if len(n_grid) < 4:
        raise ValueError("rate_experiment needs at least 4 sample sizes")
    sampler = sampler or (lambda rng, N: rng.standard_normal((N, dim)))
    cf_err, mc_err, worst = [], [], 0.0
    for N in n_grid:
        ce, me = [], []
        for t in range(trials):
            x = sampler(np.random.default_rng([seed, N, t]), N)
            fx = f(x)
            m = split_index(N, target.split)
            w = cf_weights(x[:m], x[m:], target)
            worst = max(worst, abs(w.sum() - 1.0))
            ce.append(abs(w @ fx - truth))
            me.append(abs(fx.mean() - truth))
        cf_err.append(np.mean(ce))
        mc_err.append(np.mean(me))
    cf_err, mc_err = np.array(cf_err), np.array(mc_err)
    return RateResult(list(n_grid), cf_err, mc_err, trials,
                      loglog_slope(n_grid, cf_err), loglog_slope(n_grid, mc_err), worst)
