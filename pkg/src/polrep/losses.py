"""Training objectives: beta-VAE policy loss, Rank-N-Contrast, projector
orthonormality, value regression, and their Phase-1 assembly."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .diffnet import DTYPE
from .model import PolicyModel, PolicyPosterior


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    zeta: float = 5.0
    beta_start: float = 0.0
    beta_end: float = 0.05
    tau_sim: float = 0.5

    def __post_init__(self):
        if min(self.alpha, self.zeta, self.beta_start, self.beta_end) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.tau_sim <= 0:
            raise ValueError("tau_sim must be positive")


@dataclass
class LossBreakdown:
    nll: float
    kl: float
    beta: float
    rnc: list = field(default_factory=list)
    ortho: list = field(default_factory=list)
    value_mse: list = field(default_factory=list)
    total: float = 0.0
    h_norm: float = 0.0  # mean representation norm, logged only

    def row(self, epoch):
        return [epoch, self.nll, self.kl, *self.rnc, *self.ortho, self.total, self.h_norm]

    @staticmethod
    def header(K):
        return (["epoch", "nll", "kl"] + [f"rnc_{k}" for k in range(K)]
                + [f"ortho_{k}" for k in range(K)] + ["total", "h_norm"])


def beta_schedule(epoch, total_epochs, weights: LossWeights = LossWeights()):
    if total_epochs <= 0:
        return weights.beta_end
    if not 0 <= epoch <= total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs}]")
    frac = epoch / total_epochs
    return weights.beta_start + frac * (weights.beta_end - weights.beta_start)


def kl_standard_normal(post: PolicyPosterior) -> torch.Tensor:
    """Per-sample KL(q || N(0, I)), shape (B,)."""
    mu, ls = post.mu, post.log_sigma
    return 0.5 * (mu ** 2 + torch.exp(2 * ls) - 1 - 2 * ls).sum(dim=-1)


def policy_loss(model: PolicyModel, post: PolicyPosterior, h, query_states, query_actions):
    """Returns ``(nll, kl)`` as batch means; deterministic posteriors give ``kl = 0``."""
    if h.shape[0] == 0:
        raise ValueError("policy_loss on an empty batch")
    nll = -model.action_logprob(query_states, query_actions, h).mean()
    if post.deterministic:
        kl = torch.zeros((), dtype=DTYPE)
    else:
        kl = kl_standard_normal(post).mean()
    return nll, kl


def pairwise_distances(z: torch.Tensor) -> torch.Tensor:
    diff = z[:, None, :] - z[None, :, :]
    sq = (diff ** 2).sum(dim=-1)
    n = z.shape[0]
    # keep sqrt differentiable on the diagonal; diagonal entries are never used
    sq = sq + torch.eye(n, dtype=z.dtype)
    return torch.sqrt(sq) * (1 - torch.eye(n, dtype=z.dtype))


def rnc_loss(z: torch.Tensor, labels, tau_sim=0.5) -> torch.Tensor:
    """Rank-N-Contrast over a batch of embeddings ``z`` (n, d) with scalar ``labels``.

    For anchor ``i`` and target ``j != i`` the denominator runs over
    ``{l != i : |y_i - y_l| >= |y_i - y_j|}``, which always includes ``j``.
    Per anchor these sets are prefixes of the other indices sorted by
    decreasing label distance, so every denominator is one entry of a
    cumulative log-sum-exp.
    """
    n = z.shape[0]
    if n < 2:
        raise ValueError("rnc_loss needs a batch of at least 2 embeddings")
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    d = np.abs(y[:, None] - y[None, :])
    np.fill_diagonal(d, -1.0)  # anchor itself sorts last and is never inside a prefix
    order = np.argsort(-d, axis=1, kind="stable")
    # prefix length of F_ij = #{l != i : d_il >= d_ij}
    asc = np.sort(d, axis=1)
    count = np.stack([n - np.searchsorted(asc[i], d[i], side="left") for i in range(n)])
    off = ~np.eye(n, dtype=bool)
    s = -pairwise_distances(z) / tau_sim
    cum = torch.logcumsumexp(torch.gather(s, 1, torch.as_tensor(order)), dim=1)
    lse = torch.gather(cum, 1, torch.as_tensor(np.where(off, count - 1, 0)))
    off_t = torch.as_tensor(off)
    return -(s - lse)[off_t].mean()


def ortho_loss(U: torch.Tensor) -> torch.Tensor:
    eye = torch.eye(U.shape[0], dtype=U.dtype)
    return ((U @ U.T - eye) ** 2).sum()


def value_loss(pred: torch.Tensor, labels) -> torch.Tensor:
    if pred.numel() == 0:
        raise ValueError("value_loss on an empty batch")
    y = torch.as_tensor(np.asarray(labels, dtype=np.float64)).reshape(pred.shape)
    return ((pred - y) ** 2).mean()


def phase1_terms(model: PolicyModel, batch, weights: LossWeights, beta, rng=None, eps=None):
    """Differentiable Phase-1 objective and its parts on one two-view batch.

    Returns ``(total_tensor, LossBreakdown)``. ``eps`` fixes the
    reparameterization noise (used by gradient checks).
    """
    post = model.encode(batch.contexts)
    h = model.reparameterize(post, rng, eps=eps)
    nll, kl = policy_loss(model, post, h, batch.query_states, batch.query_actions)
    K = model.cfg.n_tasks
    rnc_terms, ortho_terms = [], []
    for k in range(K):
        z = model.project(h, k)
        rnc_terms.append(rnc_loss(z, batch.returns[:, k], weights.tau_sim)
                         if weights.alpha > 0 else torch.zeros((), dtype=DTYPE))
        ortho_terms.append(ortho_loss(model.store[f"proj{k}.U"]))
    rep = sum(weights.alpha * r + weights.zeta * o for r, o in zip(rnc_terms, ortho_terms)) / K
    total = nll + beta * kl + rep
    parts = LossBreakdown(nll.item(), kl.item(), beta,
                          [r.item() for r in rnc_terms], [o.item() for o in ortho_terms])
    parts.total = total.item()
    parts.h_norm = h.detach().norm(dim=-1).mean().item()
    check_assembly(parts, weights, K)
    return total, parts


def assemble_total(parts: LossBreakdown, weights: LossWeights, K: int) -> float:
    rep = sum(weights.alpha * r + weights.zeta * o for r, o in zip(parts.rnc, parts.ortho)) / K
    return parts.nll + parts.beta * parts.kl + rep


def check_assembly(parts: LossBreakdown, weights: LossWeights, K: int, tol=1e-12):
    expected = assemble_total(parts, weights, K)
    if abs(expected - parts.total) > tol * max(1.0, abs(expected)):
        raise RuntimeError(f"loss assembly mismatch: total {parts.total!r} vs parts {expected!r}")


def total_phase1_loss(model, batch, weights, epoch, total_epochs, rng=None, eps=None):
    """Phase-1 loss at ``epoch`` with the annealed KL weight."""
    return phase1_terms(model, batch, weights, beta_schedule(epoch, total_epochs, weights), rng, eps)
