"""Set encoder, per-task affine projectors, value regressors and policy decoder.

The encoder is a weighted sum over context pairs: a pointwise feature MLP is
averaged with softmax weights produced from each pair and a permutation-invariant
set summary. Context rows are put in lexicographic order before any reduction,
so the posterior is bit-identical under permutations of the input.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .diffnet import DTYPE, MlpSpec, ParamStore, init_mlp, mlp_apply

LOG_STD_MIN, LOG_STD_MAX = -6.0, 2.0
HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)


@dataclass(frozen=True)
class ModelConfig:
    state_dim: int = 2
    action_dim: int = 1
    h_dim: int = 32
    z_dim: int = 4
    n_tasks: int = 2
    hidden: int = 64
    mean_pool: bool = False
    deterministic: bool = False

    @property
    def pair_dim(self):
        return self.state_dim + self.action_dim


@dataclass
class PolicyPosterior:
    mu: torch.Tensor  # (B, h_dim)
    log_sigma: torch.Tensor  # (B, h_dim), clamped; zeros-like sentinel when deterministic
    deterministic: bool = False


class PolicyModel:
    """Holds every network of the architecture in one :class:`ParamStore`.

    Parameter prefixes: ``enc.feat`` / ``enc.rho0`` / ``enc.rho1`` / ``enc.rho2``
    (encoder), ``proj{k}.U`` / ``proj{k}.b`` (projectors), ``reg{k}`` (value
    regressors), ``dec.trunk`` / ``dec.head`` (decoder). Task indices are 0-based.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0, store: ParamStore | None = None):
        self.cfg = cfg
        H, d = cfg.hidden, cfg.pair_dim
        self.specs = {
            "enc.feat": MlpSpec((d, H, H, 2 * cfg.h_dim)),
            "enc.rho0": MlpSpec((d, H, H)),
            "enc.rho1": MlpSpec((H, H, H)),
            "enc.rho2": MlpSpec((d + H, H, 1)),
            "dec.trunk": MlpSpec((cfg.state_dim, H, H), out_activation="tanh"),
            "dec.head": MlpSpec((H + cfg.h_dim, H, H, 2 * cfg.action_dim)),
        }
        for k in range(cfg.n_tasks):
            self.specs[f"reg{k}"] = MlpSpec((cfg.z_dim, H, H, 1))
        if store is None:
            store = self._init_store(np.random.default_rng(seed))
        self.store = store

    def _init_store(self, rng):
        store = ParamStore()
        for prefix in ("enc.feat", "enc.rho0", "enc.rho1", "enc.rho2", "dec.trunk", "dec.head"):
            init_mlp(store, prefix, self.specs[prefix], rng)
        for k in range(self.cfg.n_tasks):
            bound = 1.0 / math.sqrt(self.cfg.h_dim)
            store.add(f"proj{k}.U", rng.uniform(-bound, bound, size=(self.cfg.z_dim, self.cfg.h_dim)))
            store.add(f"proj{k}.b", np.zeros(self.cfg.z_dim))
        for k in range(self.cfg.n_tasks):
            # zero last layer: untrained regressors predict 0
            init_mlp(store, f"reg{k}", self.specs[f"reg{k}"], rng, zero_last=True)
        return store

    # parameter groups
    def encoder_names(self):
        return self.store.names("enc.")

    def decoder_names(self):
        return self.store.names("dec.")

    def projector_names(self):
        return [n for n in self.store if n.startswith("proj")]

    def regressor_names(self):
        return [n for n in self.store if n.startswith("reg")]

    def _mlp(self, prefix, x):
        return mlp_apply(self.specs[prefix], self.store, prefix, x)

    # --- encoder -----------------------------------------------------------
    def context_weights(self, x: torch.Tensor) -> torch.Tensor:
        """Softmax pooling weights, (B, L), for canonicalized contexts ``x``."""
        B, L, _ = x.shape
        if self.cfg.mean_pool:
            return torch.full((B, L), 1.0 / L, dtype=DTYPE)
        summary = self._mlp("enc.rho1", self._mlp("enc.rho0", x).mean(dim=1))
        joint = torch.cat([x, summary[:, None, :].expand(B, L, summary.shape[-1])], dim=-1)
        logits = self._mlp("enc.rho2", joint)[..., 0]
        return torch.softmax(logits, dim=1)

    def encode(self, contexts) -> PolicyPosterior:
        """Posterior for a batch of contexts, (B, L, pair_dim), or a single (L, pair_dim)."""
        x = canonical_contexts(contexts)
        if x.shape[1] < 1:
            raise ValueError("cannot encode an empty context set")
        x = torch.as_tensor(x, dtype=DTYPE)
        w = self.context_weights(x)
        pooled = (w[..., None] * self._mlp("enc.feat", x)).sum(dim=1)
        D = self.cfg.h_dim
        mu = pooled[:, :D]
        if self.cfg.deterministic:
            return PolicyPosterior(mu, torch.zeros_like(mu), deterministic=True)
        return PolicyPosterior(mu, torch.clamp(pooled[:, D:], LOG_STD_MIN, LOG_STD_MAX))

    def reparameterize(self, post: PolicyPosterior, rng: np.random.Generator | None = None,
                       eps=None) -> torch.Tensor:
        if post.deterministic:
            return post.mu
        if eps is None:
            eps = rng.standard_normal(tuple(post.mu.shape))
        eps = torch.as_tensor(np.asarray(eps, dtype=np.float64))
        return post.mu + torch.exp(post.log_sigma) * eps

    # --- projector / regressor ---------------------------------------------
    def project(self, h: torch.Tensor, k: int) -> torch.Tensor:
        self._check_task(k)
        return h @ self.store[f"proj{k}.U"].T + self.store[f"proj{k}.b"]

    def predict_value(self, z: torch.Tensor, k: int) -> torch.Tensor:
        self._check_task(k)
        return self._mlp(f"reg{k}", z)[..., 0]

    def value_of(self, h: torch.Tensor, k: int) -> torch.Tensor:
        return self.predict_value(self.project(h, k), k)

    def _check_task(self, k):
        if not 0 <= k < self.cfg.n_tasks:
            raise IndexError(f"task index {k} out of range [0, {self.cfg.n_tasks})")

    # --- decoder -----------------------------------------------------------
    def decode_action_dist(self, s, h):
        """``(mu_a, sigma_a)`` of the action distribution for normalized states ``s``."""
        s = torch.as_tensor(s, dtype=DTYPE)
        trunk = self._mlp("dec.trunk", s)
        out = self._mlp("dec.head", torch.cat([trunk, h.expand(*trunk.shape[:-1], h.shape[-1])], dim=-1))
        A = self.cfg.action_dim
        log_std = torch.clamp(out[..., A:], LOG_STD_MIN, LOG_STD_MAX)
        return out[..., :A], torch.exp(log_std)

    def action_logprob(self, s, a, h) -> torch.Tensor:
        mu, sigma = self.decode_action_dist(s, h)
        a = torch.as_tensor(a, dtype=DTYPE)
        return gaussian_logpdf(a, mu, sigma).sum(dim=-1)

    def sample_action(self, s, h, rng: np.random.Generator | None = None, eps=None):
        mu, sigma = self.decode_action_dist(s, h)
        if eps is None:
            eps = rng.standard_normal(tuple(mu.shape))
        return mu + sigma * torch.as_tensor(np.asarray(eps, dtype=np.float64))


def gaussian_logpdf(x, mu, sigma):
    return -0.5 * ((x - mu) / sigma) ** 2 - torch.log(sigma) - HALF_LOG_2PI


def canonical_contexts(contexts) -> np.ndarray:
    """(B, L, d) float64 copy with each context's rows in lexicographic order."""
    if hasattr(contexts, "pairs"):
        contexts = contexts.pairs
    x = np.asarray(contexts, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3:
        raise ValueError(f"contexts must be (B, L, d) or (L, d), got shape {x.shape}")
    out = np.empty_like(x)
    for b in range(x.shape[0]):
        order = np.lexsort(x[b].T[::-1])
        out[b] = x[b][order]
    return out
