"""Two-phase training loop, embedding bank and the checkpoint bundle."""
from __future__ import annotations

import csv
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch

from .dataio import Dataset, NormStats, sample_contexts, two_view_batch
from .diffnet import adamw_step, params_from_bytes, params_to_bytes
from .losses import LossBreakdown, LossWeights, phase1_terms, beta_schedule, value_loss
from .model import ModelConfig, PolicyModel

BUNDLE_MAGIC = b"PBND"
BUNDLE_VERSION = 1


class TrainingError(RuntimeError):
    pass


class BundleError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    context_length: int = 32
    rep_epochs: int = 200
    rep_batch: int = 64
    reg_epochs: int = 100
    reg_batch: int = 256
    lr: float = 1e-3
    weight_decay: float = 1e-4
    alpha: float = 1.0
    zeta: float = 5.0
    beta_start: float = 0.0
    beta_end: float = 0.05
    tau_sim: float = 0.5
    hidden: int = 64
    h_dim: int = 32
    z_dim: int = 4
    seed: int = 0
    init: str = "uniform_fan_in"
    vae_only: bool = False
    unconstrained_projector: bool = False
    mean_pool_encoder: bool = False
    deterministic_ae: bool = False

    def __post_init__(self):
        for name in ("context_length", "rep_batch", "reg_batch", "hidden", "h_dim", "z_dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.rep_epochs < 0 or self.reg_epochs < 0:
            raise ValueError("epoch counts must be non-negative")
        if self.init != "uniform_fan_in":
            raise ValueError(f"unknown init scheme {self.init!r}")

    def loss_weights(self) -> LossWeights:
        return LossWeights(alpha=0.0 if self.vae_only else self.alpha,
                           zeta=0.0 if self.unconstrained_projector else self.zeta,
                           beta_start=self.beta_start, beta_end=self.beta_end,
                           tau_sim=self.tau_sim)

    def model_config(self, n_tasks=2) -> ModelConfig:
        return ModelConfig(h_dim=self.h_dim, z_dim=self.z_dim, n_tasks=n_tasks,
                           hidden=self.hidden, mean_pool=self.mean_pool_encoder,
                           deterministic=self.deterministic_ae)

    def to_text(self) -> str:
        return "".join(f"{k} = {format_value(v)}\n" for k, v in sorted(asdict(self).items()))

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, _, raw = line.partition("=")
            key = key.strip()
            if key not in types:
                raise BundleError(f"unknown train config key {key!r}")
            values[key] = parse_value(raw.strip(), types[key])
        return cls(**values)


def format_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_value(raw, typ):
    typ = typ if isinstance(typ, str) else typ.__name__
    if typ == "bool":
        if raw.lower() not in ("true", "false"):
            raise ValueError(f"expected true/false, got {raw!r}")
        return raw.lower() == "true"
    if typ == "int":
        return int(raw)
    if typ == "float":
        return float(raw)
    return raw


@dataclass
class EmbeddingBank:
    h: np.ndarray  # (n, h_dim) posterior means
    knobs: np.ndarray  # (n,)
    returns: np.ndarray  # (n, K) raw units
    traj_idx: np.ndarray  # (n,)

    def __len__(self):
        return len(self.knobs)

    def __eq__(self, other):
        return isinstance(other, EmbeddingBank) and all(
            np.array_equal(getattr(self, f), getattr(other, f))
            for f in ("h", "knobs", "returns", "traj_idx"))


@dataclass
class Bundle:
    model: PolicyModel
    config: TrainConfig
    stats: NormStats
    bank: EmbeddingBank


def _rng(seed, *stream):
    return np.random.default_rng([seed, *stream])


def init_model(config: TrainConfig, n_tasks=2) -> PolicyModel:
    return PolicyModel(config.model_config(n_tasks), seed=int(_rng(config.seed, 0).integers(2**63)))


def train_phase1(dataset: Dataset, config: TrainConfig, model: PolicyModel | None = None,
                 progress=None):
    """Representation learning. Returns ``(model, log)`` with one LossBreakdown per epoch."""
    model = init_model(config, dataset.K) if model is None else model
    I, L, E = config.rep_batch, config.context_length, config.rep_epochs
    if len(dataset.train_idx) < I:
        raise TrainingError(f"train split ({len(dataset.train_idx)}) smaller than batch size {I}")
    weights = config.loss_weights()
    names = model.encoder_names() + model.decoder_names() + model.projector_names()
    log = []
    for epoch in range(E):
        rng = _rng(config.seed, 1, epoch)
        order = rng.permutation(dataset.train_idx)
        beta = beta_schedule(epoch, E, weights)
        epoch_parts = []
        for b in range(len(order) // I):
            batch = two_view_batch(dataset, I, L, rng, trajs=order[b * I:(b + 1) * I])
            model.store.zero_grad()
            total, parts = phase1_terms(model, batch, weights, beta, rng)
            if not np.isfinite(parts.total):
                raise TrainingError(f"non-finite phase-1 loss at epoch {epoch}, batch {b}")
            total.backward()
            try:
                adamw_step(model.store, lr=config.lr, weight_decay=config.weight_decay, names=names)
            except FloatingPointError as exc:
                raise TrainingError(f"epoch {epoch}, batch {b}: {exc}") from exc
            epoch_parts.append(parts)
        log.append(_mean_breakdown(epoch_parts, beta))
        if progress is not None:
            progress(epoch, log[-1])
    model.store.zero_grad()
    return model, log


def _mean_breakdown(parts, beta):
    out = LossBreakdown(
        float(np.mean([p.nll for p in parts])), float(np.mean([p.kl for p in parts])), beta,
        list(np.mean([p.rnc for p in parts], axis=0)), list(np.mean([p.ortho for p in parts], axis=0)))
    out.total = float(np.mean([p.total for p in parts]))
    out.h_norm = float(np.mean([p.h_norm for p in parts]))
    return out


def train_phase2(dataset: Dataset, model: PolicyModel, config: TrainConfig):
    """Fit value regressors on frozen encoder/projector outputs. Returns per-epoch mean MSE."""
    J, L = config.reg_batch, config.context_length
    names = model.regressor_names()
    K = model.cfg.n_tasks
    log = []
    for epoch in range(config.reg_epochs):
        rng = _rng(config.seed, 2, epoch)
        order = rng.permutation(dataset.train_idx)
        n_batches = max(1, int(np.ceil(len(order) / J)))
        losses = []
        for b in range(n_batches):
            trajs = order[b * J:(b + 1) * J]
            contexts = sample_contexts(dataset, trajs, L, rng)
            labels = dataset.normalized_returns(trajs)
            with torch.no_grad():
                h = model.reparameterize(model.encode(contexts), rng)
                zs = [model.project(h, k) for k in range(K)]
            model.store.zero_grad()
            parts = [value_loss(model.predict_value(zs[k], k), labels[:, k]) for k in range(K)]
            loss = sum(parts)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite phase-2 loss at epoch {epoch}, batch {b}")
            loss.backward()
            adamw_step(model.store, lr=config.lr, weight_decay=config.weight_decay, names=names)
            losses.append([p.item() for p in parts])
        log.append(np.mean(losses, axis=0))
    model.store.zero_grad()
    return log


def build_embedding_bank(dataset: Dataset, model: PolicyModel, config: TrainConfig,
                         idx=None) -> EmbeddingBank:
    """Posterior mean of one fixed-seed context per trajectory (train split by default)."""
    idx = np.asarray(dataset.train_idx if idx is None else idx)
    rng = _rng(config.seed, 3)
    contexts = sample_contexts(dataset, idx, config.context_length, rng)
    with torch.no_grad():
        h = model.encode(contexts).mu.numpy().copy()
    return EmbeddingBank(h, dataset.knobs[idx].copy(),
                         dataset.returns[idx].astype(np.float64), idx.astype(np.int64))


def train(dataset: Dataset, config: TrainConfig, progress=None):
    """Both phases plus the embedding bank. Returns ``(Bundle, phase1_log, phase2_log)``."""
    model, log1 = train_phase1(dataset, config, progress=progress)
    log2 = train_phase2(dataset, model, config)
    bank = build_embedding_bank(dataset, model, config)
    return Bundle(model, config, dataset.stats, bank), log1, log2


def write_training_log(path, log, K):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LossBreakdown.header(K))
        for epoch, parts in enumerate(log):
            w.writerow([epoch] + [repr(float(v)) for v in parts.row(epoch)[1:]])


# --- bundle io -------------------------------------------------------------------
# b"PBND", u32 version, u32 n_sections, then per section: 4-byte tag, u64 length, payload.
# Tags: PARM (parameter checkpoint bytes), CONF (TrainConfig canonical text, utf-8),
# STAT (u32 K + f64 stats vector), BANK (u32 n, u32 dim, u32 K, f64 h, f64 knobs,
# f64 returns, u32 traj_idx).

def bundle_to_bytes(bundle: Bundle) -> bytes:
    K = len(bundle.stats.return_mean)
    bank = bundle.bank
    n, dim = bank.h.shape
    sections = [
        (b"PARM", params_to_bytes(bundle.model.store.numpy())),
        (b"CONF", bundle.config.to_text().encode("utf-8")),
        (b"STAT", struct.pack("<I", K) + bundle.stats.to_vector().astype("<f8").tobytes()),
        (b"BANK", struct.pack("<III", n, dim, K) + bank.h.astype("<f8").tobytes()
         + bank.knobs.astype("<f8").tobytes() + bank.returns.astype("<f8").tobytes()
         + bank.traj_idx.astype("<u4").tobytes()),
    ]
    out = [BUNDLE_MAGIC, struct.pack("<II", BUNDLE_VERSION, len(sections))]
    for tag, payload in sections:
        out.append(tag + struct.pack("<Q", len(payload)) + payload)
    return b"".join(out)


def bundle_from_bytes(buf: bytes) -> Bundle:
    if buf[:4] != BUNDLE_MAGIC:
        raise BundleError("not a checkpoint bundle (bad magic)")
    if len(buf) < 12:
        raise BundleError("truncated bundle header")
    version, count = struct.unpack("<II", buf[4:12])
    if version != BUNDLE_VERSION:
        raise BundleError(f"bundle version mismatch: file {version}, expected {BUNDLE_VERSION}")
    pos, sections = 12, {}
    for _ in range(count):
        if pos + 12 > len(buf):
            raise BundleError(f"truncated section header at offset {pos}")
        tag = buf[pos:pos + 4]
        (length,) = struct.unpack("<Q", buf[pos + 4:pos + 12])
        pos += 12
        if pos + length > len(buf):
            raise BundleError(f"truncated section {tag.decode(errors='replace')} at offset {pos}")
        sections[tag] = buf[pos:pos + length]
        pos += length
    for tag in (b"PARM", b"CONF", b"STAT", b"BANK"):
        if tag not in sections:
            raise BundleError(f"bundle is missing the {tag.decode()} section")

    config = TrainConfig.from_text(sections[b"CONF"].decode("utf-8"))
    (K,) = struct.unpack("<I", sections[b"STAT"][:4])
    stats = NormStats.from_vector(np.frombuffer(sections[b"STAT"][4:], dtype="<f8"), K)
    model = PolicyModel(config.model_config(K))
    model.store.load_state(params_from_bytes(sections[b"PARM"]))

    raw = sections[b"BANK"]
    n, dim, Kb = struct.unpack("<III", raw[:12])
    off = 12

    def grab(dtype, count):
        nonlocal off
        size = np.dtype(dtype).itemsize * count
        if off + size > len(raw):
            raise BundleError("truncated BANK section")
        arr = np.frombuffer(raw[off:off + size], dtype=dtype)
        off += size
        return arr

    h = grab("<f8", n * dim).reshape(n, dim).astype(np.float64)
    knobs = grab("<f8", n).astype(np.float64)
    returns = grab("<f8", n * Kb).reshape(n, Kb).astype(np.float64)
    traj_idx = grab("<u4", n).astype(np.int64)
    return Bundle(model, config, stats, EmbeddingBank(h, knobs, returns, traj_idx))


def save_bundle(path, bundle: Bundle):
    Path(path).write_bytes(bundle_to_bytes(bundle))


def load_bundle(path) -> Bundle:
    return bundle_from_bytes(Path(path).read_bytes())
