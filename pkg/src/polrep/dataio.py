"""Dataset container, normalization, context sampling and the binary dataset file.

Dataset file layout (little-endian)::

    offset 0   : b"PREP"                      magic
    offset 4   : u32 version (=1)
    offset 8   : u32 K, u32 T, u32 n_traj
    then n_traj blocks, each:
        f64 knob
        f32 states[T*2]    (x, v) row-major
        f32 actions[T]
        f32 rewards[T*K]   row-major
        f32 returns[K]
    stats block, f64:
        state_mean[2] state_std[2] action_mean[1] action_std[1]
        return_mean[K] return_std[K]
    split block:
        u32 n_train, u32 train_idx[n_train]
        u32 n_test,  u32 test_idx[n_test]

Arrays are held as float32 in memory so a save/load round trip is bit-exact.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .env import EnvConfig, Trajectory, default_knobs, population

MAGIC = b"PREP"
VERSION = 1
STD_FLOOR = 1e-6


class DatasetFormatError(ValueError):
    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass
class NormStats:
    state_mean: np.ndarray
    state_std: np.ndarray
    action_mean: np.ndarray
    action_std: np.ndarray
    return_mean: np.ndarray
    return_std: np.ndarray

    def norm_state(self, s):
        return (np.asarray(s, dtype=np.float64) - self.state_mean) / self.state_std

    def norm_action(self, a):
        return (np.asarray(a, dtype=np.float64) - self.action_mean[0]) / self.action_std[0]

    def denorm_action(self, a):
        return np.asarray(a, dtype=np.float64) * self.action_std[0] + self.action_mean[0]

    def norm_return(self, r, k=None):
        r = np.asarray(r, dtype=np.float64)
        if k is None:
            return (r - self.return_mean) / self.return_std
        return (r - self.return_mean[k]) / self.return_std[k]

    def denorm_return(self, r, k=None):
        r = np.asarray(r, dtype=np.float64)
        if k is None:
            return r * self.return_std + self.return_mean
        return r * self.return_std[k] + self.return_mean[k]

    def to_vector(self):
        return np.concatenate([self.state_mean, self.state_std, self.action_mean,
                               self.action_std, self.return_mean, self.return_std])

    @classmethod
    def from_vector(cls, vec, K):
        vec = np.asarray(vec, dtype=np.float64)
        return cls(vec[0:2].copy(), vec[2:4].copy(), vec[4:5].copy(), vec[5:6].copy(),
                   vec[6:6 + K].copy(), vec[6 + K:6 + 2 * K].copy())

    def __eq__(self, other):
        return isinstance(other, NormStats) and np.array_equal(self.to_vector(), other.to_vector())


def compute_norm_stats(states, actions, returns) -> NormStats:
    """Per-dimension mean/std over all transitions of the given trajectories.

    ``states`` is (n, T, 2), ``actions`` (n, T), ``returns`` (n, K).
    """
    states = np.asarray(states, dtype=np.float64)
    if states.size == 0:
        raise ValueError("cannot compute normalization statistics of an empty set")
    if states.shape[0] < 2:
        raise ValueError("normalization statistics need at least 2 trajectories")
    actions = np.asarray(actions, dtype=np.float64)
    returns = np.asarray(returns, dtype=np.float64)
    flat_s = states.reshape(-1, 2)
    flat_a = actions.reshape(-1, 1)
    return NormStats(
        flat_s.mean(axis=0), np.maximum(flat_s.std(axis=0), STD_FLOOR),
        flat_a.mean(axis=0), np.maximum(flat_a.std(axis=0), STD_FLOOR),
        returns.mean(axis=0), np.maximum(returns.std(axis=0), STD_FLOOR),
    )


@dataclass
class Dataset:
    knobs: np.ndarray  # (n,) f64
    states: np.ndarray  # (n, T, 2) f32
    actions: np.ndarray  # (n, T) f32
    rewards: np.ndarray  # (n, T, K) f32
    returns: np.ndarray  # (n, K) f32
    stats: NormStats
    train_idx: np.ndarray  # u32-representable int64
    test_idx: np.ndarray

    @property
    def n_traj(self):
        return len(self.knobs)

    @property
    def horizon(self):
        return self.states.shape[1]

    @property
    def K(self):
        return self.returns.shape[1]

    def normalized_pairs(self, i):
        """(T, 3) array of normalized (x, v, a) for trajectory ``i``."""
        s = self.stats.norm_state(self.states[i])
        a = self.stats.norm_action(self.actions[i])
        return np.concatenate([s, a[:, None]], axis=1)

    def normalized_returns(self, idx=None):
        r = self.returns if idx is None else self.returns[idx]
        return self.stats.norm_return(r)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return all(np.array_equal(getattr(self, f), getattr(other, f))
                   for f in ("knobs", "states", "actions", "rewards", "returns",
                             "train_idx", "test_idx")) and self.stats == other.stats


def heldout_split(knobs, every=5):
    """Hold out every ``every``-th distinct knob value (starting from the 3rd)."""
    distinct = np.unique(knobs)
    held = set(distinct[2::every].tolist()) if every > 0 else set()
    test = np.array([i for i, w in enumerate(knobs) if w in held], dtype=np.int64)
    train = np.array([i for i, w in enumerate(knobs) if w not in held], dtype=np.int64)
    return train, test


def build_dataset(trajectories: list[Trajectory], heldout_every=5) -> Dataset:
    knobs = np.array([t.knob for t in trajectories], dtype=np.float64)
    states = np.stack([t.states for t in trajectories]).astype(np.float32)
    actions = np.stack([t.actions for t in trajectories]).astype(np.float32)
    rewards = np.stack([t.rewards for t in trajectories]).astype(np.float32)
    returns = np.stack([t.returns for t in trajectories]).astype(np.float32)
    train, test = heldout_split(knobs, heldout_every)
    stats = compute_norm_stats(states[train], actions[train], returns[train])
    return Dataset(knobs, states, actions, rewards, returns, stats, train, test)


def generate_dataset(env_cfg: EnvConfig, n_knobs=40, traj_per_knob=20, heldout_every=5) -> Dataset:
    """Roll out the knob grid and split it; fully determined by ``env_cfg.seed``."""
    rng = np.random.default_rng([env_cfg.seed, 1000])
    trajs = population(env_cfg, default_knobs(n_knobs), traj_per_knob, rng)
    return build_dataset(trajs, heldout_every)


@dataclass
class ContextSet:
    pairs: np.ndarray  # (L, 3) normalized
    source_traj: int

    @property
    def length(self):
        return len(self.pairs)


def sample_context(dataset: Dataset, traj: int, L: int, rng: np.random.Generator) -> ContextSet:
    """``L`` normalized pairs drawn uniformly with replacement from one trajectory."""
    if L <= 0:
        raise ValueError(f"context length must be positive, got {L}")
    T = dataset.horizon
    if T < 1:
        raise ValueError("trajectory is empty")
    rows = rng.integers(0, T, size=L)
    return ContextSet(dataset.normalized_pairs(traj)[rows], int(traj))


def sample_contexts(dataset: Dataset, trajs, L: int, rng: np.random.Generator) -> np.ndarray:
    """Batched ``sample_context``: (len(trajs), L, 3) array."""
    if L <= 0:
        raise ValueError(f"context length must be positive, got {L}")
    trajs = np.asarray(trajs)
    rows = rng.integers(0, dataset.horizon, size=(len(trajs), L))
    s = dataset.stats.norm_state(dataset.states[trajs[:, None], rows])
    a = dataset.stats.norm_action(dataset.actions[trajs[:, None], rows])
    return np.concatenate([s, a[..., None]], axis=-1)


def sample_queries(dataset: Dataset, trajs, rng: np.random.Generator):
    """One normalized (state, action) pair per entry of ``trajs``."""
    trajs = np.asarray(trajs)
    rows = rng.integers(0, dataset.horizon, size=len(trajs))
    s = dataset.stats.norm_state(dataset.states[trajs, rows])
    a = dataset.stats.norm_action(dataset.actions[trajs, rows])
    return s, a[:, None]


@dataclass
class TwoViewBatch:
    contexts: np.ndarray  # (2I, L, 3)
    returns: np.ndarray  # (2I, K) normalized
    query_states: np.ndarray  # (2I, 2)
    query_actions: np.ndarray  # (2I, 1)
    source_traj: np.ndarray  # (2I,)

    def __len__(self):
        return len(self.source_traj)


def two_view_batch(dataset: Dataset, I: int, L: int, rng: np.random.Generator,
                   trajs=None) -> TwoViewBatch:
    """Views ``2i`` and ``2i+1`` (0-based) come from the same trajectory.

    ``trajs`` fixes the I source trajectories; otherwise they are drawn from
    the train split without replacement.
    """
    if trajs is None:
        if I > len(dataset.train_idx):
            raise ValueError(f"batch size I={I} exceeds train split size {len(dataset.train_idx)}")
        trajs = rng.choice(dataset.train_idx, size=I, replace=False)
    trajs = np.asarray(trajs)
    src = np.repeat(trajs, 2)
    contexts = sample_contexts(dataset, src, L, rng)
    qs, qa = sample_queries(dataset, src, rng)
    return TwoViewBatch(contexts, dataset.normalized_returns(src), qs, qa, src)


# --- file io -----------------------------------------------------------------

class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise DatasetFormatError(f"truncated dataset file while reading {what}", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]

    def array(self, dtype, count, what):
        dt = np.dtype(dtype).newbyteorder("<")
        return np.frombuffer(self.take(dt.itemsize * count, what), dtype=dt).astype(dtype)


def save_dataset(path, ds: Dataset):
    T, K, n = ds.horizon, ds.K, ds.n_traj
    parts = [MAGIC, struct.pack("<IIII", VERSION, K, T, n)]
    for i in range(n):
        parts.append(struct.pack("<d", float(ds.knobs[i])))
        for arr in (ds.states[i], ds.actions[i], ds.rewards[i], ds.returns[i]):
            parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    parts.append(ds.stats.to_vector().astype("<f8").tobytes())
    for idx in (ds.train_idx, ds.test_idx):
        parts.append(struct.pack("<I", len(idx)))
        parts.append(np.asarray(idx, dtype="<u4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_dataset(path) -> Dataset:
    r = _Reader(Path(path).read_bytes())
    if r.buf[:4] != MAGIC:
        raise DatasetFormatError("not a dataset file (bad magic)", 0)
    r.pos = 4
    version = r.u32("version")
    if version != VERSION:
        raise DatasetFormatError(f"unsupported dataset version {version}", 4)
    K, T, n = r.u32("K"), r.u32("T"), r.u32("n_traj")
    knobs = np.empty(n)
    states = np.empty((n, T, 2), np.float32)
    actions = np.empty((n, T), np.float32)
    rewards = np.empty((n, T, K), np.float32)
    returns = np.empty((n, K), np.float32)
    for i in range(n):
        knobs[i] = struct.unpack("<d", r.take(8, f"knob of trajectory {i}"))[0]
        states[i] = r.array(np.float32, T * 2, f"states of trajectory {i}").reshape(T, 2)
        actions[i] = r.array(np.float32, T, f"actions of trajectory {i}")
        rewards[i] = r.array(np.float32, T * K, f"rewards of trajectory {i}").reshape(T, K)
        returns[i] = r.array(np.float32, K, f"returns of trajectory {i}")
    stats = NormStats.from_vector(r.array(np.float64, 6 + 2 * K, "stats block"), K)
    splits = []
    for name in ("train", "test"):
        m = r.u32(f"{name} split length")
        splits.append(r.array(np.uint32, m, f"{name} split indices").astype(np.int64))
    if r.pos != len(r.buf):
        raise DatasetFormatError("trailing bytes after split block", r.pos)
    if np.any(splits[0] >= n) or np.any(splits[1] >= n):
        raise DatasetFormatError("split index out of range", r.pos)
    return Dataset(knobs, states, actions, rewards, returns, stats, splits[0], splits[1])
