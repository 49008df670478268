"""Two-objective point-mass environment and the one-knob controller family.

Objective 1 is forward velocity, objective 2 is the energy penalty ``-a**2``.
Returns are undiscounted sums over a fixed horizon.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

K_OBJECTIVES = 2


@dataclass(frozen=True)
class EnvConfig:
    dt: float = 1.0
    drag: float = 0.05
    gain: float = 0.2
    ctrl_gain: float = 1.0
    noise_sigma: float = 0.05
    horizon: int = 64
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.drag < 1.0:
            raise ValueError(f"drag must lie in (0, 1), got {self.drag}")
        if self.gain <= 0:
            raise ValueError(f"gain must be positive, got {self.gain}")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.horizon < 2:
            raise ValueError(f"horizon must be >= 2, got {self.horizon}")


@dataclass
class Trajectory:
    """One rollout: ``states[t]`` is the state the action ``actions[t]`` was taken in."""

    knob: float
    states: np.ndarray  # (T, 2)
    actions: np.ndarray  # (T,)
    rewards: np.ndarray  # (T, K)
    returns: np.ndarray = field(default=None)  # (K,)

    def __post_init__(self):
        if self.returns is None:
            self.returns = self.rewards.sum(axis=0)

    def __len__(self):
        return len(self.actions)


def step(state, action, cfg: EnvConfig):
    """Advance one step. Returns ``((x', v'), (r1, r2))``."""
    x, v = float(state[0]), float(state[1])
    a = float(action)
    if not (np.isfinite(x) and np.isfinite(v) and np.isfinite(a)):
        raise ValueError("invalid state/action: non-finite input")
    v_next = v + cfg.gain * min(max(a, -1.0), 1.0) - cfg.drag * v
    x_next = x + cfg.dt * v_next
    return (x_next, v_next), (v_next, -a * a)


def knob_action(knob, v, cfg: EnvConfig):
    """Noise-free action of the controller family at velocity ``v``."""
    return min(max(cfg.ctrl_gain * (knob - v), -1.0), 1.0)


def rollout(knob, cfg: EnvConfig, rng: np.random.Generator) -> Trajectory:
    if not 0.0 <= knob <= 1.0:
        raise ValueError(f"behavior knob must lie in [0, 1], got {knob}")
    T = cfg.horizon
    states = np.zeros((T, 2))
    actions = np.zeros(T)
    rewards = np.zeros((T, K_OBJECTIVES))
    noise = rng.normal(0.0, cfg.noise_sigma, size=T) if cfg.noise_sigma > 0 else np.zeros(T)
    s = (0.0, 0.0)
    for t in range(T):
        a = knob_action(knob, s[1], cfg) + noise[t]
        states[t] = s
        actions[t] = a
        s, r = step(s, a, cfg)
        rewards[t] = r
    return Trajectory(float(knob), states, actions, rewards)


def default_knobs(n: int = 40) -> np.ndarray:
    return np.linspace(0.0, 1.0, n)


def population(cfg: EnvConfig, knobs, traj_per_knob: int, rng: np.random.Generator):
    """``traj_per_knob`` rollouts for every knob, knob-major order."""
    knobs = list(knobs)
    if not knobs:
        raise ValueError("population needs at least one knob value")
    if len(knobs) < 2:
        raise ValueError("population needs P >= 2 knob values")
    if traj_per_knob < 1:
        raise ValueError("traj_per_knob must be >= 1")
    return [rollout(w, cfg, rng) for w in knobs for _ in range(traj_per_knob)]


def oracle_return(knob, cfg: EnvConfig, n_mc: int, seed: int | None = None) -> np.ndarray:
    """Monte Carlo mean return over ``n_mc`` independently seeded rollouts.

    Rollout ``i`` uses ``default_rng([seed, i])``; with ``n_mc=1`` this is the
    return of that single seeded rollout.
    """
    if n_mc < 1:
        raise ValueError("n_mc must be >= 1")
    seed = cfg.seed if seed is None else seed
    total = np.zeros(K_OBJECTIVES)
    for i in range(n_mc):
        total += rollout(knob, cfg, np.random.default_rng([seed, i])).returns
    return total / n_mc


def step_batch(states, actions, cfg: EnvConfig):
    """Vectorized :func:`step` over (n, 2) states and (n,) actions."""
    states = np.asarray(states, dtype=np.float64)
    a = np.asarray(actions, dtype=np.float64)
    if not (np.all(np.isfinite(states)) and np.all(np.isfinite(a))):
        raise ValueError("invalid state/action: non-finite input")
    v_next = states[:, 1] + cfg.gain * np.clip(a, -1.0, 1.0) - cfg.drag * states[:, 1]
    x_next = states[:, 0] + cfg.dt * v_next
    return np.stack([x_next, v_next], axis=1), np.stack([v_next, -a * a], axis=1)
