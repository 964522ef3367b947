"""Lockstep vectorized environments over a batched transition function.

A VecEnv advances ``n_envs`` environment copies with one call per step. The
backing is either the reference environment (stepped one by one; the
semantics anchor) or a surrogate bundle (one batched forward pass for the
whole batch). Finished environments are reset before the next step, drawing
fresh initial states from the reference reset distribution.
"""

from __future__ import annotations

import numpy as np

from .env import DailyProfiles, GridEnv, State
from .grid import GridConfig


def buffer_capacity(n_envs: int, buffer_size: int) -> int:
    """Total rollout-buffer capacity: one slot per env per collected step."""
    if n_envs <= 0 or buffer_size <= 0:
        raise ValueError("n_envs and buffer_size must be positive")
    return n_envs * buffer_size


class VecEnv:
    """n_envs environments stepped in lockstep.

    ``backing`` must expose ``step_batch(states, actions)``; the bundled
    :class:`ReferenceBacking` adapts the single-instance environment to that
    interface. Episodes are truncated at ``episode_length`` steps; truncation
    and terminal states both surface as done flags (and trigger auto-reset).
    """

    def __init__(
        self,
        cfg: GridConfig,
        backing,
        n_envs: int,
        profiles: DailyProfiles | None = None,
        episode_length: int | None = None,
        auto_reset: bool = True,
        seed: int = 0,
    ):
        self.cfg = cfg
        self.backing = backing
        self.n_envs = int(n_envs)
        if self.n_envs <= 0:
            raise ValueError("n_envs must be positive")
        self.episode_length = (
            episode_length if episode_length is not None else cfg.episode_length
        )
        self.auto_reset = auto_reset
        self._reset_env = GridEnv(cfg, profiles)
        self._rng = np.random.default_rng(seed)
        self.states: np.ndarray | None = None
        self._ep_steps = np.zeros(self.n_envs, dtype=int)

    def seed(self, seed: int):
        self._rng = np.random.default_rng(seed)

    def _sample_reset(self) -> np.ndarray:
        s = self._reset_env.reset(seed=int(self._rng.integers(1 << 31)))
        return s.to_vector()

    def reset_all(self) -> np.ndarray:
        self.states = np.stack([self._sample_reset() for _ in range(self.n_envs)])
        self._ep_steps[:] = 0
        return self.states.copy()

    def step(self, actions: np.ndarray):
        """Advance every env once. Returns (states, rewards, dones).

        ``states`` are the post-step (possibly auto-reset) observations;
        ``dones`` marks terminal or truncated episodes.
        """
        if self.states is None:
            raise RuntimeError("call reset_all() before step()")
        actions = np.asarray(actions, dtype=float)
        if actions.shape[0] != self.n_envs:
            raise ValueError(
                f"expected {self.n_envs} actions, got {actions.shape[0]}"
            )
        next_states, rewards, dones, _ = self.backing.step_batch(self.states, actions)
        dones = np.asarray(dones, dtype=bool)
        self._ep_steps += 1
        truncated = self._ep_steps >= self.episode_length
        dones = dones | truncated
        self.states = np.asarray(next_states, dtype=float).copy()
        if self.auto_reset and dones.any():
            for i in np.flatnonzero(dones):
                self.states[i] = self._sample_reset()
                self._ep_steps[i] = 0
        return self.states.copy(), np.asarray(rewards, dtype=float), dones


class ReferenceBacking:
    """Adapts the single reference environment to the batched interface.

    Each row is stepped independently through one (stateless between calls)
    GridEnv; results are identical to stepping n_envs separate instances.
    """

    def __init__(self, cfg: GridConfig, profiles: DailyProfiles | None = None):
        self.cfg = cfg
        self._env = GridEnv(cfg, profiles)

    def step_batch(self, states: np.ndarray, actions: np.ndarray):
        states = np.atleast_2d(states)
        actions = np.atleast_2d(actions)
        b = states.shape[0]
        next_states = np.empty_like(states)
        rewards = np.empty(b)
        dones = np.empty(b, dtype=bool)
        for i in range(b):
            self._env.set_state(State.from_vector(states[i], self.cfg))
            out = self._env.step(actions[i])
            next_states[i] = out.next_state.to_vector()
            rewards[i] = out.reward
            dones[i] = out.done
        return next_states, rewards, dones, {}


class RolloutBuffer:
    """Fixed-size on-policy storage for PPO, laid out (step, env, ...).

    ``add`` writes one lockstep row; the buffer reports full after
    ``buffer_size`` rows, at which point a policy update must consume and
    reset it.
    """

    def __init__(self, n_envs: int, buffer_size: int, state_dim: int, action_dim: int):
        self.n_envs = n_envs
        self.buffer_size = buffer_size
        self.capacity = buffer_capacity(n_envs, buffer_size)
        self.states = np.zeros((buffer_size, n_envs, state_dim))
        self.actions_u = np.zeros((buffer_size, n_envs, action_dim))
        self.rewards = np.zeros((buffer_size, n_envs))
        self.dones = np.zeros((buffer_size, n_envs), dtype=bool)
        self.values = np.zeros((buffer_size, n_envs))
        self.log_probs = np.zeros((buffer_size, n_envs))
        self.pos = 0

    @property
    def full(self) -> bool:
        return self.pos >= self.buffer_size

    def add(self, states, actions_u, rewards, dones, values, log_probs):
        if self.full:
            raise RuntimeError("rollout buffer is full; run an update first")
        i = self.pos
        self.states[i] = states
        self.actions_u[i] = actions_u
        self.rewards[i] = rewards
        self.dones[i] = dones
        self.values[i] = values
        self.log_probs[i] = log_probs
        self.pos += 1

    def reset(self):
        self.pos = 0
