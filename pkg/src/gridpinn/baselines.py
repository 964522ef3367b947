"""Data-driven surrogate baselines and the evaluation methodology.

Two dataset flavors mirror how data-driven surrogates are usually fed:
a *generative* set (quasi-random points across the whole state-action box,
each stepped once from an injected state) and an *agent-based* set
(contiguous random-agent trajectories). Both are materialized once and
reused by every baseline.

Baselines regress the flat (state, action) vector onto (next state, reward)
with a mean-absolute-error objective: ``linear`` is an affine map, ``mlp`` a
small tanh network. Both expose the same ``step_batch`` interface as the
physics-informed bundle, so they can back a vectorized environment.

Evaluation is teacher-forced: the surrogate predicts each transition from
the *real* current state while the reference environment advances, so
errors never feed back.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .env import Action, DailyProfiles, GridEnv, State
from .grid import GridConfig
from .neural import AdamW, Mlp
from .sobol import SobolSampler, scale_to


@dataclass
class TransitionDataset:
    kind: str                 # "generative" | "agent_based"
    states: np.ndarray        # (n, state_dim)
    actions: np.ndarray       # (n, action_dim)
    next_states: np.ndarray   # (n, state_dim)
    rewards: np.ndarray       # (n,)
    dones: np.ndarray         # (n,) bool
    seed: int = 0

    @property
    def size(self) -> int:
        return self.states.shape[0]

    def save(self, path: str | Path):
        path = Path(path)
        np.savez_compressed(
            path,
            states=self.states,
            actions=self.actions,
            next_states=self.next_states,
            rewards=self.rewards,
            dones=self.dones,
        )
        manifest = {
            "kind": self.kind,
            "size": self.size,
            "seed": self.seed,
            "schema": ["states", "actions", "next_states", "rewards", "dones"],
        }
        path.with_suffix(".manifest.json").write_text(json.dumps(manifest, indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "TransitionDataset":
        path = Path(path)
        manifest = json.loads(path.with_suffix(".manifest.json").read_text())
        with np.load(path if path.suffix == ".npz" else path.with_suffix(".npz")) as d:
            return cls(
                kind=manifest["kind"],
                states=d["states"],
                actions=d["actions"],
                next_states=d["next_states"],
                rewards=d["rewards"],
                dones=d["dones"].astype(bool),
                seed=manifest["seed"],
            )


def build_generative_dataset(
    env: GridEnv, n: int, seed: int = 0, skip: int = 0
) -> TransitionDataset:
    """Independent transitions from Sobol-sampled (state, action) points.

    Each sample injects the sampled state into the environment, applies the
    sampled action for one step, and records the outcome; consecutive
    samples share nothing.
    """
    cfg = env.cfg
    s_lo, s_hi = State.bounds(cfg)
    a_lo, a_hi = Action.bounds(cfg)
    dim = s_lo.size + a_lo.size
    # the sequence is deterministic; the seed selects a disjoint stretch
    sampler = SobolSampler(dim).skip(skip + seed * max(n, 1))

    states = np.zeros((n, s_lo.size))
    actions = np.zeros((n, a_lo.size))
    next_states = np.zeros((n, s_lo.size))
    rewards = np.zeros(n)
    dones = np.zeros(n, dtype=bool)
    pts = sampler.next_batch(n) if n else np.zeros((0, dim))
    lo = np.concatenate([s_lo, a_lo])
    hi = np.concatenate([s_hi, a_hi])
    phys = scale_to(pts, lo, hi)
    for i in range(n):
        svec = phys[i, : s_lo.size].copy()
        svec[-1] = float(int(svec[-1]) % cfg.aux_modulus)  # aux is a slot index
        avec = phys[i, s_lo.size :]
        env.set_state(State.from_vector(svec, cfg))
        out = env.step(avec)
        states[i] = svec
        actions[i] = avec
        next_states[i] = out.next_state.to_vector()
        rewards[i] = out.reward
        dones[i] = out.done
    return TransitionDataset(
        kind="generative",
        states=states,
        actions=actions,
        next_states=next_states,
        rewards=rewards,
        dones=dones,
        seed=seed,
    )


def build_agent_dataset(env: GridEnv, n: int, seed: int = 0) -> TransitionDataset:
    """Contiguous random-agent trajectories totalling ``n`` transitions."""
    cfg = env.cfg
    rng = np.random.default_rng(seed)
    a_lo, a_hi = Action.bounds(cfg)
    s_dim = State.vector_size(cfg)

    states = np.zeros((n, s_dim))
    actions = np.zeros((n, a_lo.size))
    next_states = np.zeros((n, s_dim))
    rewards = np.zeros(n)
    dones = np.zeros(n, dtype=bool)

    state = env.reset(seed=seed)
    ep_steps = 0
    for i in range(n):
        a = rng.uniform(a_lo, a_hi)
        out = env.step(a)
        states[i] = state.to_vector()
        actions[i] = a
        next_states[i] = out.next_state.to_vector()
        rewards[i] = out.reward
        dones[i] = out.done
        ep_steps += 1
        if out.done or ep_steps >= cfg.episode_length:
            state = env.reset(seed=seed + i + 1)
            ep_steps = 0
        else:
            state = out.next_state
    return TransitionDataset(
        kind="agent_based",
        states=states,
        actions=actions,
        next_states=next_states,
        rewards=rewards,
        dones=dones,
        seed=seed,
    )


class BaselineSurrogate:
    """Regressed transition function with the bundle's step interface.

    Inputs and outputs are scaled to the nominal state/action boxes
    internally; training minimizes the mean absolute error in scaled space.
    """

    def __init__(self, kind: str, cfg: GridConfig, hidden=(64, 64), seed: int = 0):
        if kind not in ("linear", "mlp"):
            raise ValueError(f"unknown baseline kind '{kind}'")
        self.kind = kind
        self.cfg = cfg
        s_lo, s_hi = State.bounds(cfg)
        a_lo, a_hi = Action.bounds(cfg)
        in_lo = np.concatenate([s_lo, a_lo])
        in_hi = np.concatenate([s_hi, a_hi])
        r_lo, r_hi = cfg.reward_clip
        out_lo = np.concatenate([s_lo, [r_lo]])
        out_hi = np.concatenate([s_hi, [r_hi]])
        self._in_mid = 0.5 * (in_lo + in_hi)
        self._in_half = 0.5 * (in_hi - in_lo)
        self._out_mid = 0.5 * (out_lo + out_hi)
        self._out_half = 0.5 * (out_hi - out_lo)
        sizes = (
            [in_lo.size, out_lo.size]
            if kind == "linear"
            else [in_lo.size, *hidden, out_lo.size]
        )
        self.net = Mlp(sizes, seed=seed)
        self.terminal = None  # optional classifier with .predict((s||a)) -> bool

    # -- regression -------------------------------------------------------

    def _encode_in(self, states, actions):
        x = np.concatenate(
            [np.atleast_2d(states), np.atleast_2d(actions)], axis=1
        )
        return (x - self._in_mid) / self._in_half

    def _encode_out(self, next_states, rewards):
        y = np.concatenate(
            [np.atleast_2d(next_states), np.atleast_2d(rewards).T], axis=1
        )
        return (y - self._out_mid) / self._out_half

    def _decode_out(self, y):
        raw = y * self._out_half + self._out_mid
        return raw[:, :-1], raw[:, -1]

    def fit(
        self,
        dataset: TransitionDataset,
        epochs: int = 40,
        batch_size: int = 128,
        lr: float = 1e-3,
        seed: int = 0,
    ) -> dict:
        if dataset.size == 0:
            raise ValueError("dataset is empty")
        x = self._encode_in(dataset.states, dataset.actions)
        y = self._encode_out(dataset.next_states, dataset.rewards)
        if self.kind == "linear" and np.all(np.ptp(x, axis=0) < 1e-12):
            raise ValueError("degenerate dataset: all inputs constant")

        rng = np.random.default_rng(seed)
        opt = AdamW(self.net.parameters(), lr=lr, weight_decay=0.0)
        n = x.shape[0]
        last_mae = np.inf
        for _ in range(epochs):
            order = rng.permutation(n)
            epoch_mae = 0.0
            batches = 0
            for start in range(0, n, batch_size):
                mb = order[start : start + batch_size]
                pred, cache = self.net.forward_cached(x[mb])
                err = pred - y[mb]
                epoch_mae += float(np.abs(err).mean())
                batches += 1
                grad = np.sign(err) / (mb.size * err.shape[1])
                grads, _ = self.net.backward(cache, grad)
                opt.step(self.net.parameters(), grads)
            last_mae = epoch_mae / max(batches, 1)
        return {"train_mae_scaled": last_mae, "epochs": epochs}

    # -- environment-backing interface -------------------------------------

    def predict(self, states: np.ndarray, actions: np.ndarray):
        y = self.net.forward(self._encode_in(states, actions))
        return self._decode_out(np.atleast_2d(y))

    def step_batch(self, states: np.ndarray, actions: np.ndarray):
        states = np.atleast_2d(states)
        actions = np.atleast_2d(actions)
        next_states, rewards = self.predict(states, actions)
        if self.terminal is not None:
            done = self.terminal.predict(states, actions)
        else:
            done = np.zeros(states.shape[0], dtype=bool)
        rewards = np.clip(rewards, *self.cfg.reward_clip)
        return next_states, rewards, done, {}


def fit_baseline(
    kind: str,
    dataset: TransitionDataset,
    cfg: GridConfig,
    hidden=(64, 64),
    epochs: int = 40,
    seed: int = 0,
) -> BaselineSurrogate:
    """Convenience constructor + fit; deterministic for a fixed seed."""
    model = BaselineSurrogate(kind, cfg, hidden=hidden, seed=seed)
    model.fit(dataset, epochs=epochs, seed=seed)
    return model


@dataclass
class Metrics:
    """Per-output-dimension regression quality; last dimension is the reward."""

    mae: np.ndarray
    r2: np.ndarray
    mean_mae: float
    mean_r2: float
    mean_mae_scaled: float = float("nan")
    n_samples: int = 0

    def to_dict(self) -> dict:
        return {
            "mae": self.mae.tolist(),
            "r2": self.r2.tolist(),
            "mean_mae": self.mean_mae,
            "mean_r2": self.mean_r2,
            "mean_mae_scaled": self.mean_mae_scaled,
            "n_samples": self.n_samples,
        }


def compute_metrics(pred: np.ndarray, truth: np.ndarray, scale: np.ndarray | None = None) -> Metrics:
    """MAE and R^2 per output dimension (unweighted means across dims)."""
    pred = np.atleast_2d(pred)
    truth = np.atleast_2d(truth)
    err = pred - truth
    mae = np.abs(err).mean(axis=0)
    ss_res = np.sum(err**2, axis=0)
    ss_tot = np.sum((truth - truth.mean(axis=0)) ** 2, axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        r2 = 1.0 - ss_res / ss_tot
    r2 = np.where(ss_tot > 1e-12, r2, np.where(ss_res <= 1e-12, 1.0, 0.0))
    scaled = float("nan")
    if scale is not None:
        scaled = float((np.abs(err) / scale).mean())
    return Metrics(
        mae=mae,
        r2=r2,
        mean_mae=float(mae.mean()),
        mean_r2=float(r2.mean()),
        mean_mae_scaled=scaled,
        n_samples=pred.shape[0],
    )


def evaluate_surrogate(
    surrogate,
    env: GridEnv,
    policy="random",
    episodes: int = 3,
    max_steps: int | None = None,
    seed: int = 0,
) -> Metrics:
    """Teacher-forced single-step accuracy against the reference environment.

    At every real step the surrogate predicts the transition from the real
    current state; the environment then advances on its own dynamics, so
    surrogate error never accumulates. ``policy`` is "random" or any object
    with ``mean_action(state_vector)``.
    """
    cfg = env.cfg
    rng = np.random.default_rng(seed)
    a_lo, a_hi = Action.bounds(cfg)
    cap = max_steps if max_steps is not None else cfg.episode_length

    preds, truths = [], []
    for ep in range(episodes):
        state = env.reset(seed=seed + 77 + ep)
        for _ in range(cap):
            svec = state.to_vector()
            if policy == "random":
                a = rng.uniform(a_lo, a_hi)
            else:
                a = policy.mean_action(svec)
            nxt, rew, _, _ = surrogate.step_batch(svec[None], np.asarray(a)[None])
            out = env.step(a)
            preds.append(np.concatenate([nxt[0], [float(rew[0])]]))
            truths.append(
                np.concatenate([out.next_state.to_vector(), [out.reward]])
            )
            state = out.next_state
            if out.done:
                break
    s_lo, s_hi = State.bounds(cfg)
    scale = np.concatenate([s_hi - s_lo, [cfg.reward_clip[1] - cfg.reward_clip[0]]])
    return compute_metrics(np.array(preds), np.array(truths), scale=scale)
