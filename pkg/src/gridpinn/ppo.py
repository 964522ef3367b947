"""Proximal Policy Optimization over vectorized environments.

Gaussian policy with a state-independent learned log-std, tanh squashing to
the configured action box, generalized advantage estimation, and the clipped
surrogate objective. Policy and value networks train jointly under a single
Adam optimizer with global gradient-norm clipping, mirroring the common
published defaults.

The training loop periodically scores the in-training policy with one
deterministic episode in the reference environment; those scores (never the
surrogate's own rewards) drive early stopping and best-policy selection.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .env import Action, GridEnv, State
from .grid import GridConfig
from .neural import AdamW, Mlp
from .vec_env import RolloutBuffer, VecEnv

LOG2PI = float(np.log(2.0 * np.pi))


@dataclass
class PpoConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_range: float = 0.2
    learning_rate: float = 3e-4
    n_epochs: int = 10
    minibatch_size: int = 64
    value_coef: float = 0.5
    entropy_coef: float = 0.0
    max_grad_norm: float = 0.5
    n_envs: int = 8
    buffer_size: int = 64
    eval_every: int = 1
    patience_episodes: int = 20
    total_steps: int = 100_000
    hidden: tuple[int, ...] = (64, 64)
    init_log_std: float = -0.5
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if self.clip_range <= 0:
            raise ValueError("clip_range must be positive")


class GaussianPolicy:
    """Tanh-squashed diagonal Gaussian policy over the config's action box."""

    def __init__(self, cfg: GridConfig, hidden=(64, 64), init_log_std=-0.5, seed=0):
        self.cfg = cfg
        s_lo, s_hi = State.bounds(cfg)
        self._s_mid = 0.5 * (s_lo + s_hi)
        self._s_half = 0.5 * (s_hi - s_lo)
        a_lo, a_hi = Action.bounds(cfg)
        self.a_mid = 0.5 * (a_lo + a_hi)
        self.a_half = 0.5 * (a_hi - a_lo)
        self.act_dim = a_lo.size
        self.net = Mlp(
            [s_lo.size, *hidden, self.act_dim], seed=seed, zero_output_layer=True
        )
        self.log_std = np.full(self.act_dim, float(init_log_std))

    def features(self, states: np.ndarray) -> np.ndarray:
        return (np.asarray(states, dtype=float) - self._s_mid) / self._s_half

    def squash(self, u: np.ndarray) -> np.ndarray:
        return self.a_mid + self.a_half * np.tanh(u)

    def parameters(self) -> list[np.ndarray]:
        return self.net.parameters() + [self.log_std]

    def act(self, states: np.ndarray, rng: np.random.Generator):
        """Sample actions; returns (squashed actions, pre-squash u, log-prob)."""
        mean = self.net.forward(self.features(states))
        std = np.exp(self.log_std)
        u = mean + std * rng.standard_normal(mean.shape)
        logp = self.log_prob_of_u(mean, u)
        return self.squash(u), u, logp

    def mean_action(self, state: np.ndarray) -> np.ndarray:
        mean = self.net.forward(self.features(state))
        return self.squash(mean)

    def log_prob_of_u(self, mean: np.ndarray, u: np.ndarray) -> np.ndarray:
        """Log density of the squashed action sampled via pre-squash ``u``.

        Includes the tanh and box-scaling Jacobian corrections; those terms
        do not depend on the parameters, so probability ratios at fixed u
        reduce to Gaussian ratios.
        """
        std = np.exp(self.log_std)
        z = (u - mean) / std
        gauss = -0.5 * np.sum(z * z + LOG2PI, axis=-1) - np.sum(self.log_std)
        # d(action)/du = a_half * (1 - tanh(u)^2)
        corr = np.sum(
            np.log(self.a_half) + np.log1p(-np.tanh(u) ** 2 + 1e-12), axis=-1
        )
        return gauss - corr


class ValueNet:
    def __init__(self, cfg: GridConfig, hidden=(64, 64), seed=0):
        s_lo, s_hi = State.bounds(cfg)
        self._s_mid = 0.5 * (s_lo + s_hi)
        self._s_half = 0.5 * (s_hi - s_lo)
        self.net = Mlp([s_lo.size, *hidden, 1], seed=seed)

    def features(self, states: np.ndarray) -> np.ndarray:
        return (np.asarray(states, dtype=float) - self._s_mid) / self._s_half

    def predict(self, states: np.ndarray) -> np.ndarray:
        return self.net.forward(self.features(states))[..., 0]

    def parameters(self) -> list[np.ndarray]:
        return self.net.parameters()


def gae(
    rewards: np.ndarray,
    values: np.ndarray,
    dones: np.ndarray,
    gamma: float,
    lam: float,
    last_values: np.ndarray | None = None,
):
    """Generalized advantage estimation over (T, n_envs) arrays.

    ``last_values`` bootstraps the value beyond the buffer end (zeros when
    omitted). Episode boundaries (``dones``) cut the recursion. Returns
    (advantages, returns), both (T, n_envs).
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    dones = np.asarray(dones, dtype=bool)
    if not rewards.shape == values.shape == dones.shape:
        raise ValueError("rewards/values/dones shapes differ")
    t_len = rewards.shape[0]
    last = (
        np.zeros(rewards.shape[1:])
        if last_values is None
        else np.asarray(last_values, dtype=float)
    )
    adv = np.zeros_like(rewards)
    running = np.zeros(rewards.shape[1:])
    next_values = last
    for t in range(t_len - 1, -1, -1):
        alive = ~dones[t]
        delta = rewards[t] + gamma * next_values * alive - values[t]
        running = delta + gamma * lam * alive * running
        adv[t] = running
        next_values = values[t]
    returns = adv + values
    return adv, returns


def _global_grad_clip(grads: list[np.ndarray], max_norm: float) -> float:
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads:
            g *= scale
    return total


def ppo_update(
    buffer: RolloutBuffer,
    policy: GaussianPolicy,
    value_net: ValueNet,
    optimizer: AdamW,
    config: PpoConfig,
    rng: np.random.Generator,
    last_values: np.ndarray,
):
    """One PPO update over a full rollout buffer; returns loss statistics."""
    if not buffer.full:
        raise RuntimeError("buffer must be full before an update")
    adv, returns = gae(
        buffer.rewards,
        buffer.values,
        buffer.dones,
        config.gamma,
        config.gae_lambda,
        last_values,
    )
    n = buffer.capacity
    states = buffer.states.reshape(n, -1)
    actions_u = buffer.actions_u.reshape(n, -1)
    logp_old = buffer.log_probs.reshape(n)
    adv = adv.reshape(n)
    returns = returns.reshape(n)
    adv_n = (adv - adv.mean()) / (adv.std() + 1e-8)

    stats = {"policy_loss": 0.0, "value_loss": 0.0, "entropy": 0.0, "clip_frac": 0.0}
    batches = 0
    params = policy.parameters() + value_net.parameters()
    for _ in range(config.n_epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.minibatch_size):
            mb = order[start : start + config.minibatch_size]
            if mb.size == 0:
                continue
            feats = policy.features(states[mb])
            mean, p_cache = policy.net.forward_cached(feats)
            std = np.exp(policy.log_std)
            u = actions_u[mb]
            z = (u - mean) / std
            logp = (
                -0.5 * np.sum(z * z + LOG2PI, axis=-1) - np.sum(policy.log_std)
            )
            logp_ref = logp_old[mb] + _squash_correction(policy, u)
            ratio = np.exp(logp - logp_ref)
            a_mb = adv_n[mb]

            unclipped = ratio * a_mb
            clipped = np.clip(ratio, 1 - config.clip_range, 1 + config.clip_range) * a_mb
            pol_loss = -np.minimum(unclipped, clipped).mean()
            active = unclipped <= clipped  # gradient flows through the min branch
            dl_dlogp = np.where(active, -a_mb * ratio, 0.0) / mb.size

            d_mean = dl_dlogp[:, None] * (z / std)
            d_logstd_pol = np.sum(dl_dlogp[:, None] * (z * z - 1.0), axis=0)
            # entropy bonus: H = sum(log_std) + const per dim
            d_logstd_ent = -config.entropy_coef * np.ones_like(policy.log_std)
            entropy = float(
                np.sum(policy.log_std) + 0.5 * policy.log_std.size * (LOG2PI + 1.0)
            )

            p_grads, _ = policy.net.backward(p_cache, d_mean)

            v_feats = value_net.features(states[mb])
            v_pred, v_cache = value_net.net.forward_cached(v_feats)
            v_err = v_pred[:, 0] - returns[mb]
            v_loss = 0.5 * float(np.mean(v_err**2))
            dv = (config.value_coef * v_err / mb.size)[:, None]
            v_grads, _ = value_net.net.backward(v_cache, dv)

            grads = p_grads + [d_logstd_pol + d_logstd_ent] + v_grads
            _global_grad_clip(grads, config.max_grad_norm)
            optimizer.step(params, grads)

            stats["policy_loss"] += pol_loss
            stats["value_loss"] += v_loss
            stats["entropy"] += entropy
            stats["clip_frac"] += float((np.abs(ratio - 1) > config.clip_range).mean())
            batches += 1
            if not np.isfinite(pol_loss) or not np.isfinite(v_loss):
                raise FloatingPointError(
                    f"PPO update diverged (policy={pol_loss}, value={v_loss})"
                )
    for k in stats:
        stats[k] /= max(batches, 1)
    return stats


def _squash_correction(policy: GaussianPolicy, u: np.ndarray) -> np.ndarray:
    """log|d action/d u|; stored log-probs subtract this parameter-free term,
    adding it back recovers the Gaussian part for ratio computation."""
    return np.sum(
        np.log(policy.a_half) + np.log1p(-np.tanh(u) ** 2 + 1e-12), axis=-1
    )


def evaluation_episode(
    env: GridEnv, policy: GaussianPolicy, max_steps: int, seed: int | None = None
) -> float:
    """Total reward of one deterministic (mean-action) episode."""
    state = env.reset(seed=seed)
    total = 0.0
    for _ in range(max_steps):
        a = policy.mean_action(state.to_vector())
        out = env.step(a)
        total += out.reward
        state = out.next_state
        if out.done:
            break
    return float(total)


def random_policy_score(
    env: GridEnv, max_steps: int, episodes: int = 3, seed: int = 0
) -> float:
    """Mean episodic reward of uniform random actions; the trivial baseline."""
    rng = np.random.default_rng(seed)
    low, high = Action.bounds(env.cfg)
    scores = []
    for ep in range(episodes):
        env.reset(seed=seed + 1000 + ep)
        total = 0.0
        for _ in range(max_steps):
            out = env.step(rng.uniform(low, high))
            total += out.reward
            if out.done:
                break
        scores.append(total)
    return float(np.mean(scores))


@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)
    best_score: float = -np.inf
    best_update: int = -1
    total_steps: int = 0
    wall_time_s: float = 0.0
    stopped_early: bool = False

    def to_jsonl(self, path: str | Path):
        with open(path, "w") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec) + "\n")

    def summary(self) -> dict:
        return {
            "best_score": self.best_score,
            "best_update": self.best_update,
            "total_steps": self.total_steps,
            "wall_time_s": self.wall_time_s,
            "stopped_early": self.stopped_early,
            "n_updates": len(self.records),
        }


def train(
    venv: VecEnv,
    eval_env: GridEnv,
    config: PpoConfig,
    eval_episode_steps: int | None = None,
) -> tuple[GaussianPolicy, ValueNet, TrainLog]:
    """PPO training loop: collect, update, periodically evaluate on the
    reference environment, stop on stagnation or the step cap."""
    cfg = venv.cfg
    rng = np.random.default_rng(config.seed)
    policy = GaussianPolicy(
        cfg, hidden=config.hidden, init_log_std=config.init_log_std, seed=config.seed
    )
    value_net = ValueNet(cfg, hidden=config.hidden, seed=config.seed + 1)
    params = policy.parameters() + value_net.parameters()
    optimizer = AdamW(params, lr=config.learning_rate, weight_decay=0.0)

    state_dim = State.vector_size(cfg)
    action_dim = Action.vector_size(cfg)
    buffer = RolloutBuffer(config.n_envs, config.buffer_size, state_dim, action_dim)
    eval_steps = (
        eval_episode_steps if eval_episode_steps is not None else cfg.episode_length
    )

    log = TrainLog()
    best_params = [p.copy() for p in params]
    evals_since_best = 0
    steps_done = 0
    update = 0
    t0 = time.perf_counter()

    venv.seed(config.seed + 7)
    states = venv.reset_all()
    while steps_done < config.total_steps:
        buffer.reset()
        for _ in range(config.buffer_size):
            values = value_net.predict(states)
            actions, u, logp = policy.act(states, rng)
            next_states, rewards, dones = venv.step(actions)
            buffer.add(states, u, rewards, dones, values, logp)
            states = next_states
            steps_done += config.n_envs
        last_values = value_net.predict(states)
        stats = ppo_update(buffer, policy, value_net, optimizer, config, rng, last_values)
        update += 1

        record = {
            "update": update,
            "steps": steps_done,
            "wall_time_s": time.perf_counter() - t0,
            **{k: float(v) for k, v in stats.items()},
        }
        if update % config.eval_every == 0:
            score = evaluation_episode(
                eval_env, policy, eval_steps, seed=config.seed + 500 + update
            )
            record["eval_score"] = score
            if score > log.best_score:
                log.best_score = score
                log.best_update = update
                best_params = [p.copy() for p in params]
                evals_since_best = 0
            else:
                evals_since_best += 1
            if evals_since_best >= config.patience_episodes:
                log.records.append(record)
                log.stopped_early = True
                break
        log.records.append(record)

    # restore the best-scoring parameters
    for p, bp in zip(params, best_params):
        p[:] = bp
    log.total_steps = steps_done
    log.wall_time_s = time.perf_counter() - t0
    return policy, value_net, log


def save_policy(policy: GaussianPolicy, value_net: ValueNet, path: str | Path):
    from .neural import save_mlp

    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    save_mlp(policy.net, path / "policy.npz", extra={"log_std": policy.log_std.tolist()})
    save_mlp(value_net.net, path / "value.npz")


def load_policy(cfg: GridConfig, path: str | Path, hidden=(64, 64)) -> GaussianPolicy:
    from .neural import load_mlp

    path = Path(path)
    net, extra = load_mlp(path / "policy.npz")
    policy = GaussianPolicy(cfg, hidden=hidden)
    policy.net = net
    policy.log_std = np.array(extra["log_std"], dtype=float)
    return policy
