"""Physics-informed surrogate of the reference environment.

Three learned components, each trained without a single transition sample
from the reference environment:

* a KKT-informed network that maps raw generator setpoints (plus the
  available capacity) to the feasible-set projection of those setpoints,
* the same for the storage unit, with the state of charge parameterizing
  the feasible set,
* a power-balance network predicting bus voltages and the slack injection
  from aggregated bus powers, trained on the residuals of the power-flow
  equations.

A fourth, supervised piece - a gradient-boosted terminal classifier - flags
transitions where the real solver would fail, since the networks alone
cannot distinguish solvable from unsolvable operating points.

The cascade of the four plus the deterministic daily profiles forms a drop-in
transition function (state, action) -> (next state, reward, done) that is
batched over environments. Slow oracle implementations of each stage (exact
projection, Newton-Raphson) are provided behind the same interfaces; a
bundle assembled from them reproduces the reference environment exactly.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import power_flow
from .env import DailyProfiles, GridEnv, State, StateLayout, StepOutcome, compute_reward, load_reactive
from .gbdt import GbdtClassifier
from .grid import GridConfig, build_admittance, incidence_matrix
from .neural import AdamW, EarlyStopping, Mlp, load_mlp, save_mlp
from .projection import build_des_polytope, build_generator_polytope, project_exact
from .sobol import SobolSampler, scale_to

SOBOL_DIMENSION = 21  # one spare dimension beyond the 20 identified inputs


# ---------------------------------------------------------------------------
# input scaling
# ---------------------------------------------------------------------------


@dataclass
class ScalingTable:
    """Named input ranges used to scale every network input.

    Slots cover the raw action setpoints, the per-generator available
    capacity, the per-bus aggregated injections, and the state of charge.
    Buses without devices get a nominal +-1 MW range so that every slot has
    positive width.
    """

    slots: dict[str, tuple[float, float]]
    order: list[str] = field(default_factory=list)

    @classmethod
    def from_config(cls, cfg: GridConfig) -> "ScalingTable":
        slots: dict[str, tuple[float, float]] = {}
        order: list[str] = []

        def add(name, lo, hi):
            if not lo < hi:
                lo, hi = lo - 1.0, hi + 1.0
            slots[name] = (float(lo), float(hi))
            order.append(name)

        for g in cfg.generators:
            add(f"a_p_g{g.id}", g.p_min, g.p_max)
            add(f"a_q_g{g.id}", g.q_min, g.q_max)
        des = cfg.des
        add("a_p_des", des.p_min, des.p_max)
        add("a_q_des", des.q_min, des.q_max)
        for g in cfg.generators:
            add(f"p_max_g{g.id}", g.p_min, g.p_max)
        for b in cfg.buses:
            devs = [d for d in cfg.devices if d.bus == b.id and d.kind != "slack"]
            if b.id == cfg.buses[0].id:
                s = cfg.slack_device
                add(f"p_bus{b.id}", s.p_min, s.p_max)
                continue
            lo = sum(d.p_min for d in devs)
            hi = sum(d.p_max for d in devs)
            add(f"p_bus{b.id}", lo, hi)
        for b in cfg.buses[1:]:
            devs = [d for d in cfg.devices if d.bus == b.id and d.kind != "slack"]
            lo = sum(d.q_min for d in devs)
            hi = sum(d.q_max for d in devs)
            add(f"q_bus{b.id}", lo, hi)
        add("soc", des.soc_min, des.soc_max)
        return cls(slots=slots, order=order)

    def lower(self, names) -> np.ndarray:
        return np.array([self.slots[n][0] for n in names])

    def upper(self, names) -> np.ndarray:
        return np.array([self.slots[n][1] for n in names])

    def scale(self, x, names) -> np.ndarray:
        """Map physical values onto [-1, 1] per slot."""
        lo, hi = self.lower(names), self.upper(names)
        return 2.0 * (np.asarray(x, dtype=float) - lo) / (hi - lo) - 1.0

    def unscale(self, u, names) -> np.ndarray:
        lo, hi = self.lower(names), self.upper(names)
        return lo + (np.asarray(u, dtype=float) + 1.0) * 0.5 * (hi - lo)

    def half_width(self, names) -> np.ndarray:
        lo, hi = self.lower(names), self.upper(names)
        return 0.5 * (hi - lo)

    def to_dict(self) -> dict:
        return {"order": self.order, "slots": {k: list(v) for k, v in self.slots.items()}}

    @classmethod
    def from_dict(cls, d: dict) -> "ScalingTable":
        return cls(
            slots={k: (float(v[0]), float(v[1])) for k, v in d["slots"].items()},
            order=list(d["order"]),
        )


def gen_feature_names(cfg: GridConfig) -> list[str]:
    names = []
    for g in cfg.generators:
        names += [f"a_p_g{g.id}", f"a_q_g{g.id}", f"p_max_g{g.id}"]
    return names


def des_feature_names(cfg: GridConfig) -> list[str]:
    return ["a_p_des", "a_q_des", "soc"]


def balance_feature_names(cfg: GridConfig) -> list[str]:
    ids = [b.id for b in cfg.buses[1:]]
    return [f"p_bus{i}" for i in ids] + [f"q_bus{i}" for i in ids]


def sobol_slot_names(cfg: GridConfig) -> list[str]:
    """Canonical order of the identified training-sampler dimensions.

    The sampler itself has SOBOL_DIMENSION dims; the final dimension is
    reserved (drawn but unused).
    """
    names = []
    for g in cfg.generators:
        names += [f"a_p_g{g.id}", f"a_q_g{g.id}"]
    names += ["a_p_des", "a_q_des"]
    names += [f"p_max_g{g.id}" for g in cfg.generators]
    names += [f"p_bus{b.id}" for b in cfg.buses]
    names += [f"q_bus{b.id}" for b in cfg.buses[1:]]
    names += ["soc"]
    return names


# ---------------------------------------------------------------------------
# component models: neural and oracle implementations of each cascade stage
# ---------------------------------------------------------------------------


class KktGenModel:
    """Neural projection of generator setpoints onto their feasible sets.

    One network serves all non-slack generators jointly. The primal head is
    residual on the setpoint, so an untrained (zero output layer) network
    already acts as the identity map.
    """

    N_ROWS = 7

    def __init__(self, net: Mlp, cfg: GridConfig, scaling: ScalingTable):
        self.net = net
        self.cfg = cfg
        self.scaling = scaling
        self.gens = cfg.generators
        self.names = gen_feature_names(cfg)
        hw = []
        for g in self.gens:
            hw.append(self.scaling.half_width([f"a_p_g{g.id}", f"a_q_g{g.id}"]))
        self.primal_scale = np.stack(hw)                      # (n_gen, 2)
        self.dual_scale = self.primal_scale.max(axis=1)       # (n_gen,)

    @classmethod
    def fresh(cls, cfg: GridConfig, scaling: ScalingTable, hidden=(64, 64), seed=0):
        n_gen = len(cfg.generators)
        net = Mlp(
            [3 * n_gen, *hidden, n_gen * (2 + cls.N_ROWS)],
            seed=seed,
            zero_output_layer=True,
        )
        return cls(net, cfg, scaling)

    def _features(self, a_pq: np.ndarray, p_max: np.ndarray) -> np.ndarray:
        cols = []
        for k in range(len(self.gens)):
            cols += [a_pq[:, k, 0], a_pq[:, k, 1], p_max[:, k]]
        return self.scaling.scale(np.stack(cols, axis=1), self.names)

    def _box_base(self, a_pq: np.ndarray, p_max: np.ndarray):
        """Exact projection onto the box rows of each feasible set plus the
        matching multipliers. Both heads are residual on this base, so
        capability-line corrections are all the network has to learn."""
        b = a_pq.shape[0]
        n_gen = len(self.gens)
        base = np.empty_like(a_pq)
        lam = np.zeros((b, n_gen, self.N_ROWS))
        for k, g in enumerate(self.gens):
            ub = np.minimum(g.p_max, p_max[:, k])
            ap, aq = a_pq[:, k, 0], a_pq[:, k, 1]
            base[:, k, 0] = np.clip(ap, g.p_min, ub)
            base[:, k, 1] = np.clip(aq, g.q_min, g.q_max)
            lam[:, k, 0] = np.maximum(g.p_min - ap, 0.0)
            over_p = np.maximum(ap - ub, 0.0)
            cap_binds = p_max[:, k] <= g.p_max
            lam[:, k, 1] = np.where(cap_binds, 0.0, over_p)
            lam[:, k, 2] = np.where(cap_binds, over_p, 0.0)
            lam[:, k, 3] = np.maximum(g.q_min - aq, 0.0)
            lam[:, k, 4] = np.maximum(aq - g.q_max, 0.0)
        return base, lam

    def _heads(self, raw: np.ndarray, base: np.ndarray, base_duals: np.ndarray):
        n_gen = len(self.gens)
        raw = raw.reshape(raw.shape[0], n_gen, 2 + self.N_ROWS)
        primal = base + raw[:, :, :2] * self.primal_scale
        duals = base_duals + raw[:, :, 2:] * self.dual_scale[None, :, None]
        return primal, duals

    def predict(self, a_pq: np.ndarray, p_max: np.ndarray) -> np.ndarray:
        """(B, n_gen, 2) projected (P, Q) for raw setpoints and capacities."""
        primal, _, _ = self.predict_with_duals(a_pq, p_max)
        return primal

    def predict_with_duals(self, a_pq, p_max):
        out, cache = self.net.forward_cached(self._features(a_pq, p_max))
        base, base_duals = self._box_base(a_pq, p_max)
        primal, duals = self._heads(out, base, base_duals)
        return primal, duals, cache


class KktDesModel:
    """Neural projection for the storage unit, feasible set keyed by SoC."""

    N_ROWS = 10

    def __init__(self, net: Mlp, cfg: GridConfig, scaling: ScalingTable):
        self.net = net
        self.cfg = cfg
        self.scaling = scaling
        self.des = cfg.des
        self.names = des_feature_names(cfg)
        self.primal_scale = scaling.half_width(["a_p_des", "a_q_des"])
        self.dual_scale = float(self.primal_scale.max())

    @classmethod
    def fresh(cls, cfg: GridConfig, scaling: ScalingTable, hidden=(64, 64), seed=1):
        net = Mlp([3, *hidden, 2 + cls.N_ROWS], seed=seed, zero_output_layer=True)
        return cls(net, cfg, scaling)

    def _features(self, a_pq: np.ndarray, soc: np.ndarray) -> np.ndarray:
        x = np.column_stack([a_pq[:, 0], a_pq[:, 1], soc])
        return self.scaling.scale(x, self.names)

    def _box_base(self, a_pq: np.ndarray, soc: np.ndarray):
        """Exact projection onto the box and SoC-headroom rows (all of which
        bound single coordinates) with matching multipliers; capability
        lines are left to the net."""
        d = self.des
        dt = self.cfg.delta_t_hours
        soc_lo = (soc - d.soc_max) / (d.efficiency * dt)
        soc_hi = d.efficiency * (soc - d.soc_min) / dt
        p_lo = np.maximum(d.p_min, soc_lo)
        p_hi = np.minimum(d.p_max, soc_hi)
        ap, aq = a_pq[:, 0], a_pq[:, 1]
        base = np.empty_like(a_pq)
        base[:, 0] = np.clip(ap, p_lo, p_hi)
        base[:, 1] = np.clip(aq, d.q_min, d.q_max)
        lam = np.zeros((a_pq.shape[0], self.N_ROWS))
        under_p = np.maximum(p_lo - ap, 0.0)
        over_p = np.maximum(ap - p_hi, 0.0)
        lo_is_soc = soc_lo >= d.p_min
        hi_is_soc = soc_hi <= d.p_max
        lam[:, 0] = np.where(lo_is_soc, 0.0, under_p)
        lam[:, 8] = np.where(lo_is_soc, under_p, 0.0)
        lam[:, 1] = np.where(hi_is_soc, 0.0, over_p)
        lam[:, 9] = np.where(hi_is_soc, over_p, 0.0)
        lam[:, 2] = np.maximum(d.q_min - aq, 0.0)
        lam[:, 3] = np.maximum(aq - d.q_max, 0.0)
        return base, lam

    def _heads(self, raw: np.ndarray, base: np.ndarray, base_duals: np.ndarray):
        primal = base + raw[:, :2] * self.primal_scale
        duals = base_duals + raw[:, 2:] * self.dual_scale
        return primal, duals

    def predict(self, a_pq: np.ndarray, soc: np.ndarray) -> np.ndarray:
        primal, _, _ = self.predict_with_duals(a_pq, soc)
        return primal

    def predict_with_duals(self, a_pq, soc):
        out, cache = self.net.forward_cached(self._features(a_pq, soc))
        base, base_duals = self._box_base(a_pq, soc)
        primal, duals = self._heads(out, base, base_duals)
        return primal, duals, cache


class PinnBalanceModel:
    """Power-balance network: bus injections -> voltages + slack injection.

    Output heads parameterize deviations from the flat profile so the
    zero-initialized network starts at the no-load solution. ``solvable`` is
    always true here: the network cannot tell, which is exactly why the
    bundle carries a terminal classifier.
    """

    V_SCALE = 0.25
    TH_SCALE = 0.5

    def __init__(self, net: Mlp, cfg: GridConfig, scaling: ScalingTable):
        self.net = net
        self.cfg = cfg
        self.scaling = scaling
        self.names = balance_feature_names(cfg)
        self.base = cfg.base_power_mva
        self._n = cfg.n_bus

    @classmethod
    def fresh(cls, cfg: GridConfig, scaling: ScalingTable, hidden=(64, 64), seed=2):
        n = cfg.n_bus
        net = Mlp(
            [2 * (n - 1), *hidden, 2 * (n - 1) + 2], seed=seed, zero_output_layer=True
        )
        return cls(net, cfg, scaling)

    def _features(self, p_bus_mw: np.ndarray, q_bus_mw: np.ndarray) -> np.ndarray:
        return self.scaling.scale(
            np.concatenate([p_bus_mw, q_bus_mw], axis=1), self.names
        )

    def _heads(self, raw: np.ndarray):
        b = raw.shape[0]
        n = self._n
        v = np.ones((b, n))
        th = np.zeros((b, n))
        v[:, 1:] += self.V_SCALE * raw[:, : n - 1]
        th[:, 1:] = self.TH_SCALE * raw[:, n - 1 : 2 * (n - 1)]
        slack_p = raw[:, -2]
        slack_q = raw[:, -1]
        return v, th, slack_p, slack_q

    def predict(self, p_bus_mw: np.ndarray, q_bus_mw: np.ndarray) -> dict:
        out = self.net.forward(self._features(p_bus_mw, q_bus_mw))
        v, th, sp, sq = self._heads(out)
        return {
            "v_mag": v,
            "theta": th,
            "slack_p": sp,
            "slack_q": sq,
            "solvable": np.ones(v.shape[0], dtype=bool),
        }


class ExactGenModel:
    """Oracle stage: exact per-generator projection."""

    def __init__(self, cfg: GridConfig):
        self.gens = cfg.generators

    def predict(self, a_pq: np.ndarray, p_max: np.ndarray) -> np.ndarray:
        b = a_pq.shape[0]
        out = np.empty_like(a_pq)
        for i in range(b):
            for k, g in enumerate(self.gens):
                poly = build_generator_polytope(g, p_max[i, k])
                out[i, k], _ = project_exact(a_pq[i, k], poly)
        return out


class ExactDesModel:
    def __init__(self, cfg: GridConfig):
        self.des = cfg.des
        self.delta_t = cfg.delta_t_hours

    def predict(self, a_pq: np.ndarray, soc: np.ndarray) -> np.ndarray:
        out = np.empty_like(a_pq)
        for i in range(a_pq.shape[0]):
            poly = build_des_polytope(self.des, soc[i], self.delta_t)
            out[i], _ = project_exact(a_pq[i], poly)
        return out


class NewtonBalanceModel:
    """Oracle stage: Newton-Raphson solve per batch row."""

    def __init__(self, cfg: GridConfig, tol=power_flow.DEFAULT_TOL, max_iter=power_flow.DEFAULT_MAX_ITER):
        self.cfg = cfg
        self.ymat = build_admittance(cfg)
        self.tol = tol
        self.max_iter = max_iter

    def predict(self, p_bus_mw: np.ndarray, q_bus_mw: np.ndarray) -> dict:
        b = p_bus_mw.shape[0]
        n = self.cfg.n_bus
        base = self.cfg.base_power_mva
        v = np.ones((b, n))
        th = np.zeros((b, n))
        sp = np.zeros(b)
        sq = np.zeros(b)
        ok = np.zeros(b, dtype=bool)
        for i in range(b):
            sol = power_flow.solve(
                p_bus_mw[i] / base, q_bus_mw[i] / base, self.ymat,
                tol=self.tol, max_iter=self.max_iter,
            )
            ok[i] = sol.converged
            if sol.converged:
                v[i], th[i] = sol.v_mag, sol.theta
                sp[i], sq[i] = sol.slack_p, sol.slack_q
        return {"v_mag": v, "theta": th, "slack_p": sp, "slack_q": sq, "solvable": ok}


class GbdtTerminal:
    """Terminal decision from the gradient-boosted classifier on (s, a)."""

    def __init__(self, clf: GbdtClassifier):
        self.clf = clf

    def predict(self, state_vec: np.ndarray, action_vec: np.ndarray) -> np.ndarray:
        return self.clf.predict(np.concatenate([state_vec, action_vec], axis=1))


class SolverTerminal:
    """Terminal decision deferred to the balance stage's solvable flag."""

    def predict(self, state_vec, action_vec):
        return None  # bundle falls back to the balance model's flag


class NeverTerminal:
    def predict(self, state_vec, action_vec):
        return np.zeros(state_vec.shape[0], dtype=bool)


# ---------------------------------------------------------------------------
# the cascaded transition function
# ---------------------------------------------------------------------------


class SurrogateBundle:
    """Composed transition function (state, action) -> (next state, reward, done).

    ``step_batch`` evaluates every stage once for the whole batch; the
    reward re-uses the environment's closed-form implementation so any
    surrogate/environment reward gap traces back to state prediction error
    alone.
    """

    def __init__(
        self,
        cfg: GridConfig,
        profiles: DailyProfiles,
        gen_model,
        des_model,
        balance_model,
        terminal=None,
        scaling: ScalingTable | None = None,
    ):
        self.cfg = cfg
        self.profiles = profiles
        self.gen_model = gen_model
        self.des_model = des_model
        self.balance_model = balance_model
        self.terminal = terminal if terminal is not None else SolverTerminal()
        self.scaling = scaling if scaling is not None else ScalingTable.from_config(cfg)
        self.layout = StateLayout.from_config(cfg)
        self._inc = incidence_matrix(cfg)
        devs = cfg.devices
        self._slack_pos = next(i for i, d in enumerate(devs) if d.kind == "slack")
        self._load_pos = np.array([i for i, d in enumerate(devs) if d.is_load])
        self._gen_pos = np.array([i for i, d in enumerate(devs) if d.is_generator])
        self._des_pos = next(i for i, d in enumerate(devs) if d.is_des)
        self._nonslack_pos = np.array([i for i, d in enumerate(devs) if d.kind != "slack"])
        self._load_tan = np.array(
            [np.tan(np.arccos(d.power_factor)) for d in cfg.loads]
        )

    @classmethod
    def oracle(cls, cfg: GridConfig, profiles: DailyProfiles | None = None,
               tol=power_flow.DEFAULT_TOL, max_iter=power_flow.DEFAULT_MAX_ITER):
        """Bundle with every learned stage replaced by its exact counterpart."""
        profiles = profiles if profiles is not None else DailyProfiles.default(cfg)
        return cls(
            cfg,
            profiles,
            gen_model=ExactGenModel(cfg),
            des_model=ExactDesModel(cfg),
            balance_model=NewtonBalanceModel(cfg, tol=tol, max_iter=max_iter),
            terminal=SolverTerminal(),
        )

    # -- stepping ---------------------------------------------------------

    def step_batch(self, state_vec: np.ndarray, action_vec: np.ndarray):
        """Vectorized transition for (B, state) x (B, action).

        Returns (next_state_vec, rewards, dones, info). Rows flagged done
        keep their input state and receive the clipped minimum reward.
        """
        cfg = self.cfg
        lay = self.layout
        s = np.atleast_2d(np.asarray(state_vec, dtype=float))
        a = np.atleast_2d(np.asarray(action_vec, dtype=float))
        if s.shape[0] != a.shape[0]:
            raise ValueError("state/action batch sizes differ")
        b = s.shape[0]
        n_gen = lay.n_gen

        soc = s[:, lay.soc]
        aux = s[:, lay.aux].astype(int)
        aux_next = (aux + 1) % cfg.aux_modulus

        load_p = self.profiles.loads_at(aux_next)          # (B, n_load)
        load_q = load_p * self._load_tan
        p_max_next = self.profiles.p_max_at(aux_next)      # (B, n_gen)

        a_gen = np.stack([a[:, :n_gen], a[:, n_gen : 2 * n_gen]], axis=2)
        a_des = a[:, 2 * n_gen : 2 * n_gen + 2]

        gen_pq = self.gen_model.predict(a_gen, p_max_next)  # (B, n_gen, 2)
        des_pq = self.des_model.predict(a_des, soc)         # (B, 2)

        des = cfg.des
        dt = cfg.delta_t_hours
        p_des = des_pq[:, 0]
        soc_next = np.where(
            p_des <= 0.0,
            soc - des.efficiency * dt * p_des,
            soc - (dt / des.efficiency) * p_des,
        )
        soc_next = np.clip(soc_next, des.soc_min, des.soc_max)

        n_dev = lay.n_dev
        p_dev = np.zeros((b, n_dev))
        q_dev = np.zeros((b, n_dev))
        p_dev[:, self._load_pos] = load_p
        q_dev[:, self._load_pos] = load_q
        p_dev[:, self._gen_pos] = gen_pq[:, :, 0]
        q_dev[:, self._gen_pos] = gen_pq[:, :, 1]
        p_dev[:, self._des_pos] = des_pq[:, 0]
        q_dev[:, self._des_pos] = des_pq[:, 1]

        p_bus = p_dev[:, self._nonslack_pos] @ self._inc.T  # (B, n_bus-1) MW
        q_bus = q_dev[:, self._nonslack_pos] @ self._inc.T

        bal = self.balance_model.predict(p_bus, q_bus)
        base = cfg.base_power_mva
        p_dev[:, self._slack_pos] = bal["slack_p"] * base
        q_dev[:, self._slack_pos] = bal["slack_q"] * base

        flows = power_flow.branch_flows(bal["v_mag"], bal["theta"], cfg)
        reward, de1, de2, de3, phi = compute_reward(
            cfg,
            p_dev,
            p_dev[:, self._des_pos],
            p_max_next,
            p_dev[:, self._gen_pos],
            bal["v_mag"],
            flows.s_from,
            flows.s_to,
        )

        done = self.terminal.predict(s, a)
        if done is None:
            done = ~bal["solvable"]
        else:
            done = np.asarray(done, dtype=bool) | ~bal["solvable"]

        next_vec = np.concatenate(
            [
                p_dev,
                q_dev,
                soc_next[:, None],
                p_max_next,
                aux_next[:, None].astype(float),
            ],
            axis=1,
        )
        reward = np.where(done, cfg.reward_clip[0], reward)
        if done.any():
            next_vec[done] = s[done]

        info = {
            "v_mag": bal["v_mag"],
            "theta": bal["theta"],
            "s_from": flows.s_from,
            "s_to": flows.s_to,
            "de1": de1,
            "de2": de2,
            "de3": de3,
            "phi": phi,
        }
        return next_vec, reward, done, info

    def step(self, state: State, action) -> StepOutcome:
        """Single-transition convenience wrapper around :meth:`step_batch`."""
        a = action if isinstance(action, np.ndarray) else np.asarray(
            action.to_vector() if hasattr(action, "to_vector") else action
        )
        nxt, r, d, info = self.step_batch(state.to_vector()[None], a[None])
        return StepOutcome(
            next_state=State.from_vector(nxt[0], self.cfg),
            reward=float(r[0]),
            done=bool(d[0]),
            info={k: v[0] for k, v in info.items()},
        )


# ---------------------------------------------------------------------------
# label-free training loops
# ---------------------------------------------------------------------------


@dataclass
class TrainReport:
    steps: int
    final_loss: float
    best_loss: float
    stopped_early: bool
    loss_history: list[float]
    wall_time_s: float


def _kkt_batch_loss(primal, duals, setpoint, g_rows, h):
    """Summed KKT residual loss and its gradients w.r.t. primal and duals.

    primal (B, 2), duals (B, m), setpoint (B, 2), g_rows (m, 2), h (B, m).
    Loss per sample: ||stat||^2 + ||(Gx-h)+||^2 + ||(-lam)+||^2 + ||lam*(Gx-h)||^2.
    """
    slack = primal @ g_rows.T - h                 # (B, m)
    stat = (primal - setpoint) + duals @ g_rows   # (B, 2)
    pos_slack = np.maximum(slack, 0.0)
    neg_dual = np.maximum(-duals, 0.0)
    comp = duals * slack

    loss = (
        np.sum(stat**2, axis=1)
        + np.sum(pos_slack**2, axis=1)
        + np.sum(neg_dual**2, axis=1)
        + np.sum(comp**2, axis=1)
    )
    d_primal = (
        2.0 * stat
        + 2.0 * pos_slack @ g_rows
        + 2.0 * (comp * duals) @ g_rows
    )
    d_duals = 2.0 * stat @ g_rows.T - 2.0 * neg_dual + 2.0 * comp * slack
    return loss, d_primal, d_duals


def _gen_h_matrix(cfg: GridConfig, p_max: np.ndarray) -> list[np.ndarray]:
    """Per-generator h vectors, (B, 7) each, for sampled capacities."""
    out = []
    for k, g in enumerate(cfg.generators):
        (t1, r1), (t2, r2) = g.flex_lines
        b = p_max.shape[0]
        h = np.empty((b, 7))
        h[:, 0] = -g.p_min
        h[:, 1] = g.p_max
        h[:, 2] = p_max[:, k]
        h[:, 3] = -g.q_min
        h[:, 4] = g.q_max
        h[:, 5] = r1
        h[:, 6] = -r2
        out.append(h)
    return out


def _des_h_matrix(cfg: GridConfig, soc: np.ndarray) -> np.ndarray:
    d = cfg.des
    dt = cfg.delta_t_hours
    (t1, r1), (t2, r2), (t3, r3), (t4, r4) = d.flex_lines
    b = soc.shape[0]
    h = np.empty((b, 10))
    h[:, 0] = -d.p_min
    h[:, 1] = d.p_max
    h[:, 2] = -d.q_min
    h[:, 3] = d.q_max
    h[:, 4] = r1
    h[:, 5] = -r2
    h[:, 6] = r3
    h[:, 7] = -r4
    h[:, 8] = -(soc - d.soc_max) / (d.efficiency * dt)
    h[:, 9] = d.efficiency * (soc - d.soc_min) / dt
    return h


def _gen_g_rows(device) -> np.ndarray:
    (t1, _), (t2, _) = device.flex_lines
    return np.array(
        [[-1.0, 0.0], [1.0, 0.0], [1.0, 0.0], [0.0, -1.0], [0.0, 1.0],
         [-t1, 1.0], [t2, -1.0]]
    )


def _des_g_rows(device) -> np.ndarray:
    (t1, _), (t2, _), (t3, _), (t4, _) = device.flex_lines
    return np.array(
        [[-1.0, 0.0], [1.0, 0.0], [0.0, -1.0], [0.0, 1.0],
         [-t1, 1.0], [t2, -1.0], [-t3, 1.0], [t4, -1.0],
         [-1.0, 0.0], [1.0, 0.0]]
    )


@dataclass
class SurrogateTrainConfig:
    hidden: tuple[int, ...] = (64, 64)
    learning_rate: float = 1e-5
    batch_size: int = 64
    patience_steps: int = 5000
    max_steps: int = 200_000
    weight_decay: float = 1e-4
    seed: int = 0
    log_every: int = 500


def train_gen_net(
    cfg: GridConfig,
    scaling: ScalingTable | None = None,
    train_cfg: SurrogateTrainConfig | None = None,
) -> tuple[KktGenModel, TrainReport]:
    """Fit the generator KKT network on Sobol-sampled setpoints; no labels."""
    scaling = scaling or ScalingTable.from_config(cfg)
    tc = train_cfg or SurrogateTrainConfig()
    model = KktGenModel.fresh(cfg, scaling, hidden=tc.hidden, seed=tc.seed)
    gens = cfg.generators
    n_gen = len(gens)
    g_rows = [_gen_g_rows(g) for g in gens]

    sampler = SobolSampler(SOBOL_DIMENSION)
    slot_names = sobol_slot_names(cfg)
    feat_idx = [slot_names.index(n) for n in gen_feature_names(cfg)]
    lo = scaling.lower(gen_feature_names(cfg))
    hi = scaling.upper(gen_feature_names(cfg))

    opt = AdamW(
        model.net.parameters(), lr=tc.learning_rate, weight_decay=tc.weight_decay
    )
    stopper = EarlyStopping(tc.patience_steps)
    history = []
    t0 = time.perf_counter()
    step = 0
    loss_val = np.inf
    ema = None
    stopped = False
    for step in range(1, tc.max_steps + 1):
        pts = sampler.next_batch(tc.batch_size)[:, feat_idx]
        phys = scale_to(pts, lo, hi)                     # (B, 3*n_gen)
        a_pq = np.stack(
            [phys[:, 0::3], phys[:, 1::3]], axis=2
        )                                                # (B, n_gen, 2)
        p_max = phys[:, 2::3]

        primal, duals, cache = model.predict_with_duals(a_pq, p_max)
        h_per_gen = _gen_h_matrix(cfg, p_max)

        grad_raw = np.zeros((tc.batch_size, n_gen, 2 + KktGenModel.N_ROWS))
        total = 0.0
        for k in range(n_gen):
            loss, d_p, d_l = _kkt_batch_loss(
                primal[:, k], duals[:, k], a_pq[:, k], g_rows[k], h_per_gen[k]
            )
            total += loss.sum()
            grad_raw[:, k, :2] = d_p * model.primal_scale[k]
            grad_raw[:, k, 2:] = d_l * model.dual_scale[k]
        loss_val = total / tc.batch_size
        grad_out = grad_raw.reshape(tc.batch_size, -1) / tc.batch_size
        if not np.isfinite(loss_val):
            raise FloatingPointError(
                f"generator net training diverged at step {step} (loss={loss_val})"
            )
        grads, _ = model.net.backward(cache, grad_out)
        opt.step(model.net.parameters(), grads)

        # monitor a smoothed loss: raw minibatch noise would reset the
        # patience window on every lucky batch
        ema = loss_val if ema is None else 0.99 * ema + 0.01 * loss_val
        if step % tc.log_every == 0:
            history.append(float(ema))
        if stopper.update(float(ema)):
            stopped = True
            break

    return model, TrainReport(
        steps=step,
        final_loss=float(loss_val),
        best_loss=float(stopper.best),
        stopped_early=stopped,
        loss_history=history,
        wall_time_s=time.perf_counter() - t0,
    )


def train_des_net(
    cfg: GridConfig,
    scaling: ScalingTable | None = None,
    train_cfg: SurrogateTrainConfig | None = None,
) -> tuple[KktDesModel, TrainReport]:
    """Fit the storage KKT network; the sampled SoC varies the feasible set."""
    scaling = scaling or ScalingTable.from_config(cfg)
    tc = train_cfg or SurrogateTrainConfig()
    model = KktDesModel.fresh(cfg, scaling, hidden=tc.hidden, seed=tc.seed + 1)
    g_rows = _des_g_rows(cfg.des)

    sampler = SobolSampler(SOBOL_DIMENSION)
    slot_names = sobol_slot_names(cfg)
    names = des_feature_names(cfg)
    feat_idx = [slot_names.index(n) for n in names]
    lo, hi = scaling.lower(names), scaling.upper(names)

    opt = AdamW(
        model.net.parameters(), lr=tc.learning_rate, weight_decay=tc.weight_decay
    )
    stopper = EarlyStopping(tc.patience_steps)
    history = []
    t0 = time.perf_counter()
    step = 0
    loss_val = np.inf
    ema = None
    stopped = False
    for step in range(1, tc.max_steps + 1):
        pts = sampler.next_batch(tc.batch_size)[:, feat_idx]
        phys = scale_to(pts, lo, hi)
        a_pq = phys[:, :2]
        soc = phys[:, 2]

        primal, duals, cache = model.predict_with_duals(a_pq, soc)
        h = _des_h_matrix(cfg, soc)
        loss, d_p, d_l = _kkt_batch_loss(primal, duals, a_pq, g_rows, h)
        loss_val = loss.mean()
        if not np.isfinite(loss_val):
            raise FloatingPointError(
                f"storage net training diverged at step {step} (loss={loss_val})"
            )
        grad_raw = np.concatenate(
            [d_p * model.primal_scale, d_l * model.dual_scale], axis=1
        ) / tc.batch_size
        grads, _ = model.net.backward(cache, grad_raw)
        opt.step(model.net.parameters(), grads)

        ema = loss_val if ema is None else 0.99 * ema + 0.01 * loss_val
        if step % tc.log_every == 0:
            history.append(float(ema))
        if stopper.update(float(ema)):
            stopped = True
            break

    return model, TrainReport(
        steps=step,
        final_loss=float(loss_val),
        best_loss=float(stopper.best),
        stopped_early=stopped,
        loss_history=history,
        wall_time_s=time.perf_counter() - t0,
    )


def train_balance_net(
    cfg: GridConfig,
    scaling: ScalingTable | None = None,
    train_cfg: SurrogateTrainConfig | None = None,
) -> tuple[PinnBalanceModel, TrainReport]:
    """Fit the power-balance network on power-flow residuals alone.

    The loss per sample is the sum of squared active/reactive residuals at
    the non-slack buses plus the squared error of the slack head against the
    injection implied at the slack bus by the predicted voltages.
    """
    scaling = scaling or ScalingTable.from_config(cfg)
    tc = train_cfg or SurrogateTrainConfig()
    model = PinnBalanceModel.fresh(cfg, scaling, hidden=tc.hidden, seed=tc.seed + 2)
    ymat = build_admittance(cfg)
    n = cfg.n_bus
    base = cfg.base_power_mva

    sampler = SobolSampler(SOBOL_DIMENSION)
    slot_names = sobol_slot_names(cfg)
    names = balance_feature_names(cfg)
    feat_idx = [slot_names.index(nm) for nm in names]
    lo, hi = scaling.lower(names), scaling.upper(names)

    opt = AdamW(
        model.net.parameters(), lr=tc.learning_rate, weight_decay=tc.weight_decay
    )
    stopper = EarlyStopping(tc.patience_steps)
    history = []
    t0 = time.perf_counter()
    step = 0
    loss_val = np.inf
    ema = None
    stopped = False
    for step in range(1, tc.max_steps + 1):
        pts = sampler.next_batch(tc.batch_size)[:, feat_idx]
        phys = scale_to(pts, lo, hi)                 # MW columns p then q
        p_mw, q_mw = phys[:, : n - 1], phys[:, n - 1 :]
        p_pu, q_pu = p_mw / base, q_mw / base

        feats = model._features(p_mw, q_mw)
        out, cache = model.net.forward_cached(feats)
        v, th, sp, sq = model._heads(out)

        p_calc, q_calc = power_flow.calc_injections(v, th, ymat)
        rp = p_pu - p_calc[:, 1:]
        rq = q_pu - q_calc[:, 1:]
        sp_err = sp - p_calc[:, 0]
        sq_err = sq - q_calc[:, 0]
        loss_val = float(
            np.mean(
                np.sum(rp**2, axis=1) + np.sum(rq**2, axis=1) + sp_err**2 + sq_err**2
            )
        )
        if not np.isfinite(loss_val):
            raise FloatingPointError(
                f"balance net training diverged at step {step} (loss={loss_val})"
            )

        dp_dth, dp_dv, dq_dth, dq_dv = power_flow.injection_jacobian(v, th, ymat)
        # residual terms: d(-2 r . dcalc); slack head couples via implied injection
        dv = (
            -2.0 * np.einsum("bi,bij->bj", rp, dp_dv[:, 1:, 1:])
            - 2.0 * np.einsum("bi,bij->bj", rq, dq_dv[:, 1:, 1:])
            - 2.0 * sp_err[:, None] * dp_dv[:, 0, 1:]
            - 2.0 * sq_err[:, None] * dq_dv[:, 0, 1:]
        )
        dth = (
            -2.0 * np.einsum("bi,bij->bj", rp, dp_dth[:, 1:, 1:])
            - 2.0 * np.einsum("bi,bij->bj", rq, dq_dth[:, 1:, 1:])
            - 2.0 * sp_err[:, None] * dp_dth[:, 0, 1:]
            - 2.0 * sq_err[:, None] * dq_dth[:, 0, 1:]
        )
        grad_out = np.concatenate(
            [
                dv * PinnBalanceModel.V_SCALE,
                dth * PinnBalanceModel.TH_SCALE,
                2.0 * sp_err[:, None],
                2.0 * sq_err[:, None],
            ],
            axis=1,
        ) / tc.batch_size
        grads, _ = model.net.backward(cache, grad_out)
        opt.step(model.net.parameters(), grads)

        ema = loss_val if ema is None else 0.99 * ema + 0.01 * loss_val
        if step % tc.log_every == 0:
            history.append(float(ema))
        if stopper.update(float(ema)):
            stopped = True
            break

    return model, TrainReport(
        steps=step,
        final_loss=loss_val,
        best_loss=float(stopper.best),
        stopped_early=stopped,
        loss_history=history,
        wall_time_s=time.perf_counter() - t0,
    )


def train_terminal_clf(
    features: np.ndarray,
    labels: np.ndarray,
    holdout_fraction: float = 0.2,
    seed: int = 0,
    **gbdt_kwargs,
) -> tuple[GbdtClassifier, float]:
    """Fit the terminal classifier on labeled (state||action) -> done data.

    Returns (classifier, held-out accuracy). Raises if only one class is
    present.
    """
    x = np.asarray(features, dtype=float)
    y = np.asarray(labels, dtype=float).ravel()
    rng = np.random.default_rng(seed)
    order = rng.permutation(x.shape[0])
    n_hold = max(1, int(holdout_fraction * x.shape[0]))
    hold, train = order[:n_hold], order[n_hold:]
    clf = GbdtClassifier(**gbdt_kwargs).fit(x[train], y[train])
    acc = float((clf.predict(x[hold]) == y[hold].astype(bool)).mean())
    return clf, acc


# ---------------------------------------------------------------------------
# held-out evaluation against the exact oracles
# ---------------------------------------------------------------------------


def evaluate_kkt_model(model, cfg: GridConfig, n: int = 1024, skip: int = 1 << 24):
    """Mean scaled distance between model projections and exact projections.

    Draws held-out Sobol points (fast-forwarded past the training range),
    computes both projections, and averages the Euclidean distance in scaled
    ([-1, 1] per axis) coordinates over samples and devices.
    """
    scaling = model.scaling
    sampler = SobolSampler(SOBOL_DIMENSION).skip(skip)
    slot_names = sobol_slot_names(cfg)
    dists = []
    if isinstance(model, KktGenModel):
        names = gen_feature_names(cfg)
        idx = [slot_names.index(nm) for nm in names]
        lo, hi = scaling.lower(names), scaling.upper(names)
        phys = scale_to(sampler.next_batch(n)[:, idx], lo, hi)
        a_pq = np.stack([phys[:, 0::3], phys[:, 1::3]], axis=2)
        p_max = phys[:, 2::3]
        pred = model.predict(a_pq, p_max)
        for i in range(n):
            for k, g in enumerate(cfg.generators):
                exact, _ = project_exact(
                    a_pq[i, k], build_generator_polytope(g, p_max[i, k])
                )
                d = (pred[i, k] - exact) / model.primal_scale[k]
                dists.append(np.linalg.norm(d))
    else:
        names = des_feature_names(cfg)
        idx = [slot_names.index(nm) for nm in names]
        lo, hi = scaling.lower(names), scaling.upper(names)
        phys = scale_to(sampler.next_batch(n)[:, idx], lo, hi)
        a_pq, soc = phys[:, :2], phys[:, 2]
        pred = model.predict(a_pq, soc)
        for i in range(n):
            exact, _ = project_exact(
                a_pq[i], build_des_polytope(cfg.des, soc[i], cfg.delta_t_hours)
            )
            d = (pred[i] - exact) / model.primal_scale
            dists.append(np.linalg.norm(d))
    return float(np.mean(dists))


def evaluate_balance_model(
    model, cfg: GridConfig, n: int = 512, skip: int = 1 << 24
):
    """Voltage accuracy of the balance net against Newton-Raphson.

    Held-out Sobol injections are filtered to solvable cases; returns a dict
    with the voltage-magnitude MAE (p.u.), angle MAE (rad), slack MAE (p.u.)
    and the mean of the max power residual.
    """
    scaling = model.scaling
    ymat = build_admittance(cfg)
    base = cfg.base_power_mva
    names = balance_feature_names(cfg)
    slot_names = sobol_slot_names(cfg)
    idx = [slot_names.index(nm) for nm in names]
    lo, hi = scaling.lower(names), scaling.upper(names)
    sampler = SobolSampler(SOBOL_DIMENSION).skip(skip)
    nb = cfg.n_bus - 1

    v_err, th_err, sl_err, res = [], [], [], []
    n_solvable = 0
    phys = scale_to(sampler.next_batch(n)[:, idx], lo, hi)
    pred = model.predict(phys[:, :nb], phys[:, nb:])
    for i in range(n):
        sol = power_flow.solve(phys[i, :nb] / base, phys[i, nb:] / base, ymat)
        if not sol.converged:
            continue
        n_solvable += 1
        v_err.append(np.abs(pred["v_mag"][i] - sol.v_mag).mean())
        th_err.append(np.abs(pred["theta"][i] - sol.theta).mean())
        sl_err.append(
            0.5 * abs(pred["slack_p"][i] - sol.slack_p)
            + 0.5 * abs(pred["slack_q"][i] - sol.slack_q)
        )
        rp, rq = power_flow.pf_residuals(
            pred["v_mag"][i], pred["theta"][i], phys[i, :nb] / base,
            phys[i, nb:] / base, ymat,
        )
        res.append(max(np.abs(rp).max(), np.abs(rq).max()))
    return {
        "n_solvable": n_solvable,
        "mae_v": float(np.mean(v_err)),
        "mae_theta": float(np.mean(th_err)),
        "mae_slack": float(np.mean(sl_err)),
        "mean_max_residual": float(np.mean(res)),
    }


# ---------------------------------------------------------------------------
# timing benchmark and persistence
# ---------------------------------------------------------------------------


def benchmark_inference(
    bundle: SurrogateBundle,
    env: GridEnv,
    n: int = 1000,
    batch: int = 100,
    seed: int = 0,
) -> dict:
    """Median per-transition wall time of the batched surrogate vs the env.

    The surrogate executes ``n`` transitions in batches; its per-transition
    time is the batch wall time divided by the batch size. The reference
    environment steps sequentially. Returns medians and their ratio.
    """
    if n <= 0:
        return {"n": 0, "surrogate_median_s": None, "env_median_s": None, "ratio": None}
    rng = np.random.default_rng(seed)
    from .env import Action

    low, high = Action.bounds(env.cfg)

    states = np.stack(
        [env.reset(seed=int(rng.integers(1 << 31))).to_vector() for _ in range(batch)]
    )
    sur_times = []
    done_total = 0
    remaining = n
    while remaining > 0:
        b = min(batch, remaining)
        acts = rng.uniform(low, high, size=(b, low.size))
        t0 = time.perf_counter()
        nxt, _, done, _ = bundle.step_batch(states[:b], acts)
        dt = (time.perf_counter() - t0) / b
        sur_times.extend([dt] * b)
        states[:b] = nxt
        done_total += int(done.sum())
        if done.any():
            for i in np.flatnonzero(done):
                states[i] = env.reset(seed=int(rng.integers(1 << 31))).to_vector()
        remaining -= b

    env.reset(seed=int(rng.integers(1 << 31)))
    env_times = []
    for _ in range(n):
        a = rng.uniform(low, high)
        t0 = time.perf_counter()
        out = env.step(a)
        env_times.append(time.perf_counter() - t0)
        if out.done:
            env.reset(seed=int(rng.integers(1 << 31)))

    sur_med = float(np.median(sur_times))
    env_med = float(np.median(env_times))
    return {
        "n": n,
        "batch": batch,
        "surrogate_median_s": sur_med,
        "env_median_s": env_med,
        "ratio": env_med / sur_med,
        "surrogate_dones": done_total,
    }


def save_bundle(bundle: SurrogateBundle, out_dir: str | Path):
    """Persist every learned component plus a manifest pinning the config."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_mlp(bundle.gen_model.net, out / "gen_net.npz")
    save_mlp(bundle.des_model.net, out / "des_net.npz")
    save_mlp(bundle.balance_model.net, out / "balance_net.npz")
    if isinstance(bundle.terminal, GbdtTerminal):
        (out / "terminal_clf.json").write_text(json.dumps(bundle.terminal.clf.to_dict()))
    (out / "scaling.json").write_text(json.dumps(bundle.scaling.to_dict()))
    manifest = {
        "config_hash": bundle.cfg.content_hash,
        "components": ["gen_net", "des_net", "balance_net"],
        "has_terminal_clf": isinstance(bundle.terminal, GbdtTerminal),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))


def load_bundle(
    in_dir: str | Path, cfg: GridConfig, profiles: DailyProfiles | None = None
) -> SurrogateBundle:
    """Load a bundle checkpoint; refuses configs other than the one it was
    trained against."""
    src = Path(in_dir)
    manifest = json.loads((src / "manifest.json").read_text())
    if manifest["config_hash"] != cfg.content_hash:
        raise ValueError(
            "bundle was trained against a different grid config "
            f"(hash {manifest['config_hash']} != {cfg.content_hash})"
        )
    scaling = ScalingTable.from_dict(json.loads((src / "scaling.json").read_text()))
    gen_net, _ = load_mlp(src / "gen_net.npz")
    des_net, _ = load_mlp(src / "des_net.npz")
    bal_net, _ = load_mlp(src / "balance_net.npz")
    terminal = None
    if manifest.get("has_terminal_clf"):
        clf = GbdtClassifier.from_dict(
            json.loads((src / "terminal_clf.json").read_text())
        )
        terminal = GbdtTerminal(clf)
    profiles = profiles if profiles is not None else DailyProfiles.default(cfg)
    return SurrogateBundle(
        cfg,
        profiles,
        gen_model=KktGenModel(gen_net, cfg, scaling),
        des_model=KktDesModel(des_net, cfg, scaling),
        balance_model=PinnBalanceModel(bal_net, cfg, scaling),
        terminal=terminal if terminal is not None else NeverTerminal(),
        scaling=scaling,
    )


def train_full_bundle(
    cfg: GridConfig,
    profiles: DailyProfiles | None = None,
    train_cfg: SurrogateTrainConfig | None = None,
    terminal_data: tuple[np.ndarray, np.ndarray] | None = None,
) -> tuple[SurrogateBundle, dict]:
    """Train all three physics-informed nets (and optionally the terminal
    classifier) and assemble the bundle."""
    profiles = profiles if profiles is not None else DailyProfiles.default(cfg)
    scaling = ScalingTable.from_config(cfg)
    gen_model, gen_rep = train_gen_net(cfg, scaling, train_cfg)
    des_model, des_rep = train_des_net(cfg, scaling, train_cfg)
    bal_model, bal_rep = train_balance_net(cfg, scaling, train_cfg)
    terminal = NeverTerminal()
    term_acc = None
    if terminal_data is not None:
        clf, term_acc = train_terminal_clf(*terminal_data)
        terminal = GbdtTerminal(clf)
    bundle = SurrogateBundle(
        cfg, profiles, gen_model, des_model, bal_model, terminal, scaling
    )
    reports = {
        "gen": gen_rep,
        "des": des_rep,
        "balance": bal_rep,
        "terminal_accuracy": term_acc,
    }
    return bundle, reports
