"""Reference MDP for active network management of the bundled 6-bus grid.

One environment step advances the daily profiles by a quarter hour, maps the
agent's raw setpoints onto each device's feasible set, updates the storage
state of charge, solves the AC power flow, and scores the transition by the
energy lost plus a penalty for operating-limit violations. A power flow that
fails to converge marks the episode terminal (grid failure).

The 96-slot daily time series for load demand and renewable potential repeat
day after day; the ``aux`` slot counter in the state keeps the process
Markovian.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import power_flow
from .grid import GridConfig, aggregate_bus_injections
from .projection import (
    build_des_polytope,
    build_generator_polytope,
    project_exact,
    soc_update,
)


def load_reactive(p_load, power_factor: float):
    """Reactive power drawn by a load at the given power factor.

    Q = P tan(arccos(pf)); with the load convention P <= 0 the result is
    non-positive. Elementwise on arrays.
    """
    if not 0.0 < power_factor <= 1.0:
        raise ValueError(f"power factor must lie in (0, 1], got {power_factor}")
    t = math.tan(math.acos(power_factor))
    out = np.asarray(p_load, dtype=float) * t
    return float(out) if out.ndim == 0 else out


@dataclass
class DailyProfiles:
    """Deterministic daily series: demand per load, potential per generator.

    ``load_p[k]`` is the MW demand series (<= 0) of the k-th load device in
    device order; ``gen_p_max[k]`` the MW available-capacity series (>= 0) of
    the k-th non-slack generator. All series have ``n_slots`` entries and are
    indexed modulo that length.
    """

    load_p: np.ndarray    # (n_loads, n_slots)
    gen_p_max: np.ndarray  # (n_gens, n_slots)

    def __post_init__(self):
        self.load_p = np.asarray(self.load_p, dtype=float)
        self.gen_p_max = np.asarray(self.gen_p_max, dtype=float)
        if self.load_p.shape[1] != self.gen_p_max.shape[1]:
            raise ValueError("load and generator series lengths differ")
        if np.any(self.load_p > 0):
            raise ValueError("load demand series must be non-positive")
        if np.any(self.gen_p_max < 0):
            raise ValueError("generation potential series must be non-negative")

    @property
    def n_slots(self) -> int:
        return self.load_p.shape[1]

    def loads_at(self, aux):
        """Demand of every load at slot ``aux`` (int or int array)."""
        idx = np.asarray(aux, dtype=int) % self.n_slots
        return self.load_p[:, idx].T if idx.ndim else self.load_p[:, idx]

    def p_max_at(self, aux):
        idx = np.asarray(aux, dtype=int) % self.n_slots
        return self.gen_p_max[:, idx].T if idx.ndim else self.gen_p_max[:, idx]

    @classmethod
    def from_csv(cls, path: str | Path, cfg: GridConfig) -> "DailyProfiles":
        """Load profiles from a CSV with a ``slot`` column plus one ``d<id>``
        column per load and non-slack generator (MW, loads negative)."""
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            rows = list(reader)
        if len(rows) != cfg.aux_modulus:
            raise ValueError(
                f"profiles must have {cfg.aux_modulus} rows, found {len(rows)}"
            )
        data = {}
        for name in rows[0].keys():
            if name == "slot":
                continue
            data[name] = np.array([float(r[name]) for r in rows])
        load_p, gen_p = [], []
        for d in cfg.loads:
            key = f"d{d.id}"
            if key not in data:
                raise ValueError(f"profiles file missing column {key} for load {d.id}")
            load_p.append(data[key])
        for d in cfg.generators:
            key = f"d{d.id}"
            if key not in data:
                raise ValueError(f"profiles file missing column {key} for generator {d.id}")
            gen_p.append(data[key])
        return cls(load_p=np.array(load_p), gen_p_max=np.array(gen_p))

    @classmethod
    def default(cls, cfg: GridConfig) -> "DailyProfiles":
        from importlib import resources

        ref = resources.files("gridpinn.data").joinpath("profiles_default.csv")
        with resources.as_file(ref) as path:
            return cls.from_csv(path, cfg)

    @classmethod
    def flat(cls, cfg: GridConfig, load_p: float = 0.0, gen_p_max: float | None = None):
        """Constant profiles, handy for tests."""
        n = cfg.aux_modulus
        loads = np.full((len(cfg.loads), n), load_p)
        caps = np.array(
            [[d.p_max if gen_p_max is None else gen_p_max] * n for d in cfg.generators]
        )
        return cls(load_p=loads, gen_p_max=caps)


@dataclass
class State:
    """MDP state: device powers, storage charge, generation caps, slot index."""

    p_dev: np.ndarray   # (n_dev,) MW, device order (slack included)
    q_dev: np.ndarray   # (n_dev,) MVAr
    soc: float          # MWh
    p_max: np.ndarray   # (n_gen,) MW, non-slack generators
    aux: int

    def to_vector(self) -> np.ndarray:
        return np.concatenate(
            [self.p_dev, self.q_dev, [self.soc], self.p_max, [float(self.aux)]]
        )

    @classmethod
    def from_vector(cls, vec: np.ndarray, cfg: GridConfig) -> "State":
        vec = np.asarray(vec, dtype=float)
        n_dev = len(cfg.devices)
        n_gen = len(cfg.generators)
        if vec.shape != (2 * n_dev + n_gen + 2,):
            raise ValueError(f"state vector has wrong length {vec.shape}")
        p = vec[:n_dev].copy()
        q = vec[n_dev : 2 * n_dev].copy()
        soc = float(vec[2 * n_dev])
        p_max = vec[2 * n_dev + 1 : 2 * n_dev + 1 + n_gen].copy()
        aux = int(round(vec[-1]))
        return cls(p_dev=p, q_dev=q, soc=soc, p_max=p_max, aux=aux)

    @staticmethod
    def vector_size(cfg: GridConfig) -> int:
        return 2 * len(cfg.devices) + len(cfg.generators) + 2

    @staticmethod
    def bounds(cfg: GridConfig) -> tuple[np.ndarray, np.ndarray]:
        """Nominal per-dimension (low, high) of the flat state vector, used
        for feature normalization. Power entries use the device boxes."""
        p_lo = [d.p_min for d in cfg.devices]
        p_hi = [d.p_max for d in cfg.devices]
        q_lo = [d.q_min for d in cfg.devices]
        q_hi = [d.q_max for d in cfg.devices]
        des = cfg.des
        g_lo = [d.p_min for d in cfg.generators]
        g_hi = [d.p_max for d in cfg.generators]
        low = np.array(p_lo + q_lo + [des.soc_min] + g_lo + [0.0])
        high = np.array(p_hi + q_hi + [des.soc_max] + g_hi + [cfg.aux_modulus - 1.0])
        return low, high


@dataclass
class Action:
    """Raw setpoints: active/reactive per non-slack generator, then storage."""

    p_gen: np.ndarray  # (n_gen,) MW
    q_gen: np.ndarray  # (n_gen,) MVAr
    p_des: float
    q_des: float

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.p_gen, self.q_gen, [self.p_des, self.q_des]])

    @classmethod
    def from_vector(cls, vec: np.ndarray, cfg: GridConfig) -> "Action":
        vec = np.asarray(vec, dtype=float)
        n_gen = len(cfg.generators)
        if vec.shape != (2 * n_gen + 2,):
            raise ValueError(f"action vector has wrong length {vec.shape}")
        return cls(
            p_gen=vec[:n_gen].copy(),
            q_gen=vec[n_gen : 2 * n_gen].copy(),
            p_des=float(vec[2 * n_gen]),
            q_des=float(vec[2 * n_gen + 1]),
        )

    @staticmethod
    def vector_size(cfg: GridConfig) -> int:
        return 2 * len(cfg.generators) + 2

    @staticmethod
    def bounds(cfg: GridConfig) -> tuple[np.ndarray, np.ndarray]:
        """Per-dimension (low, high) arrays for the action vector."""
        gens = cfg.generators
        des = cfg.des
        low = np.array(
            [d.p_min for d in gens] + [d.q_min for d in gens] + [des.p_min, des.q_min]
        )
        high = np.array(
            [d.p_max for d in gens] + [d.q_max for d in gens] + [des.p_max, des.q_max]
        )
        return low, high


@dataclass
class StepOutcome:
    next_state: State
    reward: float
    done: bool
    info: dict = field(default_factory=dict)


@dataclass(frozen=True)
class StateLayout:
    """Column slices of the flat state vector; shared by every consumer."""

    n_dev: int
    n_gen: int

    @classmethod
    def from_config(cls, cfg: GridConfig) -> "StateLayout":
        return cls(n_dev=len(cfg.devices), n_gen=len(cfg.generators))

    @property
    def p_dev(self) -> slice:
        return slice(0, self.n_dev)

    @property
    def q_dev(self) -> slice:
        return slice(self.n_dev, 2 * self.n_dev)

    @property
    def soc(self) -> int:
        return 2 * self.n_dev

    @property
    def p_max(self) -> slice:
        return slice(2 * self.n_dev + 1, 2 * self.n_dev + 1 + self.n_gen)

    @property
    def aux(self) -> int:
        return 2 * self.n_dev + 1 + self.n_gen

    @property
    def size(self) -> int:
        return 2 * self.n_dev + self.n_gen + 2


def compute_reward(
    cfg: GridConfig,
    p_dev_next,      # (..., n_dev) MW incl. slack
    p_des_next,      # (...,) MW
    p_max_next,      # (..., n_gen) MW
    p_gen_next,      # (..., n_gen) MW realized generator output
    v_mag,           # (..., n_bus) p.u.
    s_from,          # (..., n_branch) p.u.
    s_to,            # (..., n_branch) p.u.
):
    """Closed-form transition reward; shared by the environment and surrogate.

    Energy terms (MWh): network losses = dt * sum of all device injections,
    storage exchange = -dt * P_des, curtailment = dt * sum(P_max - P_gen).
    The penalty accumulates per-unit voltage-band and branch-rating excesses.
    Returns (reward, de1, de2, de3, phi) with the reward clipped to the
    configured range; all outputs broadcast over leading batch dims.
    """
    dt = cfg.delta_t_hours
    de1 = dt * np.sum(np.asarray(p_dev_next, dtype=float), axis=-1)
    de2 = -dt * np.asarray(p_des_next, dtype=float)
    de3 = dt * np.sum(
        np.asarray(p_max_next, dtype=float) - np.asarray(p_gen_next, dtype=float),
        axis=-1,
    )

    v = np.asarray(v_mag, dtype=float)
    v_min = np.array([b.v_min for b in cfg.buses])
    v_max = np.array([b.v_max for b in cfg.buses])
    over_v = np.maximum(v - v_max, 0.0) + np.maximum(v_min - v, 0.0)
    rating = np.array([br.rating for br in cfg.branches])
    over_s = np.maximum(np.asarray(s_from) - rating, 0.0) + np.maximum(
        np.asarray(s_to) - rating, 0.0
    )
    phi = dt * (np.sum(over_v, axis=-1) + np.sum(over_s, axis=-1))

    raw = -(de1 + de2 + de3 + cfg.lambda_penalty * phi)
    reward = np.clip(raw, cfg.reward_clip[0], cfg.reward_clip[1])
    return reward, de1, de2, de3, phi


def is_terminal(solution: power_flow.PowerFlowSolution) -> bool:
    """A transition is terminal iff the power-flow solve did not converge."""
    return not solution.converged


class GridEnv:
    """Single-instance reference environment.

    Instances are mutable and single-threaded; the config and profiles they
    share are read-only.
    """

    def __init__(
        self,
        cfg: GridConfig,
        profiles: DailyProfiles | None = None,
        pf_tol: float = power_flow.DEFAULT_TOL,
        pf_max_iter: int = power_flow.DEFAULT_MAX_ITER,
    ):
        self.cfg = cfg
        self.profiles = profiles if profiles is not None else DailyProfiles.default(cfg)
        if self.profiles.n_slots != cfg.aux_modulus:
            raise ValueError("profiles length does not match aux_modulus")
        self.pf_tol = pf_tol
        self.pf_max_iter = pf_max_iter
        self.ymat = None
        self.state: State | None = None
        self._rng = np.random.default_rng()
        self._build()

    def _build(self):
        from .grid import build_admittance

        self.ymat = build_admittance(self.cfg)
        self._loads = self.cfg.loads
        self._gens = self.cfg.generators
        self._des = self.cfg.des
        devs = self.cfg.devices
        self._slack_pos = next(i for i, d in enumerate(devs) if d.kind == "slack")
        self._load_pos = [i for i, d in enumerate(devs) if d.is_load]
        self._gen_pos = [i for i, d in enumerate(devs) if d.is_generator]
        self._des_pos = next(i for i, d in enumerate(devs) if d.is_des)
        self._nonslack_pos = [i for i, d in enumerate(devs) if d.kind != "slack"]

    # -- state construction ---------------------------------------------

    def reset(self, seed: int | None = None) -> State:
        """Sample a fresh state: slot and state of charge uniform, device
        powers consistent with the profiles at that slot."""
        if seed is not None:
            self._rng = np.random.default_rng(seed)
        aux = int(self._rng.integers(0, self.cfg.aux_modulus))
        des = self._des
        soc = float(self._rng.uniform(des.soc_min, des.soc_max))
        state = self._consistent_state(aux, soc)
        self.state = state
        return state

    def _consistent_state(self, aux: int, soc: float) -> State:
        """Profile-consistent state: generators at full available output,
        storage idle, slack balancing via a power-flow solve."""
        cfg = self.cfg
        n_dev = len(cfg.devices)
        p = np.zeros(n_dev)
        q = np.zeros(n_dev)
        load_p = self.profiles.loads_at(aux)
        for k, pos in enumerate(self._load_pos):
            p[pos] = load_p[k]
            q[pos] = load_reactive(load_p[k], self._loads[k].power_factor)
        p_max = self.profiles.p_max_at(aux).copy()
        for k, pos in enumerate(self._gen_pos):
            p[pos] = min(p_max[k], self._gens[k].p_max)
            q[pos] = 0.0
        p[self._des_pos] = 0.0
        q[self._des_pos] = 0.0

        sol = self._solve_pf(p, q)
        if not sol.converged:
            raise RuntimeError(
                "power flow failed for a profile-consistent reset state; "
                "check config/profile compatibility"
            )
        p[self._slack_pos] = sol.slack_p * cfg.base_power_mva
        q[self._slack_pos] = sol.slack_q * cfg.base_power_mva
        return State(p_dev=p, q_dev=q, soc=soc, p_max=p_max, aux=aux)

    def set_state(self, state: State):
        """Adopt an externally supplied state (used by dataset builders)."""
        self.state = state

    def _solve_pf(self, p_dev: np.ndarray, q_dev: np.ndarray) -> power_flow.PowerFlowSolution:
        p_bus, q_bus = aggregate_bus_injections(
            p_dev[self._nonslack_pos], q_dev[self._nonslack_pos], self.cfg
        )
        base = self.cfg.base_power_mva
        return power_flow.solve(
            p_bus / base,
            q_bus / base,
            self.ymat,
            tol=self.pf_tol,
            max_iter=self.pf_max_iter,
        )

    # -- dynamics ---------------------------------------------------------

    def step(self, action: Action | np.ndarray) -> StepOutcome:
        if self.state is None:
            raise RuntimeError("call reset() before step()")
        if not isinstance(action, Action):
            action = Action.from_vector(np.asarray(action), self.cfg)
        if not np.all(np.isfinite(action.to_vector())):
            raise ValueError("action contains non-finite entries")

        cfg = self.cfg
        state = self.state
        aux_next = (state.aux + 1) % cfg.aux_modulus

        n_dev = len(cfg.devices)
        p = np.zeros(n_dev)
        q = np.zeros(n_dev)

        load_p = self.profiles.loads_at(aux_next)
        for k, pos in enumerate(self._load_pos):
            p[pos] = load_p[k]
            q[pos] = load_reactive(load_p[k], self._loads[k].power_factor)

        p_max_next = self.profiles.p_max_at(aux_next).copy()
        for k, pos in enumerate(self._gen_pos):
            poly = build_generator_polytope(self._gens[k], p_max_next[k])
            xy, _ = project_exact(
                np.array([action.p_gen[k], action.q_gen[k]]), poly
            )
            p[pos], q[pos] = xy

        des = self._des
        poly = build_des_polytope(des, state.soc, cfg.delta_t_hours)
        xy, _ = project_exact(np.array([action.p_des, action.q_des]), poly)
        p[self._des_pos], q[self._des_pos] = xy
        soc_next = soc_update(state.soc, xy[0], des.efficiency, cfg.delta_t_hours)
        soc_next = float(np.clip(soc_next, des.soc_min, des.soc_max))

        sol = self._solve_pf(p, q)
        if is_terminal(sol):
            # grid failure: stay on the last solvable state, worst reward
            outcome = StepOutcome(
                next_state=state,
                reward=float(cfg.reward_clip[0]),
                done=True,
                info={
                    "converged": False,
                    "iterations": sol.iterations,
                    "max_residual": sol.max_residual,
                },
            )
            return outcome

        base = cfg.base_power_mva
        p[self._slack_pos] = sol.slack_p * base
        q[self._slack_pos] = sol.slack_q * base
        flows = power_flow.branch_flows(sol.v_mag, sol.theta, cfg)

        p_gen_next = p[self._gen_pos]
        reward, de1, de2, de3, phi = compute_reward(
            cfg,
            p,
            p[self._des_pos],
            p_max_next,
            p_gen_next,
            sol.v_mag,
            flows.s_from,
            flows.s_to,
        )

        next_state = State(
            p_dev=p, q_dev=q, soc=soc_next, p_max=p_max_next, aux=aux_next
        )
        self.state = next_state
        return StepOutcome(
            next_state=next_state,
            reward=float(reward),
            done=False,
            info={
                "converged": True,
                "iterations": sol.iterations,
                "de1": float(de1),
                "de2": float(de2),
                "de3": float(de3),
                "phi": float(phi),
                "v_mag": sol.v_mag.copy(),
                "theta": sol.theta.copy(),
                "s_from": flows.s_from.copy(),
                "s_to": flows.s_to.copy(),
                "slack_p": p[self._slack_pos],
                "slack_q": q[self._slack_pos],
            },
        )


def trace_to_csv(rows: list[dict], path: str | Path):
    """Persist an episode trace (one dict per step) as CSV."""
    if not rows:
        Path(path).write_text("")
        return
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0].keys()))
    writer.writeheader()
    writer.writerows(rows)
    Path(path).write_text(buf.getvalue())
