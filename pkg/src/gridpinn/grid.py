"""Grid topology, device parameters, and admittance construction.

This module is the single source of physical constants for the rest of the
package. A grid is described by a JSON config file (see ``docs`` section of
the README for the schema); every quantity with an upper/lower bound used
anywhere else originates here.

Unit conventions:
    * device power bounds and setpoints: MW / MVAr
    * branch impedances, ratings and all power-flow math: per-unit on
      ``base_power_mva``
    * energy (state of charge): MWh
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SCHEMA_VERSION = 1

KIND_SLACK = "slack"
KIND_GEN = "renewable_gen"
KIND_LOAD = "load"
KIND_DES = "des"

_VALID_KINDS = (KIND_SLACK, KIND_GEN, KIND_LOAD, KIND_DES)


class ConfigError(ValueError):
    """Raised when a grid config file violates the schema or an invariant."""


@dataclass(frozen=True)
class BusSpec:
    id: int
    v_min: float  # p.u.
    v_max: float  # p.u.


@dataclass(frozen=True)
class BranchSpec:
    from_bus: int
    to_bus: int
    resistance: float          # p.u. series resistance
    reactance: float           # p.u. series reactance
    shunt_susceptance: float   # p.u. total line charging (split half per end)
    tap_ratio: float
    rating: float              # p.u. apparent-power limit per direction

    @property
    def y_series(self) -> complex:
        return 1.0 / complex(self.resistance, self.reactance)

    @property
    def y_shunt(self) -> complex:
        # per-end shunt admittance of the pi model
        return complex(0.0, 0.5 * self.shunt_susceptance)


@dataclass(frozen=True)
class DeviceSpec:
    id: int
    kind: str
    bus: int
    p_min: float
    p_max: float
    q_min: float
    q_max: float
    # (slope, intercept) pairs for the reactive capability lines, alternating
    # upper (Q <= tau*P + rho) and lower (Q >= tau*P + rho) starting with an
    # upper line: 2 entries for generators, 4 for the storage unit.
    flex_lines: tuple[tuple[float, float], ...] = ()
    power_factor: float | None = None  # loads only
    soc_min: float | None = None       # MWh, storage only
    soc_max: float | None = None
    efficiency: float | None = None    # charge/discharge efficiency, storage only

    @property
    def is_generator(self) -> bool:
        return self.kind == KIND_GEN

    @property
    def is_load(self) -> bool:
        return self.kind == KIND_LOAD

    @property
    def is_des(self) -> bool:
        return self.kind == KIND_DES


@dataclass(frozen=True)
class AdmittanceMatrix:
    """Bus admittance matrix Y = G + jB in per-unit."""

    y: np.ndarray  # complex (n_bus, n_bus)

    @property
    def g(self) -> np.ndarray:
        return self.y.real

    @property
    def b(self) -> np.ndarray:
        return self.y.imag


@dataclass
class GridConfig:
    buses: tuple[BusSpec, ...]
    branches: tuple[BranchSpec, ...]
    devices: tuple[DeviceSpec, ...]
    base_power_mva: float
    delta_t_hours: float
    lambda_penalty: float
    reward_clip: tuple[float, float]
    episode_length: int
    aux_modulus: int
    _bus_index: dict[int, int] = field(init=False, repr=False)

    def __post_init__(self):
        self._bus_index = {b.id: i for i, b in enumerate(self.buses)}
        _validate(self)

    # -- lookup helpers -------------------------------------------------

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    def bus_position(self, bus_id: int) -> int:
        """0-based row/column of a bus in matrix and vector layouts."""
        return self._bus_index[bus_id]

    @property
    def slack_device(self) -> DeviceSpec:
        return next(d for d in self.devices if d.kind == KIND_SLACK)

    @property
    def generators(self) -> tuple[DeviceSpec, ...]:
        """Non-slack generators, in device order."""
        return tuple(d for d in self.devices if d.kind == KIND_GEN)

    @property
    def loads(self) -> tuple[DeviceSpec, ...]:
        return tuple(d for d in self.devices if d.kind == KIND_LOAD)

    @property
    def des(self) -> DeviceSpec:
        return next(d for d in self.devices if d.kind == KIND_DES)

    @property
    def non_slack_devices(self) -> tuple[DeviceSpec, ...]:
        return tuple(d for d in self.devices if d.kind != KIND_SLACK)

    def device_by_id(self, device_id: int) -> DeviceSpec:
        for d in self.devices:
            if d.id == device_id:
                return d
        raise KeyError(f"no device with id {device_id}")

    def device_position(self, device_id: int) -> int:
        for i, d in enumerate(self.devices):
            if d.id == device_id:
                return i
        raise KeyError(f"no device with id {device_id}")

    @property
    def content_hash(self) -> str:
        """Stable hash of the physical parameters, used to pin checkpoints.

        The episode horizon is excluded: it shapes rollouts, not physics.
        """
        import hashlib

        data = _to_jsonable(self)
        data.pop("episode_length", None)
        blob = json.dumps(data, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _require(cond: bool, message: str):
    if not cond:
        raise ConfigError(message)


def _validate(cfg: GridConfig):
    _require(cfg.base_power_mva > 0, "base_power_mva must be positive")
    _require(cfg.delta_t_hours > 0, "delta_t_hours must be positive")
    expected_aux = 24.0 / cfg.delta_t_hours
    _require(
        abs(cfg.aux_modulus - expected_aux) < 1e-9,
        f"aux_modulus must equal 24h/delta_t ({expected_aux:g}), got {cfg.aux_modulus}",
    )
    _require(cfg.episode_length > 0, "episode_length must be positive")
    _require(
        cfg.reward_clip[0] < cfg.reward_clip[1],
        "reward_clip must be an increasing pair",
    )

    bus_ids = [b.id for b in cfg.buses]
    _require(len(set(bus_ids)) == len(bus_ids), "duplicate bus ids")
    for b in cfg.buses:
        _require(
            b.v_min < b.v_max,
            f"bus {b.id}: voltage bounds must satisfy v_min < v_max",
        )

    for br in cfg.branches:
        for end in (br.from_bus, br.to_bus):
            _require(end in cfg._bus_index, f"branch references unknown bus {end}")
        _require(br.from_bus != br.to_bus, "branch endpoints must differ")
        _require(br.rating > 0, f"branch {br.from_bus}-{br.to_bus}: rating must be > 0")
        _require(
            br.resistance != 0 or br.reactance != 0,
            f"branch {br.from_bus}-{br.to_bus}: zero series impedance",
        )
        _require(br.tap_ratio != 0, "tap_ratio must be nonzero")

    dev_ids = [d.id for d in cfg.devices]
    _require(len(set(dev_ids)) == len(dev_ids), "duplicate device ids")

    slacks = [d for d in cfg.devices if d.kind == KIND_SLACK]
    _require(len(slacks) == 1, "config must define exactly one slack device")
    _require(
        slacks[0].bus == cfg.buses[0].id,
        f"slack device must sit on the first bus (bus {cfg.buses[0].id}), "
        f"found bus {slacks[0].bus}",
    )

    for d in cfg.devices:
        _require(d.kind in _VALID_KINDS, f"device {d.id}: unknown kind '{d.kind}'")
        _require(d.bus in cfg._bus_index, f"device {d.id}: unknown bus {d.bus}")
        _require(d.p_min <= d.p_max, f"device {d.id}: p_min > p_max")
        _require(d.q_min <= d.q_max, f"device {d.id}: q_min > q_max")
        if d.kind == KIND_LOAD:
            _require(d.p_max <= 0, f"device {d.id}: loads must have p_max <= 0")
            _require(
                d.power_factor is not None and 0 < d.power_factor <= 1,
                f"device {d.id}: load power_factor must lie in (0, 1]",
            )
        if d.kind == KIND_GEN:
            _require(len(d.flex_lines) == 2, f"device {d.id}: generators need 2 flex lines")
        if d.kind == KIND_DES:
            _require(len(d.flex_lines) == 4, f"device {d.id}: storage needs 4 flex lines")
            _require(
                d.soc_min is not None and d.soc_max is not None and 0 <= d.soc_min < d.soc_max,
                f"device {d.id}: storage requires 0 <= soc_min < soc_max",
            )
            _require(
                d.efficiency is not None and 0 < d.efficiency <= 1,
                f"device {d.id}: efficiency must lie in (0, 1]",
            )


def _load_q_bounds(p_min: float, power_factor: float) -> tuple[float, float]:
    # loads draw Q = P tan(arccos(pf)); with P <= 0 this is never positive
    t = math.tan(math.acos(power_factor))
    return (p_min * t, 0.0)


def load_config(path: str | Path) -> GridConfig:
    """Read and validate a grid config JSON file.

    Raises ConfigError naming the offending field when any invariant fails.
    """
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    return parse_config(raw)


def parse_config(raw: dict) -> GridConfig:
    """Build a GridConfig from already-parsed JSON data."""
    version = raw.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(
            f"schema_version must be {SCHEMA_VERSION}, got {version!r}"
        )
    try:
        buses = tuple(
            BusSpec(id=int(b["id"]), v_min=float(b["v_min"]), v_max=float(b["v_max"]))
            for b in raw["buses"]
        )
        branches = tuple(
            BranchSpec(
                from_bus=int(br["from_bus"]),
                to_bus=int(br["to_bus"]),
                resistance=float(br["resistance"]),
                reactance=float(br["reactance"]),
                shunt_susceptance=float(br.get("shunt_susceptance", 0.0)),
                tap_ratio=float(br.get("tap_ratio", 1.0)),
                rating=float(br["rating"]),
            )
            for br in raw["branches"]
        )
        devices = []
        for d in raw["devices"]:
            kind = d["kind"]
            if kind == KIND_LOAD:
                pf = float(d["power_factor"])
                p_min = float(d["p_min"])
                if not 0 < pf <= 1:
                    raise ConfigError(
                        f"device {d.get('id')}: load power_factor must lie in (0, 1]"
                    )
                q_min, q_max = _load_q_bounds(p_min, pf)
            else:
                pf = None
                q_min, q_max = float(d["q_min"]), float(d["q_max"])
            devices.append(
                DeviceSpec(
                    id=int(d["id"]),
                    kind=kind,
                    bus=int(d["bus"]),
                    p_min=float(d["p_min"]),
                    p_max=float(d["p_max"]),
                    q_min=q_min,
                    q_max=q_max,
                    flex_lines=tuple(
                        (float(t), float(r)) for t, r in d.get("flex_lines", [])
                    ),
                    power_factor=pf,
                    soc_min=float(d["soc_min"]) if d.get("soc_min") is not None else None,
                    soc_max=float(d["soc_max"]) if d.get("soc_max") is not None else None,
                    efficiency=float(d["efficiency"]) if d.get("efficiency") is not None else None,
                )
            )
        clip = raw.get("reward_clip", [-100.0, 100.0])
        cfg = GridConfig(
            buses=buses,
            branches=branches,
            devices=tuple(devices),
            base_power_mva=float(raw["base_power_mva"]),
            delta_t_hours=float(raw["delta_t_hours"]),
            lambda_penalty=float(raw.get("lambda_penalty", 100.0)),
            reward_clip=(float(clip[0]), float(clip[1])),
            episode_length=int(raw.get("episode_length", 3000)),
            aux_modulus=int(raw.get("aux_modulus", 96)),
        )
    except KeyError as exc:
        raise ConfigError(f"missing required config field: {exc}") from exc
    return cfg


def default_config() -> GridConfig:
    """The bundled 6-bus, 7-device desk-scale network."""
    from importlib import resources

    data = resources.files("gridpinn.data").joinpath("anm6_default.json").read_text()
    return parse_config(json.loads(data))


def _to_jsonable(cfg: GridConfig) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "base_power_mva": cfg.base_power_mva,
        "delta_t_hours": cfg.delta_t_hours,
        "lambda_penalty": cfg.lambda_penalty,
        "reward_clip": list(cfg.reward_clip),
        "episode_length": cfg.episode_length,
        "aux_modulus": cfg.aux_modulus,
        "buses": [{"id": b.id, "v_min": b.v_min, "v_max": b.v_max} for b in cfg.buses],
        "branches": [
            {
                "from_bus": br.from_bus,
                "to_bus": br.to_bus,
                "resistance": br.resistance,
                "reactance": br.reactance,
                "shunt_susceptance": br.shunt_susceptance,
                "tap_ratio": br.tap_ratio,
                "rating": br.rating,
            }
            for br in cfg.branches
        ],
        "devices": [
            {
                "id": d.id,
                "kind": d.kind,
                "bus": d.bus,
                "p_min": d.p_min,
                "p_max": d.p_max,
                "q_min": d.q_min,
                "q_max": d.q_max,
                "flex_lines": [list(l) for l in d.flex_lines],
                "power_factor": d.power_factor,
                "soc_min": d.soc_min,
                "soc_max": d.soc_max,
                "efficiency": d.efficiency,
            }
            for d in cfg.devices
        ],
    }


def build_admittance(cfg: GridConfig) -> AdmittanceMatrix:
    """Assemble the bus admittance matrix from the branch list.

    Each branch contributes the standard two-port stamp with off-nominal tap
    ``t`` on the from side:

        Y_ff += (y + y_sh) / |t|^2      Y_ft -= y / conj(t)
        Y_tf -= y / t                   Y_tt += y + y_sh
    """
    n = cfg.n_bus
    y = np.zeros((n, n), dtype=complex)
    for br in cfg.branches:
        i = cfg.bus_position(br.from_bus)
        j = cfg.bus_position(br.to_bus)
        ys = br.y_series
        ysh = br.y_shunt
        t = complex(br.tap_ratio)
        y[i, i] += (ys + ysh) / (abs(t) ** 2)
        y[j, j] += ys + ysh
        y[i, j] -= ys / np.conj(t)
        y[j, i] -= ys / t
    return AdmittanceMatrix(y=y)


def aggregate_bus_injections(
    device_p: np.ndarray, device_q: np.ndarray, cfg: GridConfig
) -> tuple[np.ndarray, np.ndarray]:
    """Sum per-device powers into net per-bus injections, excluding the slack bus.

    ``device_p``/``device_q`` hold one value per non-slack device in device
    order (MW / MVAr); arrays may carry a leading batch dimension. Returns
    (P_bus, Q_bus) over buses 2..n in bus order, same units.
    """
    device_p = np.asarray(device_p, dtype=float)
    device_q = np.asarray(device_q, dtype=float)
    inc = incidence_matrix(cfg)
    return device_p @ inc.T, device_q @ inc.T


def incidence_matrix(cfg: GridConfig) -> np.ndarray:
    """(n_bus - 1, n_non_slack_devices) 0/1 matrix mapping devices to buses 2..n."""
    devs = cfg.non_slack_devices
    n = cfg.n_bus
    inc = np.zeros((n - 1, len(devs)))
    for k, d in enumerate(devs):
        pos = cfg.bus_position(d.bus)
        if pos == 0:
            raise ConfigError(f"non-slack device {d.id} attached to the slack bus")
        inc[pos - 1, k] = 1.0
    return inc
