import json

import numpy as np
import pytest

from gridpinn.env import DailyProfiles, GridEnv
from gridpinn.grid import default_config, parse_config, _to_jsonable


@pytest.fixture(scope="session")
def cfg():
    return default_config()


@pytest.fixture(scope="session")
def profiles(cfg):
    return DailyProfiles.default(cfg)


@pytest.fixture()
def env(cfg, profiles):
    return GridEnv(cfg, profiles)


@pytest.fixture(scope="session")
def short_episode_cfg():
    """Default grid with the 288-step (3-day) episode horizon."""
    raw = _to_jsonable(default_config())
    raw["episode_length"] = 288
    return parse_config(raw)


def two_bus_config(y_series=complex(1.0, -5.0), shunt_b=0.0, rating=1.0):
    """Minimal 2-bus grid used for hand-checkable power-flow cases."""
    z = 1.0 / y_series
    raw = {
        "schema_version": 1,
        "base_power_mva": 100.0,
        "delta_t_hours": 0.25,
        "lambda_penalty": 100.0,
        "reward_clip": [-100.0, 100.0],
        "episode_length": 3000,
        "aux_modulus": 96,
        "buses": [
            {"id": 1, "v_min": 0.9, "v_max": 1.1},
            {"id": 2, "v_min": 0.9, "v_max": 1.1},
        ],
        "branches": [
            {
                "from_bus": 1,
                "to_bus": 2,
                "resistance": z.real,
                "reactance": z.imag,
                "shunt_susceptance": shunt_b,
                "rating": rating,
            }
        ],
        "devices": [
            {"id": 0, "kind": "slack", "bus": 1, "p_min": -500.0, "p_max": 500.0,
             "q_min": -500.0, "q_max": 500.0},
            {"id": 1, "kind": "load", "bus": 2, "p_min": -50.0, "p_max": 0.0,
             "power_factor": 0.95},
            {"id": 2, "kind": "renewable_gen", "bus": 2, "p_min": 0.0, "p_max": 50.0,
             "q_min": -20.0, "q_max": 20.0, "flex_lines": [[-0.4, 30.0], [0.4, -30.0]]},
            {"id": 3, "kind": "des", "bus": 2, "p_min": -20.0, "p_max": 20.0,
             "q_min": -10.0, "q_max": 10.0,
             "flex_lines": [[0.4, 14.0], [-0.4, -14.0], [-0.4, 14.0], [0.4, -14.0]],
             "soc_min": 1.0, "soc_max": 40.0, "efficiency": 0.9},
        ],
    }
    return parse_config(raw)


@pytest.fixture()
def cfg2bus():
    return two_bus_config()


def default_raw() -> dict:
    return _to_jsonable(default_config())


@pytest.fixture()
def raw_config():
    return default_raw()
