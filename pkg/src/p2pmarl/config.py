"""Scenario configuration: JSON schema, validation and resolution to dataclasses."""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path

import jsonschema

from .market import Tariffs
from .prosumer import ProsumerConfig
from .rl.ppo import PpoConfig

_pos = {"type": "number", "exclusiveMinimum": 0}
_nonneg = {"type": "number", "minimum": 0}
_unit = {"type": "number", "exclusiveMinimum": 0, "maximum": 1}

PROSUMER_PROPS = {
    "battery_capacity": _pos,
    "eta_c": _unit,
    "eta_d": _unit,
    "charge_rate_max": _pos,
    "pv_capacity_kw": _pos,
    "inverter_s_max_kva": _pos,
    "peak_load_kw": _nonneg,
    "power_factor": _unit,
    "zones": {"type": "integer", "minimum": 1},
    "comfort_lo": {"type": "number"},
    "comfort_hi": {"type": "number"},
    "flow_max": _pos,
    "discharge_temp_lo": {"type": "number"},
    "discharge_temp_hi": {"type": "number"},
    "bid_bound": _pos,
    "zone_capacitance": _pos,
    "zone_conductance": _pos,
    "c_air": _pos,
    "fan_coeff": _nonneg,
    "cop": _pos,
    "initial_zone_temp": {"type": "number"},
    "initial_soc": _nonneg,
}

SCENARIO_SCHEMA = {
    "type": "object",
    "required": ["network", "profiles", "tariffs", "voltage", "seed", "n_episodes"],
    "additionalProperties": False,
    "properties": {
        "description": {"type": "string"},
        "network": {"type": "string"},
        "profiles": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0},
        "n_episodes": {"type": "integer", "minimum": 0},
        "tariffs": {
            "type": "object",
            "required": ["fit", "ur"],
            "additionalProperties": False,
            "properties": {"fit": _nonneg, "ur": _pos},
        },
        "voltage": {
            "type": "object",
            "required": ["v_lo", "v_hi", "lambda"],
            "additionalProperties": False,
            "properties": {"v_lo": _pos, "v_hi": _pos, "lambda": _nonneg, "slack_v": _pos,
                           "tol": _pos, "max_iter": {"type": "integer", "minimum": 1}},
        },
        "market": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"p2p_enabled": {"type": "boolean"}, "imbalance_enabled": {"type": "boolean"},
                           "sell_cap_enabled": {"type": "boolean"}},
        },
        "prosumer": {"type": "object", "additionalProperties": False, "properties": PROSUMER_PROPS},
        "prosumer_overrides": {
            "type": "object",
            "patternProperties": {"^[0-9]+$": {"type": "object", "additionalProperties": False,
                                               "properties": PROSUMER_PROPS}},
            "additionalProperties": False,
        },
        "ppo": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "gamma": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "clip_eps": _pos,
                "actor_lr": _pos,
                "critic_lr": _pos,
                "epochs_per_update": {"type": "integer", "minimum": 1},
                "minibatch_size": {"type": "integer", "minimum": 1},
                "steps_per_update": {"type": "integer", "minimum": 1},
                "gae_lambda": {"type": ["number", "null"], "exclusiveMinimum": 0, "maximum": 1},
                "value_target": {"enum": ["return", "reward"]},
                "reward_scale": _pos,
                "hidden": {"type": "array", "items": {"type": "integer", "minimum": 1}},
                "init_std": _pos,
                "max_grad_norm": {"type": ["number", "null"], "exclusiveMinimum": 0},
                "normalize_values": {"type": "boolean"},
            },
        },
        "checkpoint_every": {"type": "integer", "minimum": 0},
        "stochastic_eval": {"type": "boolean"},
    },
}


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path
        self.message = message


@dataclass
class ScenarioConfig:
    network_path: str
    profiles_path: str
    prosumer_defaults: dict = field(default_factory=dict)
    prosumer_overrides: dict = field(default_factory=dict)
    tariffs: Tariffs = field(default_factory=Tariffs)
    lam: float = 1e4
    v_lo: float = 0.96
    v_hi: float = 1.04
    slack_v: float = 1.0
    pf_tol: float = 1e-8
    pf_max_iter: int = 30
    ppo: PpoConfig = field(default_factory=PpoConfig)
    n_episodes: int = 0
    seed: int = 0
    p2p_enabled: bool = True
    imbalance_enabled: bool = True
    sell_cap_enabled: bool = True
    checkpoint_every: int = 0
    stochastic_eval: bool = False

    def prosumer_configs(self, bus_peaks: dict[int, float]) -> list[ProsumerConfig]:
        """One prosumer per load bus; peak load comes from the network unless overridden."""
        out = []
        for bus, peak in sorted(bus_peaks.items()):
            kw = {"peak_load_kw": peak, **self.prosumer_defaults, **self.prosumer_overrides.get(str(bus), {})}
            out.append(ProsumerConfig(bus_id=bus, **kw))
        return out

    def to_dict(self) -> dict:
        """Resolved form, in the scenario file layout."""
        ppo = asdict(self.ppo)
        ppo["hidden"] = list(ppo["hidden"])
        return {
            "network": self.network_path,
            "profiles": self.profiles_path,
            "seed": self.seed,
            "n_episodes": self.n_episodes,
            "tariffs": {"fit": self.tariffs.fit, "ur": self.tariffs.ur},
            "voltage": {"v_lo": self.v_lo, "v_hi": self.v_hi, "lambda": self.lam, "slack_v": self.slack_v,
                        "tol": self.pf_tol, "max_iter": self.pf_max_iter},
            "market": {"p2p_enabled": self.p2p_enabled, "imbalance_enabled": self.imbalance_enabled,
                       "sell_cap_enabled": self.sell_cap_enabled},
            "prosumer": dict(self.prosumer_defaults),
            "prosumer_overrides": copy.deepcopy(self.prosumer_overrides),
            "ppo": ppo,
            "checkpoint_every": self.checkpoint_every,
            "stochastic_eval": self.stochastic_eval,
        }


def data_path(name: str) -> Path:
    return Path(str(resources.files("p2pmarl") / "data" / name))


def default_scenario_path() -> Path:
    return data_path("scenario_default.json")


def _resolve_file(value: str, base_dir: Path | None) -> str:
    """Bare names refer to bundled data files; anything else is a path."""
    if "/" not in value and not value.endswith(".json"):
        return str(data_path(f"{value}.json"))
    p = Path(value)
    if not p.is_absolute() and base_dir is not None:
        p = base_dir / p
    return str(p)


def _schema_error_path(exc: jsonschema.ValidationError) -> str:
    parts = [str(p) for p in exc.absolute_path]
    if exc.validator == "required":
        missing = exc.message.split("'")[1]
        parts.append(missing)
    return ".".join(parts) or "<root>"


def validate_scenario_dict(data: dict) -> None:
    validator = jsonschema.Draft7Validator(SCENARIO_SCHEMA)
    errors = sorted(validator.iter_errors(data), key=lambda e: list(e.absolute_path))
    if errors:
        exc = errors[0]
        raise ConfigError(_schema_error_path(exc), exc.message)
    t = data["tariffs"]
    if not t["fit"] < t["ur"]:
        raise ConfigError("tariffs.fit", f"feed-in tariff {t['fit']} must be below utility rate {t['ur']}")
    v = data["voltage"]
    if not v["v_lo"] < v["v_hi"]:
        raise ConfigError("voltage.v_lo", f"v_lo {v['v_lo']} must be below v_hi {v['v_hi']}")
    p = data.get("prosumer", {})
    for lo, hi in (("comfort_lo", "comfort_hi"), ("discharge_temp_lo", "discharge_temp_hi")):
        if lo in p and hi in p and not p[lo] < p[hi]:
            raise ConfigError(f"prosumer.{lo}", f"{lo} must be below {hi}")


def scenario_from_dict(data: dict, base_dir: Path | None = None) -> ScenarioConfig:
    validate_scenario_dict(data)
    v = data["voltage"]
    m = data.get("market", {})
    ppo_kw = dict(data.get("ppo", {}))
    try:
        ppo = PpoConfig(**ppo_kw)
    except ValueError as exc:
        raise ConfigError("ppo", str(exc)) from None
    scenario = ScenarioConfig(
        network_path=_resolve_file(data["network"], base_dir),
        profiles_path=_resolve_file(data["profiles"], base_dir),
        prosumer_defaults=dict(data.get("prosumer", {})),
        prosumer_overrides=copy.deepcopy(data.get("prosumer_overrides", {})),
        tariffs=Tariffs(data["tariffs"]["fit"], data["tariffs"]["ur"]),
        lam=v["lambda"],
        v_lo=v["v_lo"],
        v_hi=v["v_hi"],
        slack_v=v.get("slack_v", 1.0),
        pf_tol=v.get("tol", 1e-8),
        pf_max_iter=v.get("max_iter", 30),
        ppo=ppo,
        n_episodes=data["n_episodes"],
        seed=data["seed"],
        p2p_enabled=m.get("p2p_enabled", True),
        imbalance_enabled=m.get("imbalance_enabled", True),
        sell_cap_enabled=m.get("sell_cap_enabled", True),
        checkpoint_every=data.get("checkpoint_every", 0),
        stochastic_eval=data.get("stochastic_eval", False),
    )
    # surface prosumer parameter errors (e.g. efficiencies, zone gain) with a path
    try:
        ProsumerConfig(**{k: val for k, val in scenario.prosumer_defaults.items()
                          if k in {f.name for f in fields(ProsumerConfig)}})
    except ValueError as exc:
        raise ConfigError("prosumer", str(exc)) from None
    return scenario


def load_scenario(path: str | Path | None = None) -> tuple[ScenarioConfig, str]:
    """Read a scenario file; returns the config and the sha256 of the file bytes."""
    path = Path(path) if path is not None else default_scenario_path()
    raw = path.read_bytes()
    data = json.loads(raw)
    return scenario_from_dict(data, path.parent), hashlib.sha256(raw).hexdigest()
