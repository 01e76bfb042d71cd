"""One prosumer's physical environment.

Each prosumer sits on a feeder bus and owns a battery, a rooftop PV system
behind a smart inverter, a multi-zone HVAC system and an inflexible base load.
A step is one hour, so kW and kWh are numerically interchangeable.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

OBS_DIM = 8
DT_SECONDS = 3600.0

PROFILE_SCHEMA = {
    "type": "object",
    "required": ["temp_c", "load_coeff", "pv_coeff"],
    "properties": {
        "temp_c": {"type": "array", "items": {"type": "number"}, "minItems": 24, "maxItems": 24},
        "load_coeff": {
            "type": "array",
            "items": {"type": "number", "minimum": 0, "maximum": 1},
            "minItems": 24,
            "maxItems": 24,
        },
        "pv_coeff": {
            "type": "array",
            "items": {"type": "number", "minimum": 0, "maximum": 1},
            "minItems": 24,
            "maxItems": 24,
        },
        "noise_lo": {"type": "number", "exclusiveMinimum": 0},
        "noise_hi": {"type": "number", "exclusiveMinimum": 0},
    },
}


@dataclass(frozen=True)
class ProsumerConfig:
    bus_id: int = 1
    battery_capacity: float = 50.0
    eta_c: float = 0.95
    eta_d: float = 0.9
    charge_rate_max: float = 10.0
    pv_capacity_kw: float = 30.0
    inverter_s_max_kva: float = 50.0
    peak_load_kw: float = 30.0
    power_factor: float = 0.95
    zones: int = 5
    comfort_lo: float = 22.0
    comfort_hi: float = 28.0
    flow_max: float = 0.5
    discharge_temp_lo: float = 12.0
    discharge_temp_hi: float = 24.0
    bid_bound: float = 50.0
    # first-order zone model; capacitance kJ/K, conductance kW/K
    zone_capacitance: float = 3000.0
    zone_conductance: float = 0.3
    c_air: float = 1.005
    fan_coeff: float = 0.5
    cop: float = 3.0
    initial_zone_temp: float = 25.0
    initial_soc: float = 0.0

    def __post_init__(self):
        if not 0 < self.eta_c <= 1 or not 0 < self.eta_d <= 1:
            raise ValueError("battery efficiencies must lie in (0, 1]")
        if self.battery_capacity <= 0:
            raise ValueError("battery_capacity must be positive")
        if not self.comfort_lo < self.comfort_hi:
            raise ValueError("comfort_lo must be below comfort_hi")
        if not self.discharge_temp_lo < self.discharge_temp_hi:
            raise ValueError("discharge_temp_lo must be below discharge_temp_hi")
        if self.zones < 1:
            raise ValueError("zones must be at least 1")
        for name in ("charge_rate_max", "pv_capacity_kw", "inverter_s_max_kva", "flow_max", "bid_bound",
                     "zone_capacitance", "zone_conductance", "c_air", "cop"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.peak_load_kw < 0 or self.fan_coeff < 0:
            raise ValueError("peak_load_kw and fan_coeff must be non-negative")
        if not 0 < self.power_factor <= 1:
            raise ValueError("power_factor must lie in (0, 1]")
        if not 0 <= self.initial_soc <= self.battery_capacity:
            raise ValueError("initial_soc outside [0, battery_capacity]")
        # explicit Euler keeps zone temperatures a convex combination only below this
        gain = DT_SECONDS / self.zone_capacitance * (self.zone_conductance + self.flow_max * self.c_air)
        if gain > 1.0:
            raise ValueError(f"zone model gain {gain:.3f} > 1; increase zone_capacitance")

    @property
    def action_dim(self) -> int:
        return 2 * self.zones + 3


@dataclass
class ProsumerState:
    soc: float
    zone_temps: np.ndarray

    @classmethod
    def initial(cls, cfg: ProsumerConfig) -> "ProsumerState":
        return cls(cfg.initial_soc, np.full(cfg.zones, cfg.initial_zone_temp))


@dataclass(frozen=True)
class Observation:
    hour: int
    outside_temp: float
    pv_gen: float
    load_p: float
    load_q: float
    v_mag: float
    soc: float
    price_lag24: float

    def to_array(self) -> np.ndarray:
        return np.array(
            [self.hour, self.outside_temp, self.pv_gen, self.load_p, self.load_q, self.v_mag, self.soc,
             self.price_lag24],
            dtype=float,
        )


@dataclass(frozen=True)
class Action:
    flow: np.ndarray
    discharge_temp: np.ndarray
    reactive: float
    storage: float
    bid: float

    def to_array(self) -> np.ndarray:
        return np.concatenate([self.flow, self.discharge_temp, [self.reactive, self.storage, self.bid]])

    @classmethod
    def from_array(cls, vec, zones: int) -> "Action":
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (2 * zones + 3,):
            raise ValueError(f"action vector must have length {2 * zones + 3}, got {vec.shape}")
        return cls(vec[:zones].copy(), vec[zones:2 * zones].copy(), float(vec[-3]), float(vec[-2]), float(vec[-1]))


@dataclass(frozen=True)
class ExogenousProfiles:
    temp_shape: np.ndarray
    load_shape: np.ndarray
    pv_shape: np.ndarray
    noise_lo: float = 0.95
    noise_hi: float = 1.05

    @property
    def dark_hours(self) -> list[int]:
        return [h for h in range(24) if self.pv_shape[h] == 0]


@dataclass(frozen=True)
class Exogenous:
    outside_temp: float
    pv_gen: float
    load_p: float
    load_q: float


def load_profiles(path: str | Path | None = None) -> ExogenousProfiles:
    if path is None:
        path = Path(str(resources.files("p2pmarl") / "data" / "profiles.json"))
    data = json.loads(Path(path).read_text())
    try:
        jsonschema.validate(data, PROFILE_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = ".".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ValueError(f"profile file invalid at {where}: {exc.message}") from None
    lo, hi = data.get("noise_lo", 0.95), data.get("noise_hi", 1.05)
    if not lo <= hi:
        raise ValueError("profile file invalid: noise_lo must not exceed noise_hi")
    return ExogenousProfiles(
        np.array(data["temp_c"], dtype=float),
        np.array(data["load_coeff"], dtype=float),
        np.array(data["pv_coeff"], dtype=float),
        lo,
        hi,
    )


def action_bounds(cfg: ProsumerConfig) -> tuple[np.ndarray, np.ndarray]:
    z = cfg.zones
    lo = np.concatenate([np.zeros(z), np.full(z, cfg.discharge_temp_lo),
                         [-cfg.inverter_s_max_kva, -cfg.charge_rate_max, -cfg.bid_bound]])
    hi = np.concatenate([np.full(z, cfg.flow_max), np.full(z, cfg.discharge_temp_hi),
                         [cfg.inverter_s_max_kva, cfg.charge_rate_max, cfg.bid_bound]])
    return lo, hi


def clamp_action(vec, cfg: ProsumerConfig) -> Action:
    lo, hi = action_bounds(cfg)
    return Action.from_array(np.clip(vec, lo, hi), cfg.zones)


def scale_action(u, cfg: ProsumerConfig) -> Action:
    """Map a policy output in normalized [-1, 1] coordinates onto the action box.

    Components outside [-1, 1] are clamped first.
    """
    lo, hi = action_bounds(cfg)
    u = np.clip(np.asarray(u, dtype=float), -1.0, 1.0)
    return Action.from_array(lo + 0.5 * (u + 1.0) * (hi - lo), cfg.zones)


def battery_step(soc: float, a_s: float, cfg: ProsumerConfig) -> tuple[float, float]:
    """Advance the state of charge by one hour.

    Returns the next SOC and the energy exchanged with the bus (positive when
    the battery draws from the bus). When the capacity or empty clamp binds,
    the bus energy matches the SOC change that actually happened.
    """
    raw = soc + cfg.eta_c * max(a_s, 0.0) + min(a_s, 0.0) / cfg.eta_d
    soc_next = max(min(raw, cfg.battery_capacity), 0.0)
    if raw == soc_next:
        return soc_next, float(a_s)
    delta = soc_next - soc
    grid = delta / cfg.eta_c if a_s > 0 else delta * cfg.eta_d
    return soc_next, grid


def hvac_step(zone_temps, flow, discharge_temp, outside_temp: float, cfg: ProsumerConfig):
    """First-order thermal update of every zone and the HVAC electric draw (kW)."""
    T = np.asarray(zone_temps, dtype=float)
    m = np.asarray(flow, dtype=float)
    Td = np.asarray(discharge_temp, dtype=float)
    k = DT_SECONDS / cfg.zone_capacitance
    T_next = T + k * (cfg.zone_conductance * (outside_temp - T) + m * cfg.c_air * (Td - T))
    cooling = m * cfg.c_air * np.maximum(0.0, T - Td) / cfg.cop
    power = float(np.sum(cfg.fan_coeff * m + cooling))
    return T_next, power


def comfort_reward(zone_temps, cfg: ProsumerConfig) -> float:
    T = np.asarray(zone_temps, dtype=float)
    over = np.maximum(0.0, T - cfg.comfort_hi)
    under = np.maximum(0.0, cfg.comfort_lo - T)
    return -float(np.sum(over**2 + under**2))


def inverter_limit(pv_gen: float, requested_q: float, s_max: float) -> float:
    """Reactive power the inverter can deliver next to ``pv_gen`` kW of real output."""
    if pv_gen < 0:
        raise ValueError("PV generation must be non-negative")
    if pv_gen > s_max:
        raise ValueError(f"PV output {pv_gen} kW exceeds inverter rating {s_max} kVA")
    headroom = math.sqrt(max(0.0, s_max**2 - pv_gen**2))
    return math.copysign(min(abs(requested_q), headroom), requested_q)


@dataclass
class StepOutcome:
    soc_next: float
    zone_temps_next: np.ndarray
    battery_grid: float
    hvac_power: float
    q_actual: float
    p_inj: float
    q_inj: float


def physical_step(state: ProsumerState, action: Action, obs: Observation, cfg: ProsumerConfig) -> StepOutcome:
    soc_next, grid = battery_step(state.soc, action.storage, cfg)
    temps_next, hvac = hvac_step(state.zone_temps, action.flow, action.discharge_temp, obs.outside_temp, cfg)
    q = inverter_limit(obs.pv_gen, action.reactive, cfg.inverter_s_max_kva)
    p_inj = obs.pv_gen - obs.load_p - hvac - grid
    q_inj = q - obs.load_q
    return StepOutcome(soc_next, temps_next, grid, hvac, q, p_inj, q_inj)


def net_injection(state: ProsumerState, action: Action, obs: Observation, cfg: ProsumerConfig) -> tuple[float, float]:
    """Net (kW, kVAr) injected at the prosumer's bus, generation positive."""
    out = physical_step(state, action, obs, cfg)
    return out.p_inj, out.q_inj


def sample_exogenous(hour: int, profiles: ExogenousProfiles, peak_load_kw: float, pv_capacity_kw: float,
                     rng, power_factor: float = 0.95) -> Exogenous:
    """Draw this hour's outside temperature, PV output and base load.

    Each of the three means is scaled by an independent uniform factor in
    ``[noise_lo, noise_hi]``.
    """
    u = rng.uniform(profiles.noise_lo, profiles.noise_hi, size=3)
    temp = profiles.temp_shape[hour] * u[0]
    pv = profiles.pv_shape[hour] * pv_capacity_kw * u[1]
    pv = min(pv, pv_capacity_kw)
    load_p = profiles.load_shape[hour] * peak_load_kw * u[2]
    load_q = load_p * math.tan(math.acos(power_factor))
    return Exogenous(float(temp), float(pv), float(load_p), float(load_q))


def assemble_observation(hour: int, exog: Exogenous, v_mag_prev: float, soc: float, price_history,
                         t: int, rng, fit: float, ur: float) -> Observation:
    """Build the 8-component observation at global step ``t``.

    ``price_history[k]`` is the clearing price of global step k. During the
    first day the lagged price is a uniform draw in [fit, ur].
    """
    if t >= 24:
        lag = float(price_history[t - 24])
    else:
        lag = float(rng.uniform(fit, ur))
    return Observation(hour, exog.outside_temp, exog.pv_gen, exog.load_p, exog.load_q, float(v_mag_prev),
                       float(soc), lag)


def observation_normalizer(cfg: ProsumerConfig, fit: float, ur: float) -> tuple[np.ndarray, np.ndarray]:
    """Fixed (offset, scale) that puts every observation component roughly in [-1, 1]."""
    offset = np.array([11.5, 27.0, 0.5 * cfg.pv_capacity_kw, 0.5 * cfg.peak_load_kw, 0.0, 1.0,
                       0.5 * cfg.battery_capacity, 0.5 * (fit + ur)])
    q_peak = cfg.peak_load_kw * math.tan(math.acos(cfg.power_factor))
    scale = np.array([11.5, 8.0, 0.5 * cfg.pv_capacity_kw, max(0.5 * cfg.peak_load_kw, 1e-6),
                      max(q_peak, 1e-6), 0.05, 0.5 * cfg.battery_capacity, 0.5 * (ur - fit)])
    return offset, scale
