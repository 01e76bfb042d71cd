"""Network admittance, Newton-Raphson AC power flow and the voltage penalty.

All quantities are per-unit on the network's ``s_base_kva`` / ``v_base_kv``.
The solver works on a balanced positive-sequence model with one slack bus and
PQ buses everywhere else.
"""
from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import jsonschema
import numpy as np

SLACK = "slack"
LOAD = "load"

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 30

NETWORK_SCHEMA = {
    "type": "object",
    "required": ["s_base_kva", "v_base_kv", "buses", "branches"],
    "properties": {
        "s_base_kva": {"type": "number", "exclusiveMinimum": 0},
        "v_base_kv": {"type": "number", "exclusiveMinimum": 0},
        "buses": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["id", "kind"],
                "properties": {
                    "id": {"type": "integer", "minimum": 0},
                    "kind": {"enum": [SLACK, LOAD]},
                    "shunt_g": {"type": "number"},
                    "shunt_b": {"type": "number"},
                    "name": {"type": "string"},
                    "peak_load_kw": {"type": "number", "minimum": 0},
                },
            },
        },
        "branches": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["from", "to", "r", "x"],
                "properties": {
                    "from": {"type": "integer", "minimum": 0},
                    "to": {"type": "integer", "minimum": 0},
                    "r": {"type": "number", "minimum": 0},
                    "x": {"type": "number"},
                    "b_half": {"type": "number"},
                },
            },
        },
    },
}


class NetworkError(ValueError):
    """Invalid network topology or data."""


class PowerFlowError(RuntimeError):
    pass


class SingularJacobianError(PowerFlowError):
    """The Newton step could not be computed."""


@dataclass(frozen=True)
class BusSpec:
    id: int
    kind: str = LOAD
    shunt_g: float = 0.0
    shunt_b: float = 0.0
    name: str = ""
    peak_load_kw: float = 0.0


@dataclass(frozen=True)
class BranchSpec:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_half: float = 0.0

    def __post_init__(self):
        if self.from_bus == self.to_bus:
            raise NetworkError(f"branch {self.from_bus}-{self.to_bus} is a self loop")
        if self.r < 0:
            raise NetworkError(f"branch {self.from_bus}-{self.to_bus} has negative resistance")
        if self.r == 0 and self.x == 0:
            raise NetworkError(f"branch {self.from_bus}-{self.to_bus} has zero impedance")


@dataclass(frozen=True)
class NetworkModel:
    buses: tuple[BusSpec, ...]
    branches: tuple[BranchSpec, ...]
    Y: np.ndarray = field(repr=False)
    v_base_kv: float = 1.0
    s_base_kva: float = 1.0

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def slack(self) -> int:
        return next(b.id for b in self.buses if b.kind == SLACK)

    @property
    def load_buses(self) -> list[int]:
        return [b.id for b in self.buses if b.kind != SLACK]


@dataclass
class PowerFlowSolution:
    v_mag: np.ndarray
    v_ang: np.ndarray
    mismatch: float
    iterations: int
    converged: bool
    slack: int = 0


def build_admittance(
    buses: Sequence[BusSpec],
    branches: Sequence[BranchSpec],
    v_base_kv: float = 1.0,
    s_base_kva: float = 1.0,
) -> NetworkModel:
    """Assemble the dense bus admittance matrix from branch pi-models."""
    ids = [b.id for b in buses]
    if len(set(ids)) != len(ids):
        raise NetworkError("duplicate bus id")
    n = len(buses)
    if sorted(ids) != list(range(n)):
        raise NetworkError("bus ids must be contiguous 0..N-1")
    n_slack = sum(b.kind == SLACK for b in buses)
    if n_slack != 1:
        raise NetworkError(f"expected exactly one slack bus, found {n_slack}")

    Y = np.zeros((n, n), dtype=complex)
    for bus in buses:
        Y[bus.id, bus.id] += complex(bus.shunt_g, bus.shunt_b)
    for br in branches:
        if not (0 <= br.from_bus < n and 0 <= br.to_bus < n):
            raise NetworkError(f"branch {br.from_bus}-{br.to_bus} references a missing bus")
        if br.r == 0 and br.x == 0:
            raise NetworkError(f"branch {br.from_bus}-{br.to_bus} has zero impedance")
        y = 1.0 / complex(br.r, br.x)
        f, t = br.from_bus, br.to_bus
        Y[f, f] += y + 1j * br.b_half
        Y[t, t] += y + 1j * br.b_half
        Y[f, t] -= y
        Y[t, f] -= y
    Y.flags.writeable = False
    ordered = tuple(sorted(buses, key=lambda b: b.id))
    return NetworkModel(ordered, tuple(branches), Y, float(v_base_kv), float(s_base_kva))


def check_connected(net: NetworkModel) -> None:
    """Raise NetworkError if any bus has no path to the slack bus."""
    adj: dict[int, list[int]] = {b.id: [] for b in net.buses}
    for br in net.branches:
        adj[br.from_bus].append(br.to_bus)
        adj[br.to_bus].append(br.from_bus)
    seen = {net.slack}
    queue = deque([net.slack])
    while queue:
        k = queue.popleft()
        for j in adj[k]:
            if j not in seen:
                seen.add(j)
                queue.append(j)
    islanded = sorted(set(adj) - seen)
    if islanded:
        raise NetworkError(f"islanded buses (no path to slack): {islanded}")


def network_from_dict(data: dict) -> NetworkModel:
    try:
        jsonschema.validate(data, NETWORK_SCHEMA)
    except jsonschema.ValidationError as exc:
        path = ".".join(str(p) for p in exc.absolute_path) or "<root>"
        raise NetworkError(f"network file invalid at {path}: {exc.message}") from None
    buses = [
        BusSpec(
            id=b["id"],
            kind=b["kind"],
            shunt_g=b.get("shunt_g", 0.0),
            shunt_b=b.get("shunt_b", 0.0),
            name=b.get("name", ""),
            peak_load_kw=b.get("peak_load_kw", 0.0),
        )
        for b in data["buses"]
    ]
    branches = [
        BranchSpec(br["from"], br["to"], br["r"], br["x"], br.get("b_half", 0.0))
        for br in data["branches"]
    ]
    return build_admittance(buses, branches, data["v_base_kv"], data["s_base_kva"])


def load_network(path: str | Path) -> NetworkModel:
    """Read and schema-validate a network JSON file.

    Malformed JSON raises ``json.JSONDecodeError`` (which carries line and
    column); schema or topology problems raise ``NetworkError``.
    """
    text = Path(path).read_text()
    return network_from_dict(json.loads(text))


def bundled_network_path(name: str = "ieee13_equivalent") -> Path:
    return Path(str(resources.files("p2pmarl") / "data" / f"{name}.json"))


def power_injections(Y: np.ndarray, v_mag: np.ndarray, v_ang: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Evaluate the bus-injection equations: P_k and Q_k for every bus."""
    V = v_mag * np.exp(1j * v_ang)
    S = V * np.conj(Y @ V)
    return S.real, S.imag


def _jacobian(Y: np.ndarray, V: np.ndarray, idx: np.ndarray) -> np.ndarray:
    I = Y @ V
    Vnorm = V / np.abs(V)
    dS_dth = 1j * np.diag(V) @ np.conj(np.diag(I) - Y @ np.diag(V))
    dS_dvm = np.diag(V) @ np.conj(Y @ np.diag(Vnorm)) + np.diag(np.conj(I) * Vnorm)
    sub_th = dS_dth[np.ix_(idx, idx)]
    sub_vm = dS_dvm[np.ix_(idx, idx)]
    return np.block([[sub_th.real, sub_vm.real], [sub_th.imag, sub_vm.imag]])


def solve_power_flow(
    net: NetworkModel,
    injections,
    slack_v: float = 1.0,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
) -> PowerFlowSolution:
    """Newton-Raphson on the polar mismatch equations from a flat start.

    ``injections`` is an (N, 2) array-like of per-unit (p, q), generation
    positive. The slack row is ignored. Returns ``converged=False`` when the
    iteration limit is hit; raises ``SingularJacobianError`` if a Newton step
    cannot be solved.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    inj = np.asarray(injections, dtype=float).reshape(net.n_bus, 2)
    slack = net.slack
    pq = np.array(net.load_buses, dtype=int)
    Y = net.Y
    v_mag = np.full(net.n_bus, float(slack_v))
    v_ang = np.zeros(net.n_bus)
    m = len(pq)

    def residual():
        p, q = power_injections(Y, v_mag, v_ang)
        return np.concatenate([p[pq] - inj[pq, 0], q[pq] - inj[pq, 1]])

    F = residual()
    err = float(np.max(np.abs(F))) if m else 0.0
    it = 0
    while err >= tol and it < max_iter:
        V = v_mag * np.exp(1j * v_ang)
        J = _jacobian(Y, V, pq)
        try:
            dx = np.linalg.solve(J, -F)
        except np.linalg.LinAlgError as exc:
            raise SingularJacobianError(f"singular Jacobian at iteration {it}") from exc
        v_ang[pq] += dx[:m]
        v_mag[pq] += dx[m:]
        it += 1
        if not np.all(v_mag[pq] > 0):
            # voltage collapse: the iteration has left the physical region
            err = float("inf")
            break
        F = residual()
        err = float(np.max(np.abs(F)))
        if not np.isfinite(err):
            break
    converged = bool(np.isfinite(err) and err < tol)
    return PowerFlowSolution(v_mag, v_ang, err, it, converged, slack)


def bus_deviation(v_mag, v_lo: float, v_hi: float) -> np.ndarray:
    v = np.asarray(v_mag, dtype=float)
    return np.maximum(0.0, v - v_hi) + np.maximum(0.0, v_lo - v)


def voltage_violation(
    sol: PowerFlowSolution, v_lo: float = 0.96, v_hi: float = 1.04, lam: float = 1e4
) -> tuple[np.ndarray, float]:
    """Per-bus band deviation and the shared penalty ``-lam * sum(dev)``.

    The slack bus is included in the sum.
    """
    if not sol.converged:
        raise PowerFlowError("voltage penalty requested for an unconverged power flow")
    if not v_lo < v_hi:
        raise ValueError("v_lo must be below v_hi")
    dev = bus_deviation(sol.v_mag, v_lo, v_hi)
    return dev, -lam * float(dev.sum())


def failed_flow_violation(n_bus: int, v_lo: float, v_hi: float, lam: float) -> tuple[np.ndarray, float]:
    """Penalty used when the power flow fails: every bus deviates by the band width."""
    dev = np.full(n_bus, v_hi - v_lo)
    return dev, -lam * float(dev.sum())
