"""Regenerate the bundled balanced 13-bus feeder equivalent.

Positive-sequence series impedance of each line configuration is
``mean(self) - mean(mutual)`` of the published phase impedance matrix
(single-phase configurations use the self term). Shunt susceptance is reduced
the same way. The result is scaled to a prosumer-sized feeder:

* bus peak loads are ``BASE_LOAD_KW + spot_load_kw / LOAD_DIVISOR``;
* all series impedances are multiplied by ``Z_SCALE`` (susceptances divided)
  so the voltage drop at prosumer-scale loads is of the same order as on the
  original, regulated feeder.

The regulator and the 671-692 switch become plain branches; the 633-634
transformer becomes its leakage impedance.

Run:  python scripts/build_ieee13_equivalent.py [output.json]
"""
from __future__ import annotations

import json
import sys
from pathlib import Path

import numpy as np

V_BASE_KV = 4.16
S_BASE_KVA = 1000.0
Z_SCALE = 15.0
BASE_LOAD_KW = 25.0
LOAD_DIVISOR = 40.0
SWITCH_Z_PU = (1e-5, 1e-4)

# ohm/mile and microsiemens/mile, phase matrices from the IEEE 13 node test feeder
CONFIGS = {
    "601": dict(
        z_self=[0.3465 + 1.0179j, 0.3375 + 1.0478j, 0.3414 + 1.0348j],
        z_mut=[0.1560 + 0.5017j, 0.1580 + 0.4236j, 0.1535 + 0.3849j],
        b_self=[6.2998, 5.9597, 5.6386],
        b_mut=[-1.9958, -1.2595, -0.7417],
    ),
    "602": dict(
        z_self=[0.7526 + 1.1814j, 0.7475 + 1.1983j, 0.7436 + 1.2112j],
        z_mut=[0.1580 + 0.4236j, 0.1560 + 0.5017j, 0.1535 + 0.3849j],
        b_self=[5.6990, 5.1795, 5.4246],
        b_mut=[-1.0817, -1.6905, -0.6588],
    ),
    "603": dict(
        z_self=[1.3294 + 1.3471j, 1.3238 + 1.3569j],
        z_mut=[0.2066 + 0.4591j],
        b_self=[4.7097, 4.6658],
        b_mut=[-0.8999],
    ),
    "604": dict(
        z_self=[1.3238 + 1.3569j, 1.3294 + 1.3471j],
        z_mut=[0.2066 + 0.4591j],
        b_self=[4.6658, 4.7097],
        b_mut=[-0.8999],
    ),
    "605": dict(z_self=[1.3292 + 1.3475j], z_mut=[], b_self=[4.5193], b_mut=[]),
    "606": dict(
        z_self=[0.7982 + 0.4463j, 0.7891 + 0.4041j, 0.7982 + 0.4463j],
        z_mut=[0.3192 + 0.0328j, 0.2849 - 0.0143j, 0.3192 + 0.0328j],
        b_self=[96.8897, 96.8897, 96.8897],
        b_mut=[0.0, 0.0, 0.0],
    ),
    "607": dict(z_self=[1.3425 + 0.5124j], z_mut=[], b_self=[88.9912], b_mut=[]),
}

BUS_NAMES = ["650", "632", "633", "634", "645", "646", "671", "680", "684", "611", "652", "692", "675"]

# total kW over phases; the 632-671 distributed load is split between its ends
SPOT_LOAD_KW = {
    "632": 100.0, "633": 0.0, "634": 400.0, "645": 170.0, "646": 230.0,
    "671": 1255.0, "680": 0.0, "684": 0.0, "611": 170.0, "652": 128.0,
    "692": 170.0, "675": 843.0,
}

# (from, to, length_ft, config) ; config None marks non-line devices
SEGMENTS = [
    ("650", "632", 2000, "601"),
    ("632", "633", 500, "602"),
    ("633", "634", None, "xfm"),
    ("632", "645", 500, "603"),
    ("645", "646", 300, "603"),
    ("632", "671", 2000, "601"),
    ("671", "680", 1000, "601"),
    ("671", "684", 300, "604"),
    ("684", "611", 300, "605"),
    ("684", "652", 800, "607"),
    ("671", "692", None, "switch"),
    ("692", "675", 500, "606"),
]


def positive_sequence(cfg: dict) -> tuple[complex, float]:
    z_self = np.mean(cfg["z_self"])
    z_mut = np.mean(cfg["z_mut"]) if cfg["z_mut"] else 0.0
    b_self = np.mean(cfg["b_self"])
    b_mut = np.mean(cfg["b_mut"]) if cfg["b_mut"] else 0.0
    return complex(z_self - z_mut), float(b_self - b_mut)


def build() -> dict:
    z_base = V_BASE_KV**2 / (S_BASE_KVA / 1000.0)
    index = {name: i for i, name in enumerate(BUS_NAMES)}
    branches = []
    for f, t, length_ft, cfg in SEGMENTS:
        if cfg == "xfm":
            # 500 kVA, R = 1.1 %, X = 2 % on its own rating
            z = complex(0.011, 0.02) * (S_BASE_KVA / 500.0)
            b_half = 0.0
        elif cfg == "switch":
            z = complex(*SWITCH_Z_PU)
            b_half = 0.0
        else:
            z1, b1 = positive_sequence(CONFIGS[cfg])
            miles = length_ft / 5280.0
            z = z1 * miles / z_base
            b_half = 0.5 * b1 * 1e-6 * miles * z_base
        z *= Z_SCALE
        b_half /= Z_SCALE
        branches.append(
            {
                "from": index[f],
                "to": index[t],
                "r": round(z.real, 10),
                "x": round(z.imag, 10),
                "b_half": round(b_half, 12),
            }
        )
    buses = []
    for i, name in enumerate(BUS_NAMES):
        bus = {"id": i, "name": name, "kind": "slack" if i == 0 else "load", "shunt_g": 0.0, "shunt_b": 0.0}
        if i:
            bus["peak_load_kw"] = round(BASE_LOAD_KW + SPOT_LOAD_KW[name] / LOAD_DIVISOR, 4)
        buses.append(bus)
    return {
        "description": "Balanced positive-sequence, prosumer-scale equivalent of the IEEE 13 node feeder "
        "(generated by scripts/build_ieee13_equivalent.py; an approximation, not a reproduction)",
        "version": 1,
        "s_base_kva": S_BASE_KVA,
        "v_base_kv": V_BASE_KV,
        "buses": buses,
        "branches": branches,
    }


if __name__ == "__main__":
    default = Path(__file__).resolve().parents[1] / "src" / "p2pmarl" / "data" / "ieee13_equivalent.json"
    out = Path(sys.argv[1]) if len(sys.argv) > 1 else default
    out.write_text(json.dumps(build(), indent=2) + "\n")
    print(f"wrote {out}")
