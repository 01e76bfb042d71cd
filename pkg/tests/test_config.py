from __future__ import annotations

import copy
import json

import pytest

from p2pmarl.config import ConfigError, default_scenario_path, load_scenario, scenario_from_dict
from p2pmarl.sim import Simulator


@pytest.fixture
def raw():
    return json.loads(default_scenario_path().read_text())


def expect_error(data, path_prefix):
    with pytest.raises(ConfigError) as info:
        scenario_from_dict(data)
    assert info.value.path.startswith(path_prefix), info.value.path
    return info.value


class TestBundled:
    def test_loads_with_expected_values(self):
        sc, digest = load_scenario()
        assert len(digest) == 64
        assert (sc.tariffs.fit, sc.tariffs.ur) == (5.0, 14.0)
        assert (sc.v_lo, sc.v_hi, sc.lam) == (0.96, 1.04, 1e4)
        assert sc.ppo.gamma == 0.999 and sc.ppo.clip_eps == 0.2
        assert sc.p2p_enabled and sc.imbalance_enabled and sc.sell_cap_enabled
        assert sc.n_episodes == 1500

    def test_twelve_prosumers_one_per_load_bus(self):
        s = Simulator(load_scenario()[0])
        buses = [c.bus_id for c in s.configs]
        assert len(buses) == 12 == len(set(buses))
        assert s.net.slack not in buses

    def test_round_trip(self, raw):
        sc = scenario_from_dict(raw)
        again = scenario_from_dict(sc.to_dict())
        assert again.to_dict() == sc.to_dict()
        assert again.ppo == sc.ppo


class TestRejections:
    def test_missing_utility_rate(self, raw):
        del raw["tariffs"]["ur"]
        err = expect_error(raw, "tariffs.ur")
        assert err.path == "tariffs.ur"

    @pytest.mark.parametrize("fit,ur", [(14.0, 14.0), (15.0, 14.0)])
    def test_fit_not_below_ur(self, raw, fit, ur):
        raw["tariffs"] = {"fit": fit, "ur": ur}
        expect_error(raw, "tariffs.fit")

    @pytest.mark.parametrize("lo,hi", [(1.04, 1.04), (1.05, 0.95)])
    def test_band_inverted(self, raw, lo, hi):
        raw["voltage"]["v_lo"], raw["voltage"]["v_hi"] = lo, hi
        expect_error(raw, "voltage.v_lo")

    @pytest.mark.parametrize("key", ["battery_capacity", "pv_capacity_kw", "inverter_s_max_kva", "charge_rate_max"])
    def test_negative_capacity(self, raw, key):
        raw["prosumer"][key] = -1.0
        expect_error(raw, f"prosumer.{key}")

    def test_negative_override_capacity(self, raw):
        raw["prosumer_overrides"] = {"3": {"battery_capacity": -5.0}}
        expect_error(raw, "prosumer_overrides.3.battery_capacity")

    def test_comfort_band_inverted(self, raw):
        raw["prosumer"]["comfort_lo"] = 30.0
        expect_error(raw, "prosumer.comfort_lo")

    def test_efficiency_above_one(self, raw):
        raw["prosumer"]["eta_c"] = 1.2
        expect_error(raw, "prosumer.eta_c")

    def test_unknown_key(self, raw):
        raw["tarifs"] = {}
        expect_error(raw, "<root>")

    def test_wrong_type(self, raw):
        raw["seed"] = "seven"
        expect_error(raw, "seed")

    def test_ppo_gamma_one(self, raw):
        raw["ppo"]["gamma"] = 1.0
        expect_error(raw, "ppo.gamma")

    def test_unstable_thermal_parameters(self, raw):
        raw["prosumer"]["zone_capacitance"] = 500.0
        expect_error(raw, "prosumer")


class TestResolution:
    def test_overrides_apply_per_bus(self, raw):
        raw["prosumer_overrides"] = {"2": {"pv_capacity_kw": 10.0, "peak_load_kw": 12.0}}
        s = Simulator(scenario_from_dict(raw))
        by_bus = {c.bus_id: c for c in s.configs}
        assert by_bus[2].pv_capacity_kw == 10.0 and by_bus[2].peak_load_kw == 12.0
        assert by_bus[3].pv_capacity_kw == 30.0

    def test_peak_loads_come_from_network(self):
        s = Simulator(load_scenario()[0])
        peaks = {b.id: b.peak_load_kw for b in s.net.buses}
        assert all(c.peak_load_kw == peaks[c.bus_id] for c in s.configs)

    def test_relative_paths_resolve_next_to_file(self, raw, tmp_path):
        with open(load_scenario()[0].network_path) as fh:
            net = json.load(fh)
        (tmp_path / "feeder.json").write_text(json.dumps(net))
        data = copy.deepcopy(raw)
        data["network"] = "feeder.json"
        path = tmp_path / "scenario.json"
        path.write_text(json.dumps(data))
        sc, _ = load_scenario(path)
        assert sc.network_path == str(tmp_path / "feeder.json")

    def test_file_hash_tracks_bytes(self, raw, tmp_path):
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        a.write_text(json.dumps(raw))
        b.write_text(json.dumps(raw, indent=1))
        ha, hb = load_scenario(a)[1], load_scenario(b)[1]
        assert ha != hb
        assert load_scenario(a)[0].to_dict() == load_scenario(b)[0].to_dict()
