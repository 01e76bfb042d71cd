from __future__ import annotations

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from p2pmarl import prosumer as pr
from p2pmarl.prosumer import Action, Observation, ProsumerConfig, ProsumerState

CFG = ProsumerConfig()


class FixedUniform:
    """Stand-in generator whose uniform draws sit at a fixed fraction of [lo, hi]."""

    def __init__(self, frac=0.5):
        self.frac = frac

    def uniform(self, lo, hi, size=None):
        val = lo + self.frac * (hi - lo)
        return val if size is None else np.full(size, val)


def obs(pv=0.0, load_p=0.0, load_q=0.0, temp=25.0):
    return Observation(12, temp, pv, load_p, load_q, 1.0, 0.0, 9.5)


def idle_action(cfg=CFG, storage=0.0, reactive=0.0, bid=0.0):
    z = cfg.zones
    return Action(np.zeros(z), np.full(z, 20.0), reactive, storage, bid)


class TestBattery:
    def test_charge(self):
        soc, grid = pr.battery_step(10.0, 2.0, CFG)
        assert soc == pytest.approx(11.9, abs=1e-9) and grid == 2.0

    def test_discharge(self):
        soc, grid = pr.battery_step(10.0, -2.0, CFG)
        assert soc == pytest.approx(10 - 2 / 0.9, abs=1e-9)
        assert soc == pytest.approx(7.7778, abs=1e-4)
        assert grid == -2.0

    def test_clamp_at_capacity(self):
        soc, grid = pr.battery_step(49.5, 2.0, CFG)
        assert soc == pytest.approx(50.0, abs=1e-9)
        # only the stored 0.5 kWh (plus losses) is drawn from the bus
        assert grid == pytest.approx(0.5 / 0.95, abs=1e-12)

    def test_clamp_at_empty(self):
        soc, grid = pr.battery_step(1.0, -5.0, CFG)
        assert soc == 0.0
        assert grid == pytest.approx(-0.9, abs=1e-12)

    def test_round_trip_loss(self):
        x = 4.0
        soc1, drawn = pr.battery_step(10.0, x, CFG)
        soc2, returned = pr.battery_step(soc1, -(soc1 - 10.0) * CFG.eta_d, CFG)
        assert soc2 == pytest.approx(10.0, abs=1e-12)
        assert -returned == pytest.approx(0.855 * drawn, abs=1e-12)

    @settings(max_examples=100)
    @given(st.floats(0, 50), st.lists(st.floats(-10, 10), min_size=1, max_size=50))
    def test_soc_stays_in_bounds(self, soc, actions):
        for a in actions:
            soc, _ = pr.battery_step(soc, a, CFG)
            assert 0.0 <= soc <= CFG.battery_capacity


class TestHvac:
    def test_equilibrium(self):
        T = np.full(5, 24.0)
        T_next, power = pr.hvac_step(T, np.zeros(5), np.full(5, 18.0), 24.0, CFG)
        np.testing.assert_array_equal(T_next, T)
        assert power == 0.0

    def test_drifts_toward_outside(self):
        T = np.array([20.0, 22.0, 25.0, 27.0, 29.0])
        T_next, _ = pr.hvac_step(T, np.zeros(5), np.full(5, 18.0), 33.0, CFG)
        assert np.all(T_next > T) and np.all(T_next < 33.0)

    def test_one_zone_hand_evaluation(self):
        # dt/C = 3600/3000; U(T_out - T) = 0; flow term 0.5 * 1.005 * (15 - 30)
        expected_T = 30.0 + 1.2 * (0.3 * (30.0 - 30.0) + 0.5 * 1.005 * (15.0 - 30.0))
        expected_P = 0.5 * 0.5 + 0.5 * 1.005 * 15.0 / 3.0
        assert expected_T == pytest.approx(20.955, abs=1e-12)
        assert expected_P == pytest.approx(2.7625, abs=1e-12)
        T_next, power = pr.hvac_step([30.0], [0.5], [15.0], 30.0, CFG)
        assert T_next[0] == pytest.approx(20.955, abs=1e-9)
        assert power == pytest.approx(2.7625, abs=1e-9)

    def test_heating_costs_only_fan_power(self):
        _, power = pr.hvac_step([20.0], [0.4], [24.0], 20.0, CFG)
        assert power == pytest.approx(0.5 * 0.4)

    def test_bounded_under_long_random_rollout(self):
        rng = np.random.default_rng(3)
        lo, hi = pr.action_bounds(CFG)
        T = np.full(5, 25.0)
        for _ in range(20000):
            a = pr.clamp_action(rng.uniform(lo, hi), CFG)
            T, power = pr.hvac_step(T, a.flow, a.discharge_temp, rng.uniform(20.0, 35.0), CFG)
            assert np.all(T >= 12.0 - 1e-9) and np.all(T <= 35.0 + 1e-9)
            assert 0.0 <= power <= 5 * (0.5 * 0.5 + 0.5 * 1.005 * 23.0 / 3.0)

    def test_unstable_zone_gain_rejected(self):
        with pytest.raises(ValueError, match="gain"):
            ProsumerConfig(zone_capacitance=1000.0)


class TestComfort:
    def test_in_band(self):
        assert pr.comfort_reward([22.0, 25.0, 28.0], CFG) == 0.0

    def test_hot_zone(self):
        assert pr.comfort_reward([25.0, 30.0], CFG) == pytest.approx(-4.0, abs=1e-9)

    def test_cold_zone(self):
        assert pr.comfort_reward([20.0, 25.0], CFG) == pytest.approx(-4.0, abs=1e-9)

    @settings(max_examples=200)
    @given(st.lists(st.floats(10, 40), min_size=1, max_size=5))
    def test_zero_iff_all_in_band(self, temps):
        r = pr.comfort_reward(temps, CFG)
        inside = all(22.0 <= t <= 28.0 for t in temps)
        assert r <= 0 and (r == 0) == inside


class TestInverter:
    def test_full_headroom(self):
        assert pr.inverter_limit(0.0, 50.0, 50.0) == 50.0

    def test_limited_by_pv(self):
        assert pr.inverter_limit(30.0, 50.0, 50.0) == pytest.approx(40.0, abs=1e-9)

    def test_within_limit_keeps_sign(self):
        assert pr.inverter_limit(30.0, -10.0, 50.0) == -10.0
        assert pr.inverter_limit(30.0, -50.0, 50.0) == pytest.approx(-40.0)

    def test_pv_above_rating_rejected(self):
        with pytest.raises(ValueError):
            pr.inverter_limit(60.0, 0.0, 50.0)

    @settings(max_examples=300)
    @given(st.floats(0, 50), st.floats(-80, 80))
    def test_apparent_power_feasible(self, pv, q):
        q_out = pr.inverter_limit(pv, q, 50.0)
        assert math.hypot(pv, q_out) <= 50.0 + 1e-9
        assert abs(q_out) <= abs(q)


class TestInjection:
    def test_pure_load(self):
        p, q = pr.net_injection(ProsumerState(0.0, np.full(5, 25.0)), idle_action(), obs(load_p=5.0), CFG)
        assert p == pytest.approx(-5.0) and q == 0.0

    def test_pv_load_and_charging(self):
        p, _ = pr.net_injection(ProsumerState(0.0, np.full(5, 25.0)), idle_action(storage=2.0),
                                obs(pv=10.0, load_p=5.0), CFG)
        assert p == pytest.approx(3.0, abs=1e-12)

    def test_reactive(self):
        _, q = pr.net_injection(ProsumerState(0.0, np.full(5, 25.0)), idle_action(reactive=3.0),
                                obs(load_q=2.0), CFG)
        assert q == pytest.approx(1.0, abs=1e-12)

    def test_hvac_draw_enters_injection(self):
        state = ProsumerState(0.0, np.full(5, 30.0))
        action = Action(np.full(5, 0.5), np.full(5, 15.0), 0.0, 0.0, 0.0)
        out = pr.physical_step(state, action, obs(load_p=5.0, temp=30.0), CFG)
        assert out.hvac_power == pytest.approx(5 * 2.7625)
        assert out.p_inj == pytest.approx(-5.0 - 5 * 2.7625)


class TestExogenous:
    PROFILES = pr.load_profiles()

    def test_bundled_profile_shapes(self):
        p = self.PROFILES
        assert len(p.temp_shape) == len(p.load_shape) == len(p.pv_shape) == 24
        assert np.all((p.load_shape >= 0) & (p.load_shape <= 1))
        assert np.all((p.pv_shape >= 0) & (p.pv_shape <= 1))
        assert p.pv_shape[0] == 0 and p.pv_shape[23] == 0 and p.pv_shape[12] > 0
        assert (p.noise_lo, p.noise_hi) == (0.95, 1.05)

    def test_night_pv_is_zero(self):
        rng = np.random.default_rng(0)
        for h in self.PROFILES.dark_hours:
            assert pr.sample_exogenous(h, self.PROFILES, 30.0, 30.0, rng).pv_gen == 0.0

    def test_unit_noise_gives_mean_shapes(self):
        p = self.PROFILES
        ex = pr.sample_exogenous(12, p, 40.0, 30.0, FixedUniform(0.5), 0.95)
        assert ex.outside_temp == pytest.approx(p.temp_shape[12])
        assert ex.pv_gen == pytest.approx(p.pv_shape[12] * 30.0)
        assert ex.load_p == pytest.approx(p.load_shape[12] * 40.0)
        assert ex.load_q == pytest.approx(ex.load_p * math.tan(math.acos(0.95)))

    def test_monte_carlo_noise_law(self):
        p = self.PROFILES
        rng = np.random.default_rng(11)
        draws = np.array([[e.outside_temp, e.pv_gen, e.load_p] for e in
                          (pr.sample_exogenous(12, p, 40.0, 30.0, rng) for _ in range(10000))])
        means = np.array([p.temp_shape[12], p.pv_shape[12] * 30.0, p.load_shape[12] * 40.0])
        np.testing.assert_allclose(draws.mean(axis=0), means, rtol=0.005)
        assert np.all(draws.min(axis=0) >= 0.95 * means - 1e-12)
        assert np.all(draws.max(axis=0) <= 1.05 * means + 1e-12)

    def test_invalid_profile_file(self, tmp_path):
        bad = tmp_path / "p.json"
        bad.write_text(json.dumps({"temp_c": [20] * 24, "load_coeff": [2.0] * 24, "pv_coeff": [0] * 24}))
        with pytest.raises(ValueError, match="load_coeff"):
            pr.load_profiles(bad)


class TestObservation:
    EX = pr.Exogenous(30.0, 10.0, 20.0, 6.0)

    def test_first_day_fallback_price(self):
        o = pr.assemble_observation(3, self.EX, 1.0, 0.0, [], 3, FixedUniform(0.5), 5.0, 14.0)
        assert o.price_lag24 == pytest.approx(9.5)

    def test_lagged_price_indexing(self):
        history = [float(k) for k in range(30)]
        o = pr.assemble_observation(6, self.EX, 0.99, 3.0, history, 30, None, 5.0, 14.0)
        assert o.price_lag24 == 6.0

    def test_dimensions(self):
        o = pr.assemble_observation(0, self.EX, 1.0, 0.0, [], 0, np.random.default_rng(0), 5.0, 14.0)
        assert o.to_array().shape == (pr.OBS_DIM,) == (8,)
        assert CFG.action_dim == 13
        assert idle_action().to_array().shape == (13,)

    def test_normalizer_is_finite(self):
        off, scale = pr.observation_normalizer(CFG, 5.0, 14.0)
        assert off.shape == scale.shape == (8,) and np.all(scale > 0)


class TestActionMapping:
    def test_corners_map_to_bounds(self):
        lo, hi = pr.action_bounds(CFG)
        np.testing.assert_allclose(pr.scale_action(-np.ones(13), CFG).to_array(), lo)
        np.testing.assert_allclose(pr.scale_action(np.ones(13), CFG).to_array(), hi)
        np.testing.assert_allclose(pr.scale_action(5 * np.ones(13), CFG).to_array(), hi)

    def test_clamp(self):
        lo, hi = pr.action_bounds(CFG)
        a = pr.clamp_action(hi + 100, CFG)
        np.testing.assert_allclose(a.to_array(), hi)

    def test_round_trip(self):
        vec = np.arange(13, dtype=float)
        np.testing.assert_array_equal(Action.from_array(vec, 5).to_array(), vec)
        with pytest.raises(ValueError):
            Action.from_array(np.zeros(12), 5)

    @settings(max_examples=100)
    @given(st.lists(st.floats(-3, 3), min_size=13, max_size=13))
    def test_scaled_actions_inside_box(self, u):
        lo, hi = pr.action_bounds(CFG)
        a = pr.scale_action(np.array(u), CFG).to_array()
        assert np.all(a >= lo - 1e-12) and np.all(a <= hi + 1e-12)


class TestConfigValidation:
    @pytest.mark.parametrize("kw", [dict(eta_c=0.0), dict(eta_d=1.5), dict(battery_capacity=-1.0),
                                    dict(comfort_lo=30.0), dict(zones=0), dict(power_factor=0.0),
                                    dict(initial_soc=60.0)])
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            ProsumerConfig(**kw)
