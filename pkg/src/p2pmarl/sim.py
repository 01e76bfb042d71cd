"""Coupled market / power-flow / learning loop.

One step is one hour: every agent observes and acts, the round is cleared,
the feeder power flow is solved on the resulting injections, rewards are
assembled and handed to each agent's learner. The environment is continuing;
24-step episodes only delimit metrics and trajectory chunks.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import grid, market
from .config import ScenarioConfig
from .prosumer import (
    OBS_DIM,
    ProsumerConfig,
    ProsumerState,
    assemble_observation,
    comfort_reward,
    load_profiles,
    observation_normalizer,
    physical_step,
    sample_exogenous,
    scale_action,
)
from .rl.ppo import PpoAgent

log = logging.getLogger(__name__)

HOURS = 24
METRIC_COLUMNS = ["episode", "total_cost", "ma30_cost", "voltage_deviation_pu", "mean_price"]
ROUND_COLUMNS = ["episode", "hour", "sdr", "price_cents_kwh", "total_buy_kwh", "total_sell_kwh"]

# spawn keys of the independent random streams
STREAM_ENV, STREAM_POLICY, STREAM_INIT, STREAM_UPDATE, STREAM_PRICE = range(5)


class SimulationError(RuntimeError):
    pass


def make_rng(seed: int, concern: int, index: int = 0) -> np.random.Generator:
    """Independent generator for one (concern, agent) pair of a master seed."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(concern, index)))


@dataclass
class StepRecord:
    episode: int
    hour: int
    t: int
    bids: np.ndarray
    r_c: np.ndarray
    r_m: np.ndarray
    r_v: float
    r_v_share: float
    total: np.ndarray
    sdr: float
    price: float
    total_buy: float
    total_sell: float
    v_mag: np.ndarray
    deviation: np.ndarray
    converged: bool
    p_inj: np.ndarray = field(repr=False, default=None)
    q_inj: np.ndarray = field(repr=False, default=None)


@dataclass
class EpisodeMetrics:
    episode: int
    episodic_total_cost: float
    total_voltage_deviation: float
    mean_price: float
    prices: np.ndarray
    undiscounted_cost: float = 0.0


def moving_average(series: Sequence[float], window: int = 30) -> list[float]:
    """Trailing mean over the last ``min(window, i + 1)`` entries."""
    if window < 1:
        raise ValueError("window must be at least 1")
    out = []
    acc = 0.0
    for i, x in enumerate(series):
        acc += x
        if i >= window:
            acc -= series[i - window]
        out.append(acc / min(window, i + 1))
    return out


def episode_metrics(records: Sequence[StepRecord], gamma: float, episode: int) -> EpisodeMetrics:
    """Discounted cost uses the global step index as the exponent."""
    cost = 0.0
    raw = 0.0
    dev = 0.0
    for rec in records:
        s = float(np.sum(rec.total))
        cost -= gamma**rec.t * s
        raw -= s
        dev += float(np.sum(rec.deviation))
    prices = np.array([rec.price for rec in records])
    return EpisodeMetrics(episode, cost, dev, float(prices.mean()) if len(prices) else 0.0, prices, raw)


class Simulator:
    """State of the feeder, the prosumers and their learners."""

    def __init__(self, scenario: ScenarioConfig):
        self.scenario = scenario
        self.net = grid.load_network(scenario.network_path)
        grid.check_connected(self.net)
        self.profiles = load_profiles(scenario.profiles_path)
        peaks = {b.id: b.peak_load_kw for b in self.net.buses if b.kind != grid.SLACK}
        self.configs: list[ProsumerConfig] = scenario.prosumer_configs(peaks)
        self.n_agents = len(self.configs)
        seed = scenario.seed
        tar = scenario.tariffs
        self.agents: list[PpoAgent] = []
        for i, cfg in enumerate(self.configs):
            offset, scale = observation_normalizer(cfg, tar.fit, tar.ur)
            self.agents.append(PpoAgent(OBS_DIM, cfg.action_dim, scenario.ppo, make_rng(seed, STREAM_INIT, i),
                                        make_rng(seed, STREAM_POLICY, i), make_rng(seed, STREAM_UPDATE, i),
                                        offset, scale))
        self.env_rngs = [make_rng(seed, STREAM_ENV, i) for i in range(self.n_agents)]
        self.price_rng = make_rng(seed, STREAM_PRICE)
        self.states = [ProsumerState.initial(cfg) for cfg in self.configs]
        self.t = 0
        self.price_history: list[float] = []
        self.v_mag = np.full(self.net.n_bus, scenario.slack_v)
        self.n_pf_solves = 0
        self.n_clearings = 0

    # ------------------------------------------------------------------ step

    def step(self, learn: bool = True, deterministic: bool = False) -> StepRecord:
        sc = self.scenario
        tar = sc.tariffs
        t = self.t
        hour = t % HOURS
        n = self.n_agents

        obs_list = []
        for i, cfg in enumerate(self.configs):
            exog = sample_exogenous(hour, self.profiles, cfg.peak_load_kw, cfg.pv_capacity_kw, self.env_rngs[i],
                                    cfg.power_factor)
            obs_list.append(assemble_observation(hour, exog, self.v_mag[cfg.bus_id], self.states[i].soc,
                                                 self.price_history, t, self.price_rng, tar.fit, tar.ur))

        if learn:
            for agent, obs in zip(self.agents, obs_list):
                if agent.ready():
                    info = agent.update(obs.to_array())
                    log.debug("t=%d update %s", t, info)

        raw_actions, log_probs, norm_obs, actions = [], [], [], []
        for i, (agent, obs) in enumerate(zip(self.agents, obs_list)):
            u, lp, x = agent.act(obs.to_array(), deterministic=deterministic)
            raw_actions.append(u)
            log_probs.append(lp)
            norm_obs.append(x)
            actions.append(scale_action(u, self.configs[i]))

        outcomes = [physical_step(self.states[i], actions[i], obs_list[i], self.configs[i]) for i in range(n)]

        quantities = [actions[i].bid for i in range(n)]
        if sc.sell_cap_enabled:
            quantities = [market.admit_sell(q, outcomes[i].p_inj) for i, q in enumerate(quantities)]
        bids = [market.Bid(i, q) for i, q in enumerate(quantities)]
        result = market.clear(bids, tar, p2p=sc.p2p_enabled)
        self.n_clearings += 1
        r_m = np.array([result.rewards[i] for i in range(n)])
        if sc.imbalance_enabled:
            r_m = r_m + np.array([market.settle_imbalance(quantities[i], outcomes[i].p_inj, tar) for i in range(n)])

        inj = np.zeros((self.net.n_bus, 2))
        for cfg, out in zip(self.configs, outcomes):
            inj[cfg.bus_id, 0] += out.p_inj / self.net.s_base_kva
            inj[cfg.bus_id, 1] += out.q_inj / self.net.s_base_kva
        self.n_pf_solves += 1
        try:
            sol = grid.solve_power_flow(self.net, inj, sc.slack_v, sc.pf_tol, sc.pf_max_iter)
        except grid.SingularJacobianError:
            sol = None
        if sol is not None and sol.converged:
            dev, r_v = grid.voltage_violation(sol, sc.v_lo, sc.v_hi, sc.lam)
            v_now = sol.v_mag
            self.v_mag = sol.v_mag.copy()
        else:
            log.warning("power flow failed at t=%d; applying maximal violation", t)
            dev, r_v = grid.failed_flow_violation(self.net.n_bus, sc.v_lo, sc.v_hi, sc.lam)
            v_now = np.full(self.net.n_bus, np.nan)

        r_c = np.array([comfort_reward(out.zone_temps_next, cfg) for out, cfg in zip(outcomes, self.configs)])
        share = r_v / n
        total = r_c + r_m + share
        if not np.all(np.isfinite(total)):
            raise SimulationError(f"non-finite reward at t={t}: r_c={r_c}, r_m={r_m}, r_v={r_v}")

        done = hour == HOURS - 1
        if learn:
            for i, agent in enumerate(self.agents):
                agent.record(norm_obs[i], raw_actions[i], log_probs[i], float(total[i]), done)
        for i, out in enumerate(outcomes):
            self.states[i] = ProsumerState(out.soc_next, out.zone_temps_next)
        self.price_history.append(result.price)
        self.t += 1

        return StepRecord(
            episode=t // HOURS,
            hour=hour,
            t=t,
            bids=np.array(quantities, dtype=float),
            r_c=r_c,
            r_m=r_m,
            r_v=r_v,
            r_v_share=share,
            total=total,
            sdr=result.sdr,
            price=result.price,
            total_buy=result.total_buy,
            total_sell=result.total_sell,
            v_mag=v_now,
            deviation=dev,
            converged=sol is not None and sol.converged,
            p_inj=np.array([o.p_inj for o in outcomes]),
            q_inj=np.array([o.q_inj for o in outcomes]),
        )

    def run_episode(self, learn: bool = True, deterministic: bool = False) -> tuple[EpisodeMetrics, list[StepRecord]]:
        """Advance 24 steps; the episode index is implied by the global step."""
        episode = self.t // HOURS
        records = [self.step(learn, deterministic) for _ in range(HOURS)]
        return episode_metrics(records, self.scenario.ppo.gamma, episode), records

    # ------------------------------------------------------------ persistence

    def env_state(self) -> dict:
        return {
            "t": self.t,
            "soc": [s.soc for s in self.states],
            "zone_temps": [s.zone_temps.tolist() for s in self.states],
            "price_history": self.price_history[-HOURS:],
            "v_mag": self.v_mag.tolist(),
            "env_rngs": [r.bit_generator.state for r in self.env_rngs],
            "price_rng": self.price_rng.bit_generator.state,
        }

    def load_env_state(self, state: dict) -> None:
        self.t = state["t"]
        self.states = [ProsumerState(soc, np.array(z)) for soc, z in zip(state["soc"], state["zone_temps"])]
        tail = state["price_history"]
        # only the last day is needed for lagged observations
        self.price_history = [math.nan] * (self.t - len(tail)) + list(tail)
        self.v_mag = np.array(state["v_mag"])
        for rng, s in zip(self.env_rngs, state["env_rngs"]):
            rng.bit_generator.state = s
        self.price_rng.bit_generator.state = state["price_rng"]

    def save_checkpoint(self, out_dir: Path) -> int:
        """Write ``agents/agent_<id>/step_<t>/policy.npz`` for every agent and the env state."""
        out_dir = Path(out_dir)
        for i, agent in enumerate(self.agents):
            agent.save(out_dir / "agents" / f"agent_{i}" / f"step_{self.t}" / "policy.npz",
                       extra={"bus_id": self.configs[i].bus_id})
        env_path = out_dir / "env" / f"step_{self.t}.json"
        env_path.parent.mkdir(parents=True, exist_ok=True)
        env_path.write_text(json.dumps(self.env_state()))
        return self.t

    def load_checkpoint(self, out_dir: Path, step: int | None = None) -> int:
        out_dir = Path(out_dir)
        if step is None:
            step = latest_checkpoint_step(out_dir)
        for i, agent in enumerate(self.agents):
            path = out_dir / "agents" / f"agent_{i}" / f"step_{step}" / "policy.npz"
            if not path.exists():
                raise FileNotFoundError(f"missing checkpoint {path}")
            agent.load(path)
        env_path = out_dir / "env" / f"step_{step}.json"
        if env_path.exists():
            self.load_env_state(json.loads(env_path.read_text()))
        return step


def latest_checkpoint_step(out_dir: Path) -> int:
    steps = [int(p.name.split("_")[1]) for p in (Path(out_dir) / "agents" / "agent_0").glob("step_*")]
    if not steps:
        raise FileNotFoundError(f"no checkpoints under {out_dir}")
    return max(steps)


def _fmt(x: float) -> str:
    return repr(float(x))


def _write_diagnostic(out: Path | None, payload: dict) -> None:
    if out is not None:
        (out / "diagnostic.json").write_text(json.dumps(payload, default=str))


def train(scenario: ScenarioConfig, out_dir: str | Path | None = None, log_steps: bool = False,
          progress_every: int = 0) -> list[EpisodeMetrics]:
    return run_training(Simulator(scenario), out_dir, log_steps, progress_every)


def run_training(sim: Simulator, out_dir: str | Path | None = None, log_steps: bool = False,
                 progress_every: int = 0) -> list[EpisodeMetrics]:
    """Run ``scenario.n_episodes`` episodes of decentralized learning.

    With ``out_dir`` set, writes ``metrics.csv`` (one row per episode), the
    per-round market log ``rounds.csv`` and per-agent ``steps.csv`` when
    ``log_steps`` is on, and checkpoints every ``checkpoint_every`` episodes
    plus one at the end.
    """
    scenario = sim.scenario
    out = Path(out_dir) if out_dir is not None else None
    writers = {}
    handles = []
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        fh = open(out / "metrics.csv", "w", newline="")
        handles.append(fh)
        writers["metrics"] = csv.writer(fh)
        writers["metrics"].writerow(METRIC_COLUMNS)
        if log_steps:
            fr = open(out / "rounds.csv", "w", newline="")
            fs = open(out / "steps.csv", "w", newline="")
            handles += [fr, fs]
            writers["rounds"] = csv.writer(fr)
            writers["rounds"].writerow(ROUND_COLUMNS)
            writers["steps"] = csv.writer(fs)
            writers["steps"].writerow(["episode", "hour", "agent", "bid", "r_c", "r_m", "r_v_share", "total",
                                       "p_inj_kw", "q_inj_kvar", "v_mag"])
    history: list[EpisodeMetrics] = []
    costs: list[float] = []
    try:
        for ep in range(scenario.n_episodes):
            try:
                metrics, records = sim.run_episode(learn=True)
            except SimulationError as exc:
                _write_diagnostic(out, {"episode": ep, "error": str(exc), "env": sim.env_state()})
                raise
            if not (math.isfinite(metrics.episodic_total_cost) and math.isfinite(metrics.total_voltage_deviation)):
                _write_diagnostic(out, {"episode": ep, "error": "non-finite episode metric", "env": sim.env_state(),
                                        "totals": [rec.total.tolist() for rec in records]})
                raise SimulationError(f"non-finite metric in episode {ep}")
            history.append(metrics)
            costs.append(metrics.episodic_total_cost)
            ma = moving_average(costs[-30:], 30)[-1]
            if out is not None:
                writers["metrics"].writerow([ep, _fmt(metrics.episodic_total_cost), _fmt(ma),
                                             _fmt(metrics.total_voltage_deviation), _fmt(metrics.mean_price)])
                if log_steps:
                    for rec in records:
                        writers["rounds"].writerow([rec.episode, rec.hour, _fmt(rec.sdr), _fmt(rec.price),
                                                    _fmt(rec.total_buy), _fmt(rec.total_sell)])
                        for i in range(sim.n_agents):
                            bus = sim.configs[i].bus_id
                            writers["steps"].writerow([rec.episode, rec.hour, i, _fmt(rec.bids[i]),
                                                       _fmt(rec.r_c[i]), _fmt(rec.r_m[i]), _fmt(rec.r_v_share),
                                                       _fmt(rec.total[i]), _fmt(rec.p_inj[i]),
                                                       _fmt(rec.q_inj[i]), _fmt(rec.v_mag[bus])])
                if scenario.checkpoint_every and (ep + 1) % scenario.checkpoint_every == 0:
                    sim.save_checkpoint(out)
            if progress_every and (ep + 1) % progress_every == 0:
                log.info("episode %d cost %.1f (raw %.1f) dev %.4f price %.2f", ep, metrics.episodic_total_cost,
                         metrics.undiscounted_cost, metrics.total_voltage_deviation, metrics.mean_price)
        if out is not None and scenario.n_episodes > 0:
            sim.save_checkpoint(out)
    finally:
        for fh in handles:
            fh.close()
    return history


@dataclass
class EvaluationReport:
    prices: np.ndarray
    voltages: np.ndarray
    hours: np.ndarray
    costs: np.ndarray
    deviation: np.ndarray
    bids: np.ndarray

    def write(self, out_dir: Path) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "eval_prices.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["day", "hour", "price_cents_kwh", "voltage_deviation_pu", "total_cost"])
            for k, p in enumerate(self.prices):
                w.writerow([k // HOURS, self.hours[k], _fmt(p), _fmt(self.deviation[k]), _fmt(self.costs[k])])
        with open(out_dir / "eval_voltages.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["day", "hour", *[f"bus_{j}" for j in range(self.voltages.shape[1])]])
            for k, row in enumerate(self.voltages):
                w.writerow([k // HOURS, self.hours[k], *[_fmt(v) for v in row]])


def evaluate(scenario: ScenarioConfig, checkpoint_dir: str | Path | None = None, n_days: int = 3,
             deterministic: bool | None = None, simulator: Simulator | None = None) -> EvaluationReport:
    """Roll the trained policies forward ``n_days`` without learning.

    Resumes from the saved environment state when the checkpoint has one.
    Mean actions are used unless ``deterministic`` is False (default follows
    ``scenario.stochastic_eval``).
    """
    if deterministic is None:
        deterministic = not scenario.stochastic_eval
    sim = simulator
    if sim is None:
        sim = Simulator(scenario)
        if checkpoint_dir is None:
            raise FileNotFoundError("evaluate needs a checkpoint directory or a simulator")
        sim.load_checkpoint(Path(checkpoint_dir))
    prices, volts, hours, costs, devs, bids = [], [], [], [], [], []
    for _ in range(n_days * HOURS):
        rec = sim.step(learn=False, deterministic=deterministic)
        prices.append(rec.price)
        volts.append(rec.v_mag)
        hours.append(rec.hour)
        costs.append(-float(np.sum(rec.total)))
        devs.append(float(np.sum(rec.deviation)))
        bids.append(rec.bids)
    return EvaluationReport(np.array(prices), np.array(volts), np.array(hours), np.array(costs), np.array(devs),
                            np.array(bids))
