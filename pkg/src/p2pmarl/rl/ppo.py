"""Clipped-surrogate PPO for a single independent learner.

The actor is an MLP producing the mean of a diagonal Gaussian with a
state-independent learnable log standard deviation; the critic is an MLP
value function. Both are trained with minibatched Adam.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .networks import Params, copy_params, mlp_forward, mlp_gradient, mlp_init, n_layers
from .optim import AdamState, adam_step

log = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)
CHECKPOINT_VERSION = 1


@dataclass
class PpoConfig:
    gamma: float = 0.999
    clip_eps: float = 0.2
    actor_lr: float = 3e-4
    critic_lr: float = 1e-3
    epochs_per_update: int = 10
    minibatch_size: int = 64
    steps_per_update: int = 240
    gae_lambda: float | None = None
    value_target: str = "return"
    reward_scale: float = 1.0
    hidden: tuple[int, ...] = (64, 64)
    init_std: float = 0.5
    max_grad_norm: float | None = None
    normalize_values: bool = True

    def __post_init__(self):
        self.hidden = tuple(self.hidden)
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")
        if self.clip_eps <= 0:
            raise ValueError("clip_eps must be positive")
        if self.gae_lambda is not None and not 0 < self.gae_lambda <= 1:
            raise ValueError("gae_lambda must lie in (0, 1]")
        if self.value_target not in ("return", "reward"):
            raise ValueError("value_target must be 'return' or 'reward'")
        for name in ("epochs_per_update", "minibatch_size", "steps_per_update"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if self.actor_lr <= 0 or self.critic_lr <= 0 or self.reward_scale <= 0 or self.init_std <= 0:
            raise ValueError("learning rates, reward_scale and init_std must be positive")


@dataclass
class Transition:
    obs: np.ndarray
    action: np.ndarray
    log_prob: float
    reward: float
    value: float
    done: bool


def gaussian_log_prob(mean, log_std, action) -> np.ndarray:
    z = (np.asarray(action) - mean) * np.exp(-log_std)
    return np.sum(-0.5 * z**2 - log_std - 0.5 * LOG_2PI, axis=-1)


def policy_mean(actor: Params, obs) -> np.ndarray:
    return mlp_forward(actor, obs)[0]


def policy_log_prob(actor: Params, obs, action) -> np.ndarray:
    return gaussian_log_prob(policy_mean(actor, obs), actor["log_std"], action)


def policy_sample(actor: Params, obs, rng) -> tuple[np.ndarray, float]:
    """Draw ``mean(obs) + std * N(0, I)`` and its log density (unclamped)."""
    mean = policy_mean(actor, obs)
    eps = rng.standard_normal(mean.shape)
    action = mean + np.exp(actor["log_std"]) * eps
    return action, float(gaussian_log_prob(mean, actor["log_std"], action))


def compute_advantages(trajectory: Sequence[Transition], cfg: PpoConfig, bootstrap_value: float = 0.0,
                       normalize: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Returns-to-go and advantages for one trajectory chunk.

    Rewards are multiplied by ``cfg.reward_scale``. Without ``gae_lambda``
    the advantage is ``G_t - V(s_t)``; with it, GAE(lambda) is used and the
    returns are ``A_t + V(s_t)``.
    """
    if not trajectory:
        raise ValueError("empty trajectory")
    r = np.array([tr.reward for tr in trajectory], dtype=float) * cfg.reward_scale
    v = np.array([tr.value for tr in trajectory], dtype=float)
    T = len(r)
    g = cfg.gamma
    if cfg.gae_lambda is None:
        returns = np.empty(T)
        acc = bootstrap_value
        for k in range(T - 1, -1, -1):
            acc = r[k] + g * acc
            returns[k] = acc
        adv = returns - v
    else:
        v_next = np.append(v[1:], bootstrap_value)
        delta = r + g * v_next - v
        adv = np.empty(T)
        acc = 0.0
        for k in range(T - 1, -1, -1):
            acc = delta[k] + g * cfg.gae_lambda * acc
            adv[k] = acc
        returns = adv + v
    if normalize:
        adv = normalize_advantages(adv)
    return returns, adv


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    std = adv.std()
    return (adv - adv.mean()) / (std + 1e-8)


def batch_advantages(transitions: Sequence[Transition], cfg: PpoConfig, final_bootstrap: float):
    """Split a batch at ``done`` flags and bootstrap every chunk from the next state's value."""
    returns, advs = [], []
    start = 0
    n = len(transitions)
    for k, tr in enumerate(transitions):
        if tr.done or k == n - 1:
            boot = transitions[k + 1].value if k + 1 < n else final_bootstrap
            ret, adv = compute_advantages(transitions[start:k + 1], cfg, boot)
            returns.append(ret)
            advs.append(adv)
            start = k + 1
    return np.concatenate(returns), np.concatenate(advs)


def clipped_surrogate(ratio, adv, eps: float) -> np.ndarray:
    """Per-sample ``min(ratio * A, g(eps, A))``."""
    adv = np.asarray(adv, dtype=float)
    g = np.where(adv >= 0, (1.0 + eps) * adv, (1.0 - eps) * adv)
    return np.minimum(np.asarray(ratio) * adv, g)


def actor_objective(actor: Params, obs, actions, old_log_probs, adv, eps: float) -> tuple[float, Params]:
    """Mean clipped surrogate and its gradient (ascent direction)."""
    mean, cache = mlp_forward(actor, obs)
    log_std = actor["log_std"]
    inv_var = np.exp(-2.0 * log_std)
    diff = actions - mean
    logp = gaussian_log_prob(mean, log_std, actions)
    ratio = np.exp(logp - old_log_probs)
    unclipped = ratio * adv
    surrogate = clipped_surrogate(ratio, adv, eps)
    B = len(adv)
    # only samples whose unclipped term is the active branch carry gradient
    w = np.where(unclipped <= surrogate, unclipped, 0.0) / B
    upstream = w[:, None] * diff * inv_var
    grads = mlp_gradient(actor, cache, upstream)
    grads["log_std"] = np.sum(w[:, None] * (diff**2 * inv_var - 1.0), axis=0)
    return float(np.mean(surrogate)), grads


def value_loss(critic: Params, obs, targets) -> tuple[float, Params]:
    """Mean squared error of the critic and its gradient."""
    pred, cache = mlp_forward(critic, obs)
    err = pred[:, 0] - targets
    B = len(targets)
    grads = mlp_gradient(critic, cache, (2.0 / B) * err[:, None])
    return float(np.mean(err**2)), grads


def _clip_grads(grads: Params, max_norm: float | None) -> Params:
    if max_norm is None:
        return grads
    norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm <= max_norm:
        return grads
    return {k: g * (max_norm / norm) for k, g in grads.items()}


def _minibatches(n: int, size: int, rng):
    perm = rng.permutation(n)
    for start in range(0, n, size):
        yield perm[start:start + size]


def ppo_actor_update(actor: Params, batch: dict, cfg: PpoConfig, opt: AdamState, rng) -> tuple[Params, AdamState, dict]:
    """Several epochs of minibatched Adam ascent on the clipped surrogate.

    ``batch`` holds ``obs``, ``actions``, ``log_probs`` (recorded under the
    pre-update parameters) and ``advantages``. A non-finite objective restores
    the snapshot taken before the first step.
    """
    snapshot, opt_snapshot = copy_params(actor), opt.copy()
    obs, act, old_lp, adv = batch["obs"], batch["actions"], batch["log_probs"], batch["advantages"]
    objectives = []
    for _ in range(cfg.epochs_per_update):
        for idx in _minibatches(len(adv), cfg.minibatch_size, rng):
            obj, grads = actor_objective(actor, obs[idx], act[idx], old_lp[idx], adv[idx], cfg.clip_eps)
            if not np.isfinite(obj) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                log.warning("non-finite actor objective; restoring pre-update parameters")
                return snapshot, opt_snapshot, {"aborted": True}
            descent = _clip_grads({k: -g for k, g in grads.items()}, cfg.max_grad_norm)
            actor, opt = adam_step(actor, descent, opt, cfg.actor_lr, opt.t + 1)
            objectives.append(obj)
    return actor, opt, {"aborted": False, "objective": float(np.mean(objectives)) if objectives else 0.0}


def critic_update(critic: Params, batch: dict, cfg: PpoConfig, opt: AdamState, rng) -> tuple[Params, AdamState, dict]:
    """Minibatched Adam regression of the critic onto ``batch['targets']``."""
    snapshot, opt_snapshot = copy_params(critic), opt.copy()
    obs, targets = batch["obs"], batch["targets"]
    losses = []
    for _ in range(cfg.epochs_per_update):
        for idx in _minibatches(len(targets), cfg.minibatch_size, rng):
            loss, grads = value_loss(critic, obs[idx], targets[idx])
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                log.warning("non-finite value loss; restoring pre-update parameters")
                return snapshot, opt_snapshot, {"aborted": True}
            critic, opt = adam_step(critic, _clip_grads(grads, cfg.max_grad_norm), opt, cfg.critic_lr, opt.t + 1)
            losses.append(loss)
    return critic, opt, {"aborted": False, "value_loss": float(np.mean(losses)) if losses else 0.0}


@dataclass
class RunningMoments:
    """Mean and variance of every value target seen so far (pooled across batches)."""

    count: int = 0
    mean: float = 0.0
    var: float = 1.0

    @property
    def std(self) -> float:
        return max(float(np.sqrt(self.var)), 1e-6)

    def update(self, x) -> None:
        x = np.asarray(x, dtype=float)
        n = x.size
        if n == 0:
            return
        b_mean = float(x.mean())
        b_var = float(x.var())
        if self.count == 0:
            self.count, self.mean, self.var = n, b_mean, b_var
            return
        total = self.count + n
        delta = b_mean - self.mean
        m2 = self.var * self.count + b_var * n + delta**2 * self.count * n / total
        self.mean += delta * n / total
        self.var = m2 / total
        self.count = total

    def to_dict(self) -> dict:
        return {"count": self.count, "mean": self.mean, "var": self.var}


class PpoAgent:
    """Independent actor-critic learner with its own parameters, buffer and rng streams.

    Observations are normalized with a fixed (offset, scale) before entering
    either network.
    """

    def __init__(self, obs_dim: int, act_dim: int, cfg: PpoConfig, init_rng, policy_rng, update_rng,
                 obs_offset=None, obs_scale=None):
        self.cfg = cfg
        self.obs_dim = obs_dim
        self.act_dim = act_dim
        sizes_a = (obs_dim, *cfg.hidden, act_dim)
        sizes_c = (obs_dim, *cfg.hidden, 1)
        self.actor = mlp_init(sizes_a, init_rng, log_std=np.full(act_dim, np.log(cfg.init_std)))
        self.critic = mlp_init(sizes_c, init_rng)
        self.actor_opt = AdamState.zeros_like(self.actor)
        self.critic_opt = AdamState.zeros_like(self.critic)
        self.policy_rng = policy_rng
        self.update_rng = update_rng
        self.obs_offset = np.zeros(obs_dim) if obs_offset is None else np.asarray(obs_offset, dtype=float)
        self.obs_scale = np.ones(obs_dim) if obs_scale is None else np.asarray(obs_scale, dtype=float)
        self.buffer: list[Transition] = []
        self.n_updates = 0
        self.value_stats = RunningMoments()

    def normalize(self, obs) -> np.ndarray:
        return (np.asarray(obs, dtype=float) - self.obs_offset) / self.obs_scale

    def values(self, obs_norm) -> np.ndarray:
        """Critic estimates in return units (the critic itself fits standardized targets)."""
        raw = mlp_forward(self.critic, np.atleast_2d(obs_norm))[0][:, 0]
        if not self.cfg.normalize_values:
            return raw
        return raw * self.value_stats.std + self.value_stats.mean

    def value(self, obs_norm) -> float:
        return float(self.values(obs_norm)[0])

    def _rescale_critic(self, old_mean: float, old_std: float) -> None:
        """Keep critic outputs unchanged in return units after the statistics move."""
        last = n_layers(self.critic) - 1
        w, b = f"W{last}", f"b{last}"
        new_mean, new_std = self.value_stats.mean, self.value_stats.std
        self.critic[w] = self.critic[w] * (old_std / new_std)
        self.critic[b] = (self.critic[b] * old_std + old_mean - new_mean) / new_std

    def act(self, obs, deterministic: bool = False) -> tuple[np.ndarray, float, np.ndarray]:
        """Return (action, log_prob, normalized observation)."""
        x = self.normalize(obs)
        if deterministic:
            mean = policy_mean(self.actor, x)
            return mean, float(gaussian_log_prob(mean, self.actor["log_std"], mean)), x
        action, logp = policy_sample(self.actor, x, self.policy_rng)
        return action, logp, x

    def record(self, obs_norm, action, log_prob: float, reward: float, done: bool) -> None:
        self.buffer.append(Transition(obs_norm, action, log_prob, reward, np.nan, done))

    def ready(self) -> bool:
        return len(self.buffer) >= self.cfg.steps_per_update

    def update(self, next_obs) -> dict:
        """Run one PPO update on the buffered transitions and clear the buffer."""
        if not self.buffer:
            return {}
        obs = np.stack([tr.obs for tr in self.buffer])
        values = self.values(obs)
        for tr, v in zip(self.buffer, values):
            tr.value = float(v)
        boot = self.value(self.normalize(next_obs))
        returns, adv = batch_advantages(self.buffer, self.cfg, boot)
        if self.cfg.value_target == "reward":
            targets = np.array([tr.reward for tr in self.buffer]) * self.cfg.reward_scale
        else:
            targets = returns
        if self.cfg.normalize_values:
            old_mean, old_std = self.value_stats.mean, self.value_stats.std
            self.value_stats.update(targets)
            self._rescale_critic(old_mean, old_std)
            targets = (targets - self.value_stats.mean) / self.value_stats.std
        batch = {
            "obs": obs,
            "actions": np.stack([tr.action for tr in self.buffer]),
            "log_probs": np.array([tr.log_prob for tr in self.buffer]),
            "advantages": normalize_advantages(adv),
            "targets": targets,
        }
        self.actor, self.actor_opt, a_info = ppo_actor_update(self.actor, batch, self.cfg, self.actor_opt,
                                                              self.update_rng)
        self.critic, self.critic_opt, c_info = critic_update(self.critic, batch, self.cfg, self.critic_opt,
                                                             self.update_rng)
        self.buffer = []
        self.n_updates += 1
        return {**a_info, **c_info, "mean_std": float(np.exp(self.actor["log_std"]).mean())}

    # checkpointing -------------------------------------------------------

    def save(self, path: str | Path, extra: dict | None = None) -> Path:
        """Write parameters, Adam moments and rng states to a single ``.npz``.

        Layout: ``actor/<key>``, ``critic/<key>``, ``actor_opt/{m,v}/<key>``,
        ``critic_opt/{m,v}/<key>`` arrays, plus a ``meta`` JSON string with
        the format version, Adam step counts, rng states and the PPO config.
        """
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        arrays = {}
        for name, params in (("actor", self.actor), ("critic", self.critic)):
            for k, a in params.items():
                arrays[f"{name}/{k}"] = a
        for name, opt in (("actor_opt", self.actor_opt), ("critic_opt", self.critic_opt)):
            for k in opt.m:
                arrays[f"{name}/m/{k}"] = opt.m[k]
                arrays[f"{name}/v/{k}"] = opt.v[k]
        meta = {
            "version": CHECKPOINT_VERSION,
            "obs_dim": self.obs_dim,
            "act_dim": self.act_dim,
            "actor_t": self.actor_opt.t,
            "critic_t": self.critic_opt.t,
            "n_updates": self.n_updates,
            "value_stats": self.value_stats.to_dict(),
            "policy_rng": self.policy_rng.bit_generator.state,
            "update_rng": self.update_rng.bit_generator.state,
            "config": asdict(self.cfg),
            "extra": extra or {},
        }
        arrays["meta"] = np.array(json.dumps(meta))
        arrays["obs_offset"] = self.obs_offset
        arrays["obs_scale"] = self.obs_scale
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)
        return path

    def load(self, path: str | Path) -> dict:
        with np.load(Path(path), allow_pickle=False) as data:
            meta = json.loads(str(data["meta"]))
            if meta["version"] != CHECKPOINT_VERSION:
                raise ValueError(f"unsupported checkpoint version {meta['version']}")
            groups: dict[str, dict] = {"actor": {}, "critic": {}, "actor_opt/m": {}, "actor_opt/v": {},
                                       "critic_opt/m": {}, "critic_opt/v": {}}
            for key in data.files:
                if key in ("meta", "obs_offset", "obs_scale"):
                    continue
                group, _, name = key.rpartition("/")
                groups[group][name] = data[key].copy()
            self.obs_offset = data["obs_offset"].copy()
            self.obs_scale = data["obs_scale"].copy()
        self.actor = groups["actor"]
        self.critic = groups["critic"]
        self.actor_opt = AdamState(groups["actor_opt/m"], groups["actor_opt/v"], meta["actor_t"])
        self.critic_opt = AdamState(groups["critic_opt/m"], groups["critic_opt/v"], meta["critic_t"])
        self.policy_rng.bit_generator.state = meta["policy_rng"]
        self.update_rng.bit_generator.state = meta["update_rng"]
        self.n_updates = meta["n_updates"]
        self.value_stats = RunningMoments(**meta["value_stats"])
        return meta
