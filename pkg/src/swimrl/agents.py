"""Controllers and their learning rules.

* prescribed (proportional) control ``a = phi s``;
* the Actor-Physicist: a Gaussian actor whose advantages come from the
  closed-form value of proportional control instead of a learned critic;
* A2C and PPO with a learned critic, for comparison;
* a hybrid that falls back to proportional control when recent
  physicist advantages turn bad.

Rewards are rates ``-|a|^2 - beta |s|^2``; the rollout multiplies them by
``dt`` so that discounted sums match the time integral the value function
is built on.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeMismatch
from .neural import DenseNet, OptimizerState, backward, forward, forward_cache, n_params, optimizer_step
from .theory import BaselineParams, physicist_value

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)


def reward(s, a, beta: float):
    """Reward rate ``-|a|^2 - beta |s|^2`` (batched over leading axes)."""
    s = np.asarray(s, dtype=float)
    a = np.asarray(a, dtype=float)
    return -np.sum(a * a, axis=-1) - beta * np.sum(s * s, axis=-1)


def prescribed_action(s, phi: float) -> np.ndarray:
    return phi * np.asarray(s, dtype=float)


def td_advantage(r, v_next, v_curr, gamma: float):
    """One-step advantage ``r + gamma V(s') - V(s)``; pass ``v_next = 0`` at the end."""
    if not 0.0 < gamma <= 1.0:
        raise ValueError(f"gamma must lie in (0, 1], got {gamma}")
    return r + gamma * v_next - v_curr


def features(s, scale: float = 1.0) -> np.ndarray:
    """State features ``(s, |s|) / scale``."""
    s = np.asarray(s, dtype=float)
    norm = np.linalg.norm(s, axis=-1, keepdims=True)
    return np.concatenate([s, norm], axis=-1) / scale


# ---------------------------------------------------------------------------
# Gaussian policy
# ---------------------------------------------------------------------------

class GaussianPolicy:
    """Diagonal Gaussian over the d-component swimming effort.

    The mean is ``act_scale * net((s, |s|) / obs_scale)``; the standard
    deviation ``act_scale * exp(log_std)`` is state independent.  Both scales
    are fixed constants, not trained.  ``theta`` concatenates the network
    parameters and ``log_std``.
    """

    def __init__(self, d: int = 3, hidden=(64, 64), rng: np.random.Generator | None = None,
                 log_std: float = math.log(0.3), a_max: float = 20.0,
                 obs_scale: float = 1.0, act_scale: float = 1.0):
        self.d = d
        self.sizes = (d + 1, *hidden, d)
        n_net = n_params(self.sizes)
        self.theta = np.zeros(n_net + d)
        if rng is None:
            self.net = DenseNet(self.sizes, self.theta[:n_net])
        else:
            self.net = DenseNet.init(self.sizes, rng, zero_last=True, theta=self.theta[:n_net])
        self.log_std = self.theta[n_net:]
        self.log_std[...] = log_std
        self.a_max = float(a_max)
        self.obs_scale = float(obs_scale)
        self.act_scale = float(act_scale)

    @property
    def std(self) -> np.ndarray:
        return self.act_scale * np.exp(self.log_std)

    def mean(self, s) -> np.ndarray:
        return self.act_scale * forward(self.net, features(s, self.obs_scale))

    def clip(self, a) -> np.ndarray:
        return np.clip(a, -self.a_max, self.a_max)

    def sample(self, s, eps):
        """``(applied, raw, log_prob)`` for standard-normal draws ``eps``."""
        mu = self.mean(s)
        std = self.std
        raw = mu + std * eps
        logp = -0.5 * np.sum(eps * eps, axis=-1) - np.sum(np.log(std)) - 0.5 * self.d * LOG_2PI
        return self.clip(raw), raw, logp

    def log_prob(self, s, a) -> np.ndarray:
        z = (np.asarray(a, dtype=float) - self.mean(s)) / self.std
        return -0.5 * np.sum(z * z, axis=-1) - np.sum(np.log(self.std)) - 0.5 * self.d * LOG_2PI

    def grad_log_prob(self, s, a, weights) -> np.ndarray:
        """Gradient of ``sum_i weights_i log pi(a_i | s_i)`` w.r.t. ``theta``."""
        s = np.atleast_2d(s)
        a = np.atleast_2d(a)
        weights = np.atleast_1d(np.asarray(weights, dtype=float))
        if a.shape != s.shape or weights.shape != (s.shape[0],):
            raise ShapeMismatch("states, actions and weights must agree on the batch size")
        out, acts = forward_cache(self.net, features(s, self.obs_scale))
        std = self.std
        diff = a - self.act_scale * out
        adj = weights[:, None] * diff / (std * std) * self.act_scale
        grad = np.empty_like(self.theta)
        n_net = self.net.theta.size
        grad[:n_net] = backward(self.net, acts, adj)
        grad[n_net:] = weights @ (diff * diff / (std * std) - 1.0)
        return grad

    def copy(self) -> "GaussianPolicy":
        other = GaussianPolicy(self.d, self.sizes[1:-1], None, 0.0, self.a_max, self.obs_scale, self.act_scale)
        other.theta[...] = self.theta
        return other

    def to_dict(self) -> dict:
        return {"net": self.net.to_dict(), "log_std": self.log_std.tolist(), "a_max": self.a_max,
                "obs_scale": self.obs_scale, "act_scale": self.act_scale}

    @classmethod
    def from_dict(cls, doc: dict) -> "GaussianPolicy":
        net = DenseNet.from_dict(doc["net"])
        d = net.n_out
        pol = cls(d, net.sizes[1:-1], None, 0.0, doc["a_max"], doc["obs_scale"], doc["act_scale"])
        pol.net.theta[...] = net.theta
        pol.log_std[...] = doc["log_std"]
        return pol


def policy_action(policy: GaussianPolicy, s, rng: np.random.Generator):
    """Sample ``(clipped action, log-prob of the unclipped draw)``."""
    s = np.asarray(s, dtype=float)
    eps = rng.standard_normal(s.shape)
    applied, _, logp = policy.sample(s, eps)
    return applied, logp


# ---------------------------------------------------------------------------
# Batches and agents
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    """Transitions from one or more episodes; ``rewards`` already include ``dt``."""

    t: np.ndarray
    s: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    rewards: np.ndarray
    t_next: np.ndarray
    s_next: np.ndarray
    done: np.ndarray
    advantages: np.ndarray | None = None

    def __len__(self):
        return len(self.t)


def normalize_advantages(adv) -> np.ndarray:
    """Centre and scale a batch of advantages; a constant batch maps to zeros."""
    adv = np.asarray(adv, dtype=float)
    sd = adv.std()
    return (adv - adv.mean()) / sd if sd > 0 else np.zeros_like(adv)


@dataclass
class APAgent:
    """Gaussian actor with the physicist value as its (fixed) critic.

    ``normalize`` standardises each batch of advantages before the actor
    step; it is off by default.
    """

    policy: GaussianPolicy
    baseline: BaselineParams
    opt: OptimizerState = field(default_factory=OptimizerState)
    normalize: bool = False

    def value(self, t, s):
        return physicist_value(np.linalg.norm(np.asarray(s, dtype=float), axis=-1), t, self.baseline)

    def advantages(self, batch: Batch, gamma: float) -> np.ndarray:
        v_next = np.where(batch.done, 0.0, self.value(batch.t_next, batch.s_next))
        return td_advantage(batch.rewards, v_next, self.value(batch.t, batch.s), gamma)


@dataclass
class A2CAgent:
    policy: GaussianPolicy
    critic: DenseNet
    opt: OptimizerState = field(default_factory=OptimizerState)
    critic_opt: OptimizerState = field(default_factory=OptimizerState)
    normalize: bool = False

    def value(self, t, s):
        return forward(self.critic, features(s, self.policy.obs_scale))[..., 0]

    def advantages(self, batch: Batch, gamma: float) -> np.ndarray:
        v_next = np.where(batch.done, 0.0, self.value(batch.t_next, batch.s_next))
        return td_advantage(batch.rewards, v_next, self.value(batch.t, batch.s), gamma)


@dataclass
class PPOAgent(A2CAgent):
    clip: float = 0.2
    epochs: int = 4

    def __post_init__(self):
        if not self.clip > 0:
            raise ValueError(f"clip must be > 0, got {self.clip}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


def make_critic(d: int, hidden, rng: np.random.Generator) -> DenseNet:
    return DenseNet.init((d + 1, *hidden, 1), rng, zero_last=True)


def _actor_weights(agent, adv) -> np.ndarray:
    return normalize_advantages(adv) if agent.normalize else np.asarray(adv, dtype=float)


def _actor_step(policy: GaussianPolicy, opt: OptimizerState, s, a, weights) -> bool:
    grad = policy.grad_log_prob(s, a, weights / len(weights))
    return optimizer_step(opt, policy.theta, grad, ascent=True)


def ap_update(agent: APAgent, batch: Batch) -> bool:
    """Ascent step on ``mean(log pi(a|s) * A)`` with physicist advantages.

    The baseline has no parameters and is never touched.
    """
    if batch.advantages is None or len(batch) == 0:
        raise ValueError("ap_update needs a non-empty batch with advantages")
    return _actor_step(agent.policy, agent.opt, batch.s, batch.actions,
                       _actor_weights(agent, batch.advantages))


def _critic_step(agent: A2CAgent, batch: Batch, gamma: float) -> bool:
    # bootstrap target held fixed
    v_next = np.where(batch.done, 0.0, agent.value(batch.t_next, batch.s_next))
    target = batch.rewards + gamma * v_next
    x = features(batch.s, agent.policy.obs_scale)
    out, acts = forward_cache(agent.critic, x)
    adj = -2.0 * (target - out[:, 0])[:, None] / len(batch)
    grad = backward(agent.critic, acts, adj)
    return optimizer_step(agent.critic_opt, agent.critic.theta, grad, ascent=False)


def a2c_update(agent: A2CAgent, batch: Batch, gamma: float) -> bool:
    """Actor ascent with critic advantages, then one critic TD(0) descent step."""
    adv = agent.advantages(batch, gamma)
    batch.advantages = adv
    ok = _actor_step(agent.policy, agent.opt, batch.s, batch.actions, _actor_weights(agent, adv))
    ok_c = _critic_step(agent, batch, gamma)
    return ok and ok_c


def ppo_surrogate_weights(ratio, adv, clip: float) -> np.ndarray:
    """Per-sample weight on ``grad log pi`` of the clipped surrogate.

    Zero where the clipped branch is active, ``ratio * A`` elsewhere.
    """
    clipped = ((adv > 0) & (ratio > 1.0 + clip)) | ((adv < 0) & (ratio < 1.0 - clip))
    return np.where(clipped, 0.0, ratio * adv)


def ppo_update(agent: PPOAgent, batch: Batch, gamma: float) -> bool:
    """Clipped-surrogate ascent over ``agent.epochs`` passes on one batch."""
    adv = agent.advantages(batch, gamma)
    batch.advantages = adv
    adv_w = _actor_weights(agent, adv)
    ok = True
    for _ in range(agent.epochs):
        ratio = np.exp(agent.policy.log_prob(batch.s, batch.actions) - batch.log_probs)
        w = ppo_surrogate_weights(ratio, adv_w, agent.clip)
        ok &= _actor_step(agent.policy, agent.opt, batch.s, batch.actions, w)
        ok &= _critic_step(agent, batch, gamma)
    return ok


# ---------------------------------------------------------------------------
# Controllers used by rollouts
# ---------------------------------------------------------------------------

class PrescribedController:
    """``a = phi s``."""

    def __init__(self, phi: float):
        if not phi > 0:
            raise ValueError(f"phi must be > 0, got {phi}")
        self.phi = float(phi)

    def reset(self, n: int) -> None:
        pass

    def act(self, t, s, eps):
        a = prescribed_action(s, self.phi)
        return a, a, np.zeros(len(s))

    def observe(self, t, s, r, t_next, s_next, done) -> None:
        pass


class PolicyController:
    """Gaussian policy; ``explore=False`` plays the mean action."""

    def __init__(self, policy: GaussianPolicy, explore: bool = True):
        self.policy = policy
        self.explore = explore

    def reset(self, n: int) -> None:
        pass

    def act(self, t, s, eps):
        if self.explore:
            return self.policy.sample(s, eps)
        mu = self.policy.mean(s)
        return self.policy.clip(mu), mu, np.zeros(len(s))

    def observe(self, t, s, r, t_next, s_next, done) -> None:
        pass


class HybridController:
    """AP policy with a fall-back to ``a = fallback_phi s``.

    Keeps, per episode, the last ``n`` physicist advantages; when their mean
    drops below ``threshold`` the proportional action is played instead.
    An empty ring means no evidence yet, so the AP action is used.
    """

    def __init__(self, policy: GaussianPolicy, baseline: BaselineParams, fallback_phi: float,
                 gamma: float, n: int = 10, threshold: float = 0.0, explore: bool = False):
        if n < 1:
            raise ValueError("window n must be >= 1")
        self.policy = policy
        self.baseline = baseline
        self.fallback_phi = float(fallback_phi)
        self.gamma = gamma
        self.n = int(n)
        self.threshold = float(threshold)
        self.explore = explore
        self.reset(1)

    def reset(self, n_episodes: int) -> None:
        self.ring = np.zeros((n_episodes, self.n))
        self.count = np.zeros(n_episodes, dtype=int)
        self.switched = np.zeros(n_episodes, dtype=int)

    def fallback_active(self) -> np.ndarray:
        filled = np.minimum(self.count, self.n)
        total = self.ring.sum(axis=1)
        mean = np.divide(total, filled, out=np.zeros_like(total), where=filled > 0)
        return (filled > 0) & (mean < self.threshold)

    def act(self, t, s, eps):
        if self.explore:
            applied, raw, logp = self.policy.sample(s, eps)
        else:
            raw = self.policy.mean(s)
            applied, logp = self.policy.clip(raw), np.zeros(len(s))
        fb = self.fallback_active()
        self.switched += fb
        if np.any(fb):
            pc = prescribed_action(s, self.fallback_phi)
            applied = np.where(fb[:, None], pc, applied)
            raw = np.where(fb[:, None], pc, raw)
        return applied, raw, logp

    def observe(self, t, s, r, t_next, s_next, done) -> None:
        v = physicist_value(np.linalg.norm(s, axis=-1), t, self.baseline)
        v_next = np.where(done, 0.0, physicist_value(np.linalg.norm(s_next, axis=-1), t_next, self.baseline))
        adv = td_advantage(r, v_next, v, self.gamma)
        slot = self.count % self.n
        self.ring[np.arange(len(slot)), slot] = adv
        self.count += 1


def hybrid_action(ctrl: HybridController, s, rng: np.random.Generator | None = None) -> np.ndarray:
    """Single-state hybrid action; uses the first episode slot of ``ctrl``."""
    s = np.atleast_2d(np.asarray(s, dtype=float))
    eps = rng.standard_normal(s.shape) if rng is not None else np.zeros(s.shape)
    applied, _, _ = ctrl.act(0.0, s, eps)
    return applied[0]


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def agent_to_dict(agent) -> dict:
    doc = {"policy": agent.policy.to_dict()}
    if isinstance(agent, APAgent):
        doc["kind"] = "ap"
        b = agent.baseline
        doc["baseline"] = {"phi": b.phi, "d_tilde": b.d_tilde, "beta": b.beta, "nu": b.nu,
                           "horizon": b.horizon, "kappa": b.kappa, "d": b.d}
    elif isinstance(agent, A2CAgent):
        doc["kind"] = "ppo" if isinstance(agent, PPOAgent) else "a2c"
        doc["critic"] = agent.critic.to_dict()
        if isinstance(agent, PPOAgent):
            doc["clip"] = agent.clip
            doc["epochs"] = agent.epochs
    doc["lr"] = agent.opt.lr
    doc["normalize"] = agent.normalize
    return doc


def agent_from_dict(doc: dict):
    policy = GaussianPolicy.from_dict(doc["policy"])
    opt = OptimizerState(lr=doc.get("lr", 3e-4))
    kind = doc["kind"]
    if kind not in ("ap", "a2c", "ppo"):
        raise ValueError(f"unknown agent kind {kind!r}")
    norm = bool(doc.get("normalize", False))
    if kind == "ap":
        return APAgent(policy, BaselineParams(**doc["baseline"]), opt, normalize=norm)
    critic = DenseNet.from_dict(doc["critic"])
    if kind == "a2c":
        return A2CAgent(policy, critic, opt, normalize=norm)
    return PPOAgent(policy, critic, opt, normalize=norm, clip=doc["clip"], epochs=doc["epochs"])


def save_agent(agent, path) -> None:
    with open(path, "w") as fh:
        json.dump(agent_to_dict(agent), fh)


def load_agent(path):
    with open(path) as fh:
        return agent_from_dict(json.load(fh))
