"""Episode rollouts, returns, and the training loop.

Rollouts are vectorised over episodes.  Episode ``i`` of purpose ``tag``
draws everything (initial state, exploration noise, flow noise) from its own
stream ``child_rng(seed, tag, i)``, in this order:

1. ``d`` normals for the initial separation (scaled by ``init_scale``, or
   only their direction when the norm is prescribed);
2. for ABC, 3 uniforms on ``[0, 2 pi)`` for the passive particle;
3. per step, one row of ``d + k_env`` normals (exploration first, then
   flow noise), drawn in blocks of :data:`NOISE_BLOCK` rows.

A trace therefore depends only on ``(seed, tag, index, config)``.  The
worker count never changes a result.  The chunk size can move the last bit
or so, because BLAS picks different kernels for different batch shapes.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .agents import (A2CAgent, APAgent, Batch, PolicyController, PPOAgent, a2c_update, ap_update,
                     ppo_update, reward)
from .errors import NonFiniteGradient
from .flows import (ABCFlowParams, BKFlowParams, IntegratorConfig, TWO_PI, abc_pair_step, bk_step,
                    exceeded)
from .rng import child_rng

log = logging.getLogger(__name__)

NOISE_BLOCK = 100
MAX_CONSECUTIVE_SKIPS = 10


# ---------------------------------------------------------------------------
# Environments
# ---------------------------------------------------------------------------

class BKEnv:
    """State is the separation itself, shape (n, d)."""

    def __init__(self, params: BKFlowParams, integ: IntegratorConfig):
        self.params = params
        self.integ = integ
        self.d = params.d
        self.k_noise = self.d * self.d + self.d

    def draw_initial(self, rng: np.random.Generator) -> np.ndarray:
        return rng.standard_normal(self.d)

    def initial_state(self, init: np.ndarray, sep0: np.ndarray) -> np.ndarray:
        return np.array(sep0, dtype=float)

    def separation(self, state: np.ndarray) -> np.ndarray:
        return state

    def step(self, state, action, noise):
        d = self.d
        return bk_step(state, action, self.params, self.integ.dt, noise[:, :d * d], noise[:, d * d:])


class ABCEnv:
    """State stacks (swimmer, target) positions, shape (n, 2, 3)."""

    def __init__(self, params: ABCFlowParams, integ: IntegratorConfig):
        self.params = params
        self.integ = integ
        self.d = 3
        self.k_noise = 6

    def draw_initial(self, rng: np.random.Generator) -> np.ndarray:
        g = rng.standard_normal(3)
        target = rng.uniform(0.0, TWO_PI, 3)
        return np.concatenate([g, target])

    def initial_state(self, init: np.ndarray, sep0: np.ndarray) -> np.ndarray:
        target = init[:, 3:]
        return np.stack([target + sep0, target], axis=1)

    def separation(self, state: np.ndarray) -> np.ndarray:
        return state[:, 0] - state[:, 1]

    def step(self, state, action, noise):
        p1, p2 = abc_pair_step(state[:, 0], state[:, 1], action, self.params, self.integ.dt,
                               noise[:, :3], noise[:, 3:])
        return np.stack([p1, p2], axis=1)


def make_env(flow, integ: IntegratorConfig | None = None):
    integ = integ or IntegratorConfig.for_flow(flow)
    if isinstance(flow, BKFlowParams):
        return BKEnv(flow, integ)
    if isinstance(flow, ABCFlowParams):
        return ABCEnv(flow, integ)
    raise TypeError(f"unknown flow spec {type(flow).__name__}")


# ---------------------------------------------------------------------------
# Configuration and traces
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    """Episode, discount, reward and seeding settings.

    ``init_scale`` is the per-component standard deviation of the isotropic
    Gaussian initial separation.  ``gamma = exp(-nu dt)``.
    """

    init_scale: float
    steps: int = 1000
    dt: float = 1e-2
    nu: float = 0.1
    beta: float = 0.1
    episodes: int = 250
    seed: int = 0
    eval_episodes: int = 500
    curve_every: int = 10
    curve_episodes: int = 100
    lr_decay: bool = True
    chunk: int = 500
    workers: int = 1

    def __post_init__(self):
        if self.steps < 1 or self.episodes < 0:
            raise ValueError("steps must be >= 1 and episodes >= 0")
        if not self.dt > 0 or not self.nu >= 0:
            raise ValueError("need dt > 0 and nu >= 0")
        if not self.init_scale >= 0:
            raise ValueError("init_scale must be >= 0")

    @property
    def horizon(self) -> float:
        return self.steps * self.dt

    @property
    def gamma(self) -> float:
        return math.exp(-self.nu * self.dt)


def default_init_scale(kappa: float, lambda_bar: float) -> float:
    """Ten diffusive scales, ``10 sqrt(kappa / lambda_bar)``."""
    return 10.0 * math.sqrt(kappa / lambda_bar)


@dataclass
class EpisodeTrace:
    """One rollout.  ``rewards[k]`` is the reward rate times ``dt`` at step k;
    ``states``/``actions``/``rewards``/``times`` all have length ``steps``."""

    times: np.ndarray
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    final_state: np.ndarray
    raw_actions: np.ndarray | None = None
    log_probs: np.ndarray | None = None
    values: np.ndarray | None = None
    aborted: bool = False
    abort_step: int = -1
    seed: int = 0
    index: int = 0


@dataclass
class RolloutBatch:
    """Stacked traces of ``n`` episodes (leading axis) or just their returns."""

    indices: np.ndarray
    returns: np.ndarray
    aborted: np.ndarray
    abort_step: np.ndarray
    times: np.ndarray
    states: np.ndarray | None = None
    actions: np.ndarray | None = None
    raw_actions: np.ndarray | None = None
    log_probs: np.ndarray | None = None
    rewards: np.ndarray | None = None
    final_states: np.ndarray | None = None
    seed: int = 0

    def trace(self, k: int) -> EpisodeTrace:
        if self.states is None:
            raise ValueError("rollout was run without recording trajectories")
        return EpisodeTrace(self.times, self.states[k], self.actions[k], self.rewards[k],
                            self.final_states[k], self.raw_actions[k], self.log_probs[k],
                            None, bool(self.aborted[k]), int(self.abort_step[k]), self.seed,
                            int(self.indices[k]))


# ---------------------------------------------------------------------------
# Rollouts
# ---------------------------------------------------------------------------

def initial_separation(normals: np.ndarray, init_scale: float, s0=None) -> np.ndarray:
    """Initial separations from per-episode standard normals.

    ``s0=None`` gives the isotropic Gaussian ``init_scale * normals``; a
    scalar ``s0`` fixes the norm and keeps the random direction; a vector
    ``s0`` is used as is for every episode.
    """
    if s0 is None:
        return init_scale * normals
    s0 = np.asarray(s0, dtype=float)
    if s0.ndim == 0:
        return float(s0) * normals / np.linalg.norm(normals, axis=-1, keepdims=True)
    return np.broadcast_to(s0, normals.shape).copy()


def _run_chunk(env, controller, cfg: TrainConfig, indices, tag: str, t0: float, s0, steps: int,
               record: bool) -> RolloutBatch:
    n = len(indices)
    d = env.d
    dt = cfg.dt
    if dt != env.integ.dt:
        raise ValueError(f"episode dt={dt} differs from the integrator dt={env.integ.dt}")
    gamma = cfg.gamma
    rngs = [child_rng(cfg.seed, tag, int(i)) for i in indices]
    init = np.stack([env.draw_initial(r_) for r_ in rngs])
    state = env.initial_state(init, initial_separation(init[:, :d], cfg.init_scale, s0))
    controller.reset(n)

    times = t0 + dt * np.arange(steps)
    if record:
        states = np.empty((n, steps, d))
        actions = np.empty((n, steps, d))
        raws = np.empty((n, steps, d))
        logps = np.empty((n, steps))
        rewards = np.empty((n, steps))
    G = np.zeros(n)
    disc = 1.0
    alive = np.ones(n, dtype=bool)
    abort_step = np.full(n, -1)
    filler = np.zeros(n)
    max_sep = env.integ.max_sep
    noise = None
    for k in range(steps):
        j = k % NOISE_BLOCK
        if j == 0:
            nb = min(NOISE_BLOCK, steps - k)
            noise = np.stack([r.standard_normal((nb, d + env.k_noise)) for r in rngs], axis=1)
        row = noise[j]
        t = times[k]
        sep = env.separation(state)
        applied, raw, logp = controller.act(t, sep, row[:, :d])
        r = reward(sep, applied, cfg.beta) * dt
        r = np.where(alive, r, filler)
        new_state = env.step(state, applied, row[:, d:])
        new_sep = env.separation(new_state)
        bad = alive & exceeded(new_sep, max_sep)
        if np.any(bad):
            abort_step[bad] = k
            # pessimistic completion: the reward at the abort state, repeated
            filler[bad] = np.nan_to_num(reward(new_sep[bad], applied[bad], cfg.beta) * dt,
                                        nan=-1e300, neginf=-1e300)
            alive &= ~bad
        new_state = np.where(_expand(alive, new_state), new_state, state)
        done = np.full(n, k == steps - 1) | bad
        controller.observe(t, sep, r, t + dt, env.separation(new_state), done)
        if record:
            states[:, k] = sep
            actions[:, k] = applied
            raws[:, k] = raw
            logps[:, k] = logp
            rewards[:, k] = r
        G += disc * r
        disc *= gamma
        state = new_state
    out = RolloutBatch(np.asarray(indices), G, abort_step >= 0, abort_step, times, seed=cfg.seed)
    if record:
        out.states, out.actions, out.raw_actions = states, actions, raws
        out.log_probs, out.rewards = logps, rewards
        out.final_states = env.separation(state).copy()
    return out


def _expand(mask, like):
    return mask.reshape(mask.shape + (1,) * (like.ndim - 1))


def rollout_batch(env, controller, cfg: TrainConfig, indices, tag: str = "rollout", t0: float = 0.0,
                  s0=None, steps: int | None = None, record: bool = True,
                  controller_factory=None) -> RolloutBatch:
    """Roll out episodes ``indices`` in chunks of ``cfg.chunk``.

    With ``cfg.workers > 1`` chunks run on a thread pool; stateful
    controllers then need ``controller_factory`` to give each chunk its own.
    """
    indices = np.asarray(list(indices), dtype=int)
    steps = cfg.steps if steps is None else steps
    chunks = [indices[i:i + cfg.chunk] for i in range(0, len(indices), cfg.chunk)]

    def run(ch):
        ctrl = controller_factory() if controller_factory is not None else controller
        return _run_chunk(env, ctrl, cfg, ch, tag, t0, s0, steps, record)

    if cfg.workers > 1 and len(chunks) > 1:
        if controller_factory is None and hasattr(controller, "ring"):
            raise ValueError("stateful controllers need controller_factory for parallel rollouts")
        with ThreadPoolExecutor(cfg.workers) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(ch) for ch in chunks]
    if len(parts) == 1:
        return parts[0]
    cat = lambda name: None if getattr(parts[0], name) is None else np.concatenate([getattr(p, name) for p in parts])
    return RolloutBatch(indices, cat("returns"), cat("aborted"), cat("abort_step"), parts[0].times,
                        cat("states"), cat("actions"), cat("raw_actions"), cat("log_probs"),
                        cat("rewards"), cat("final_states"), cfg.seed)


def rollout(env, controller, cfg: TrainConfig, episode_index: int, tag: str = "rollout",
            values=None) -> EpisodeTrace:
    """Single episode; ``values`` (callable ``(t, s) -> V``) fills per-step values."""
    tr = _run_chunk(env, controller, cfg, [episode_index], tag, 0.0, None, cfg.steps, True).trace(0)
    if values is not None:
        tr.values = values(tr.times, tr.states)
    return tr


def discounted_return(trace: EpisodeTrace, gamma: float) -> float:
    r = np.asarray(trace.rewards, dtype=float)
    return float(np.sum(gamma ** np.arange(r.size) * r))


def evaluate(env, controller, cfg: TrainConfig, n: int | None = None, tag: str = "eval",
             steps: int | None = None, controller_factory=None) -> np.ndarray:
    """Returns of ``n`` held-out episodes (same seeds on every call)."""
    n = cfg.eval_episodes if n is None else n
    return rollout_batch(env, controller, cfg, range(n), tag, steps=steps, record=False,
                         controller_factory=controller_factory).returns


@dataclass
class ReturnStats:
    returns: np.ndarray
    mean: float
    median: float
    stderr: float
    quantiles: dict
    histogram: tuple

    @classmethod
    def from_returns(cls, returns, bins: int = 50) -> "ReturnStats":
        g = np.asarray(returns, dtype=float)
        qs = {q: float(np.quantile(g, q)) for q in (0.05, 0.25, 0.5, 0.75, 0.95)}
        se = float(g.std(ddof=1) / math.sqrt(g.size)) if g.size > 1 else 0.0
        lo, hi = float(g.min()), float(g.max())
        hist = np.histogram(g, bins=bins, range=(lo, hi if hi > lo else lo + 1.0))
        return cls(g, float(g.mean()), float(np.median(g)), se, qs, hist)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def _batch_from_rollout(rb: RolloutBatch, cfg: TrainConfig) -> Batch:
    """Transitions of one recorded episode, truncated at an abort.

    The abort step is terminal and carries the discounted pessimistic
    completion of the remaining steps.
    """
    k_end = rb.abort_step[0] if rb.aborted[0] else cfg.steps - 1
    sl = slice(0, k_end + 1)
    s = rb.states[0, sl]
    s_next = np.concatenate([rb.states[0, 1:k_end + 1], rb.final_states[:1]]) if not rb.aborted[0] \
        else np.concatenate([rb.states[0, 1:k_end + 1], rb.states[0, k_end:k_end + 1]])
    rewards = rb.rewards[0, sl].copy()
    done = np.zeros(k_end + 1, dtype=bool)
    done[-1] = True
    if rb.aborted[0]:
        tail = rb.rewards[0, k_end + 1:]
        rewards[-1] += np.sum(cfg.gamma ** np.arange(1, tail.size + 1) * tail)
    t = rb.times[sl]
    return Batch(t, s, rb.raw_actions[0, sl], rb.log_probs[0, sl], rewards, t + cfg.dt, s_next, done)


@dataclass
class LearningCurve:
    episode: list = field(default_factory=list)
    mean_return: list = field(default_factory=list)
    median_return: list = field(default_factory=list)
    stderr: list = field(default_factory=list)

    def add(self, episode: int, returns: np.ndarray):
        st = ReturnStats.from_returns(returns)
        self.episode.append(episode)
        self.mean_return.append(st.mean)
        self.median_return.append(st.median)
        self.stderr.append(st.stderr)

    def rows(self):
        return list(zip(self.episode, self.mean_return, self.median_return, self.stderr))


def train_step(agent, batch: Batch, gamma: float) -> bool:
    if isinstance(agent, APAgent):
        batch.advantages = agent.advantages(batch, gamma)
        return ap_update(agent, batch)
    if isinstance(agent, PPOAgent):
        return ppo_update(agent, batch, gamma)
    if isinstance(agent, A2CAgent):
        return a2c_update(agent, batch, gamma)
    raise TypeError(f"unknown agent {type(agent).__name__}")


def train(agent, env, cfg: TrainConfig, curve: bool = True, callback=None):
    """One rollout and one update per episode.

    The learning curve evaluates the mean action on ``cfg.curve_episodes``
    held-out episodes every ``cfg.curve_every`` episodes (and at the start).
    With ``cfg.lr_decay`` the step sizes fall linearly to zero over the run.
    """
    lc = LearningCurve()
    gamma = cfg.gamma
    ctrl = PolicyController(agent.policy, explore=True)
    eval_ctrl = PolicyController(agent.policy, explore=False)
    if curve:
        lc.add(0, evaluate(env, eval_ctrl, cfg, cfg.curve_episodes))
    consecutive = 0
    opts = [o for o in (agent.opt, getattr(agent, "critic_opt", None)) if o is not None]
    base_lr = [o.lr for o in opts]
    for ep in range(cfg.episodes):
        if cfg.lr_decay:
            for o, lr in zip(opts, base_lr):
                o.lr = lr * (1.0 - ep / cfg.episodes)
        rb = _run_chunk(env, ctrl, cfg, [ep], "train", 0.0, None, cfg.steps, True)
        batch = _batch_from_rollout(rb, cfg)
        if train_step(agent, batch, gamma):
            consecutive = 0
        else:
            consecutive += 1
            if consecutive >= MAX_CONSECUTIVE_SKIPS:
                raise NonFiniteGradient(f"{consecutive} consecutive non-finite updates at episode {ep}")
        if callback is not None:
            callback(ep, rb, batch)
        if curve and (ep + 1) % cfg.curve_every == 0:
            lc.add(ep + 1, evaluate(env, eval_ctrl, cfg, cfg.curve_episodes))
    for o, lr in zip(opts, base_lr):
        o.lr = lr
    return lc, agent
