"""Experiment suites built on the rollout engine.

Each suite returns plain dataclasses; persistence is left to the CLI.

The tail experiment needs probabilities far below what plain sampling can
reach (the BK radial density at ten diffusive scales is ~1e-30 of its peak
for the steeper gains), so it uses weight-window splitting: particles that
move outward are split into lighter copies and particles that fall back
are rouletted, both without bias on weighted averages.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .agents import (A2CAgent, APAgent, GaussianPolicy, HybridController, PolicyController, PPOAgent,
                     PrescribedController, make_critic)
from .errors import InsufficientSamples
from .flows import (ABCFlowParams, BKFlowParams, abc_jacobian, abc_velocity, bk_gradient_from_normals,
                    evolve_tangents)
from .neural import OptimizerState
from .rng import child_rng
from .theory import (BaselineParams, CramerFit, TailPrediction, bk_cramer, d_tilde_from_bk,
                     d_tilde_from_lyapunov, fit_cramer, physicist_value, radial_density_bk,
                     tail_exponent)
from .training import ABCEnv, BKEnv, ReturnStats, TrainConfig, evaluate, rollout_batch, train

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Lyapunov statistics
# ---------------------------------------------------------------------------

def lyapunov_samples(flow, t_window: float, n_samples: int, seed: int = 0, dt: float = 1e-2,
                     chunk: int = 2000) -> np.ndarray:
    """Finite-time leading exponents ``log sigma_max(W(t; 0)) / t``.

    For BK the tangent is driven by the gradient sampler.  For ABC it follows
    the Jacobian along noisy passive trajectories started uniformly on the
    torus; the per-particle noise has variance ``kappa / 2``.
    """
    steps = int(round(t_window / dt))
    if steps < 1:
        raise ValueError("t_window must cover at least one step")
    out = []
    for ci, start in enumerate(range(0, n_samples, chunk)):
        n = min(chunk, n_samples - start)
        rng = child_rng(seed, "lyapunov", ci)
        W = np.tile(np.eye(flow.d), (n, 1, 1))
        log_scale = np.zeros(n)
        if isinstance(flow, BKFlowParams):
            d = flow.d
            for _ in range(steps):
                M = bk_gradient_from_normals(flow, dt, rng.standard_normal((n, d * d)))
                W, log_scale = evolve_tangents(W, log_scale, M)
        elif isinstance(flow, ABCFlowParams):
            pos = rng.uniform(0.0, 2.0 * math.pi, (n, 3))
            amp = math.sqrt(0.5 * flow.kappa * dt)
            for _ in range(steps):
                J = abc_jacobian(flow, pos)
                W, log_scale = evolve_tangents(W, log_scale, J * dt)
                pos = pos + abc_velocity(flow, pos) * dt + amp * rng.standard_normal((n, 3))
        else:
            raise TypeError(f"unknown flow spec {type(flow).__name__}")
        sv = np.linalg.svd(W, compute_uv=False)[:, 0]
        out.append((np.log(sv) + log_scale) / (steps * dt))
    return np.concatenate(out)


@dataclass
class LyapunovResult:
    fit: CramerFit
    d_tilde: float
    samples: np.ndarray = field(repr=False)


def lyapunov_experiment(flow, t_window: float, n_samples: int, seed: int = 0, dt: float = 1e-2,
                        d: int = 3) -> LyapunovResult:
    """Fit the finite-time statistics and convert the mean to an eddy diffusivity."""
    if n_samples < 1000:
        raise InsufficientSamples(f"need >= 1000 samples, got {n_samples}")
    lam = lyapunov_samples(flow, t_window, n_samples, seed, dt)
    fit = fit_cramer(lam, t_window)
    return LyapunovResult(fit, d_tilde_from_lyapunov(fit.lambda_bar, d), lam)


# ---------------------------------------------------------------------------
# Stationary separation histogram
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HistogramConfig:
    """Settings of the long prescribed-control run.

    ``n_particles`` is the target population of the splitting ensemble;
    the fit uses bins in ``[fit_lo, fit_hi]`` diffusive scales.
    """

    n_particles: int = 4000
    burn_in: float = 20.0
    duration: float = 60.0
    split_every: int = 1
    bins_per_decade: int = 20
    fit_lo: float = 3.0
    fit_hi: float = 10.0
    splitting: bool = True
    importance_power: float | None = None
    adapt_every: int = 50
    max_split: int = 16
    max_population: int = 8
    seed: int = 0


@dataclass
class SeparationHistogram:
    centers: np.ndarray
    edges: np.ndarray
    density: np.ndarray
    predicted: np.ndarray
    fitted_slope: float
    prediction: TailPrediction
    fit_range: tuple
    final_population: int
    lost_weight: float

    @property
    def predicted_slope(self) -> float:
        return self.prediction.radial_slope

    @property
    def relative_error(self) -> float:
        return abs(self.fitted_slope - self.predicted_slope) / abs(self.predicted_slope)


def _weight_window(state, w, target, rng, max_split: int, limit: int | None = None):
    """Split particles heavier than twice their target weight (at most
    ``max_split`` copies per call) and roulette those lighter than half of it.

    If the split population would exceed ``limit``, every copy survives
    independently with probability ``limit / (2 * total)`` and carries the
    inverse weight, which keeps weighted sums unbiased.
    """
    ratio = w / target
    light = ratio < 0.5
    survive = ~light | (rng.random(len(w)) < ratio)
    w = np.where(light, target, w)
    copies = np.where(ratio > 2.0, np.minimum(np.floor(ratio), max_split), 1).astype(int)
    copies = np.where(survive, copies, 0)
    w = w / np.maximum(copies, 1)
    total = int(copies.sum())
    if limit is not None and total > limit:
        keep = 0.5 * limit / total
        copies = rng.binomial(copies, keep)
        w = w / keep
    idx = np.repeat(np.arange(len(w)), copies)
    return state[idx], w[idx]


def _flat_window(acc, centers, k: float):
    """Per-bin target share for a roughly flat particle population.

    Bins outward of the mode get their observed weight share, made
    non-increasing; inward bins share the mode's; bins past the populated
    frontier continue with the power law ``x**-k``.  Returns the shares and
    the number of bins they cover.
    """
    share = acc / acc.sum()
    m = int(np.argmax(share))
    pop = np.flatnonzero(share > 0)
    f = int(pop[-1])
    out = np.empty_like(share)
    out[:m + 1] = share[m]
    out[m:f + 1] = np.minimum.accumulate(np.maximum(share[m:f + 1], 1e-300))
    out[f + 1:] = out[f] * (centers[f + 1:] / centers[f]) ** -k
    return np.maximum(out, 1e-300), f - m + 1


def _fit_loglog(centers, density, lo, hi) -> float:
    sel = (centers >= lo) & (centers <= hi) & (density > 0)
    if sel.sum() < 3:
        raise InsufficientSamples(f"only {int(sel.sum())} populated bins in the fit range")
    slope, _ = np.polyfit(np.log(centers[sel]), np.log(density[sel]), 1)
    return float(slope)


def separation_histogram_experiment(env, phi: float, fit: CramerFit | None = None,
                                    cfg: HistogramConfig = HistogramConfig()):
    """Radial density of ``|s|`` under ``a = phi s`` and its predicted tail.

    ``fit`` defaults to the exact BK statistics for a BK environment and is
    required for ABC.  Returns ``(SeparationHistogram, TailPrediction)``.
    """
    if isinstance(env, BKEnv):
        fit = fit or bk_cramer(env.params.D, env.params.d)
    elif fit is None:
        raise ValueError("an empirical Cramer fit is needed outside the BK flow")
    kappa = env.params.kappa
    pred = tail_exponent(phi, fit, kappa)  # raises NoStationaryState
    s_d = pred.s_d
    d = env.d
    rng = child_rng(cfg.seed, "histogram", 0)
    ctrl = PrescribedController(phi)

    lo_edge, hi_edge = math.log10(s_d) - 1.5, math.log10(s_d * cfg.fit_hi) + 0.3
    n_bins = int(math.ceil((hi_edge - lo_edge) * cfg.bins_per_decade))
    edges = np.logspace(lo_edge, hi_edge, n_bins + 1)
    hist = np.zeros(n_bins)
    total = 0.0

    centers = np.sqrt(edges[1:] * edges[:-1])
    k = pred.exponent if cfg.importance_power is None else cfg.importance_power
    acc = np.zeros(n_bins)  # weighted occupation since the start, drives the window
    target_share = None

    n = cfg.n_particles
    normals = rng.standard_normal((n, d))
    if isinstance(env, ABCEnv):
        init = np.concatenate([normals, rng.uniform(0.0, 2.0 * math.pi, (n, 3))], axis=1)
    else:
        init = normals
    if cfg.splitting:
        # spread the ensemble log-uniformly over the histogram range, weighted
        # by a smooth guess (Gaussian-like core, power-law tail) of the
        # stationary law; the burn-in forgets the guess, but the tail no longer
        # has to be filled by slow diffusion in log |s|
        u = rng.uniform(math.log(s_d / 3.0), math.log(edges[-1]), n)
        r = np.exp(u)
        dirs = normals / np.linalg.norm(normals, axis=1, keepdims=True)
        sep0 = r[:, None] * dirs
        logw = d * u - 0.5 * k * np.log1p((r / s_d) ** 2)
        w = np.exp(logw - logw.max())
        w /= w.sum()
    else:
        sep0 = s_d / 3.0 * normals
        w = np.full(n, 1.0 / n)
    state = env.initial_state(init, sep0)
    c = 1.0
    lost = 0.0
    dt = env.integ.dt
    burn = int(round(cfg.burn_in / dt))
    steps = burn + int(round(cfg.duration / dt))
    max_sep = env.integ.max_sep
    for step in range(steps):
        sep = env.separation(state)
        a, _, _ = ctrl.act(0.0, sep, None)
        noise = rng.standard_normal((len(w), env.k_noise))
        state = env.step(state, a, noise)
        sn = np.linalg.norm(env.separation(state), axis=-1)
        bad = ~np.isfinite(sn) | (sn > max_sep)
        if np.any(bad):
            lost += float(w[bad].sum())
            state, w, sn = state[~bad], w[~bad], sn[~bad]
        if not len(w):
            break
        # bincount, not np.histogram: the latter sums weights through a
        # cumulative sum and cancels tail weights many decades below the core
        raw = np.searchsorted(edges, sn, side="right") - 1
        b = np.clip(raw, 0, n_bins - 1)
        acc += np.bincount(b, weights=w, minlength=n_bins)
        if step >= burn:
            inside = (raw >= 0) & (raw < n_bins)
            hist += np.bincount(raw[inside], weights=w[inside], minlength=n_bins)
            total += float(w.sum())
        if not cfg.splitting:
            continue
        if step % cfg.adapt_every == 0:
            target_share, n_active = _flat_window(acc, centers, k)
            c = float(w.sum()) * n_active / n
        if target_share is not None and step % cfg.split_every == 0:
            # population control rescales the window; any previsible target
            # keeps weighted averages unbiased
            if len(w) > cfg.max_population * n:
                c *= 2.0
            elif len(w) < n // 2:
                c *= 0.5
            state, w = _weight_window(state, w, c * target_share[b], rng, cfg.max_split,
                                      cfg.max_population * n)
    widths = np.diff(edges)
    density = hist / (total * widths) if total > 0 else hist
    lo, hi = cfg.fit_lo * s_d, cfg.fit_hi * s_d
    slope = _fit_loglog(centers, density, lo, hi)
    if isinstance(env, BKEnv):
        p = env.params
        bp = BaselineParams(phi, d_tilde_from_bk(p.D, p.d), 0.0, 1.0, 1.0, p.kappa, p.d)
        predicted = radial_density_bk(centers, bp)
    else:
        # power law anchored at the first populated fit bin
        sel = np.flatnonzero((centers >= lo) & (density > 0))
        j = sel[0] if sel.size else 0
        predicted = density[j] * (centers / centers[j]) ** pred.radial_slope
    res = SeparationHistogram(centers, edges, density, predicted, slope, pred, (lo, hi),
                              len(w), lost)
    return res, pred


# ---------------------------------------------------------------------------
# Value validation
# ---------------------------------------------------------------------------

@dataclass
class ValueGrid:
    times: np.ndarray
    norms: np.ndarray
    mc: np.ndarray
    mc_stderr: np.ndarray
    theory: np.ndarray

    @property
    def abs_error(self) -> np.ndarray:
        return np.abs(self.mc - self.theory)

    @property
    def rel_error(self) -> np.ndarray:
        den = np.abs(self.theory)
        return np.divide(self.abs_error, den, out=np.zeros_like(den), where=den > 0)

    @property
    def max_rel_error(self) -> float:
        return float(self.rel_error.max())

    def rows(self):
        for i, t in enumerate(self.times):
            for j, s in enumerate(self.norms):
                yield (t, s, self.mc[i, j], self.mc_stderr[i, j], self.theory[i, j],
                       self.abs_error[i, j], self.rel_error[i, j])


def value_validation_experiment(env, baseline: BaselineParams, cfg: TrainConfig, times, norms,
                                n_rollouts: int = 10_000, tag: str = "value") -> ValueGrid:
    """Monte Carlo discounted returns of ``a = phi s`` from ``(t, |s|)`` versus
    the physicist value.  Directions (and, for ABC, the target position) are
    random per rollout."""
    if abs(baseline.horizon - cfg.horizon) > 1e-9 * cfg.horizon:
        raise ValueError(f"baseline horizon {baseline.horizon} != episode horizon {cfg.horizon}")
    if abs(baseline.nu - cfg.nu) > 1e-12:
        raise ValueError("baseline and episode discount rates differ")
    times = np.asarray(times, dtype=float)
    norms = np.asarray(norms, dtype=float)
    ctrl = PrescribedController(baseline.phi)
    mc = np.zeros((times.size, norms.size))
    se = np.zeros_like(mc)
    for i, t in enumerate(times):
        steps = int(round((cfg.horizon - t) / cfg.dt))
        for j, s in enumerate(norms):
            g = rollout_batch(env, ctrl, cfg, range(n_rollouts), f"{tag}/{i}/{j}", t0=t, s0=s,
                              steps=steps, record=False).returns
            mc[i, j] = g.mean()
            se[i, j] = g.std(ddof=1) / math.sqrt(g.size) if g.size > 1 else 0.0
    theory = physicist_value(norms[None, :], times[:, None], baseline)
    return ValueGrid(times, norms, mc, se, np.broadcast_to(theory, mc.shape).copy())


# ---------------------------------------------------------------------------
# Agents for the comparison suites
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AgentSpec:
    """Architecture and optimiser settings shared by every learning agent."""

    kind: str = "ap"
    hidden: tuple = (64, 64)
    lr: float = 1e-3
    critic_lr: float | None = None
    log_std: float = 0.0
    a_max: float = 20.0
    obs_scale: float = 1.0
    act_scale: float = 1.0
    clip: float = 0.2
    epochs: int = 4
    schedule: str = "adam"
    normalize: bool = True

    def __post_init__(self):
        if self.kind not in ("ap", "a2c", "ppo"):
            raise ValueError(f"unknown agent kind {self.kind!r}")


def build_agent(spec: AgentSpec, baseline: BaselineParams | None, seed: int, d: int = 3, index: int = 0):
    """Fresh agent; the initial weights depend only on ``(seed, index)``, so
    agents of different kinds built with the same arguments share their actor."""
    rng = child_rng(seed, "init", index)
    policy = GaussianPolicy(d, spec.hidden, rng, spec.log_std, spec.a_max, spec.obs_scale, spec.act_scale)
    opt = OptimizerState(lr=spec.lr, schedule=spec.schedule)
    if spec.kind == "ap":
        if baseline is None:
            raise ValueError("the Actor-Physicist needs baseline parameters")
        return APAgent(policy, baseline, opt, spec.normalize)
    critic = make_critic(d, spec.hidden, child_rng(seed, "init-critic", index))
    copt = OptimizerState(lr=spec.critic_lr if spec.critic_lr is not None else spec.lr,
                          schedule=spec.schedule)
    if spec.kind == "a2c":
        return A2CAgent(policy, critic, opt, copt, spec.normalize)
    return PPOAgent(policy, critic, opt, copt, spec.normalize, clip=spec.clip, epochs=spec.epochs)


def greedy(agent) -> PolicyController:
    return PolicyController(agent.policy, explore=False)


# ---------------------------------------------------------------------------
# Comparison suites
# ---------------------------------------------------------------------------

@dataclass
class ComparisonRow:
    phi: float
    pc_mean: float
    ap_mean: float
    pc_stderr: float
    ap_stderr: float

    @property
    def winner(self) -> str:
        return "AP" if self.ap_mean > self.pc_mean else "PC"


def pc_vs_ap_experiment(env, phis, cfg: TrainConfig, spec: AgentSpec, d_tilde: float,
                        n_eval: int = 1000, agents=None):
    """Train one AP agent per gain (its baseline uses that gain) and compare
    it with proportional control on the same ``n_eval`` held-out episodes.

    Returns ``(rows, agents)``; pre-trained ``agents`` (a dict keyed by
    gain) skip training.
    """
    rows, trained = [], {}
    for phi in phis:
        agent = None if agents is None else agents.get(phi)
        if agent is None:
            bp = BaselineParams(phi, d_tilde, cfg.beta, cfg.nu, cfg.horizon, env.params.kappa, env.d)
            agent = build_agent(replace_kind(spec, "ap"), bp, cfg.seed, env.d)
            train(agent, env, cfg, curve=False)
        trained[phi] = agent
        g_pc = evaluate(env, PrescribedController(phi), cfg, n_eval, tag="compare")
        g_ap = evaluate(env, greedy(agent), cfg, n_eval, tag="compare")
        rows.append(ComparisonRow(phi, float(g_pc.mean()), float(g_ap.mean()),
                                  float(g_pc.std(ddof=1) / math.sqrt(n_eval)),
                                  float(g_ap.std(ddof=1) / math.sqrt(n_eval))))
    return rows, trained


def replace_kind(spec: AgentSpec, kind: str) -> AgentSpec:
    return replace(spec, kind=kind)


def hybrid_controller(agent: APAgent, phi: float, gamma: float, n: int = 10,
                      threshold: float = 0.0) -> HybridController:
    return HybridController(agent.policy, agent.baseline, phi, gamma, n, threshold, explore=False)


def return_distribution_experiment(env, agent: APAgent, phi: float, cfg: TrainConfig,
                                   n_episodes: int = 500, hybrid_n: int = 10,
                                   hybrid_threshold: float = 0.0, tag: str = "returns") -> dict:
    """Return distributions of AP, PC and the hybrid on shared held-out episodes."""
    factory = lambda: hybrid_controller(agent, phi, cfg.gamma, hybrid_n, hybrid_threshold)
    out = {
        "AP": evaluate(env, greedy(agent), cfg, n_episodes, tag=tag),
        "PC": evaluate(env, PrescribedController(phi), cfg, n_episodes, tag=tag),
        "hybrid": evaluate(env, factory(), cfg, n_episodes, tag=tag, controller_factory=factory),
    }
    return {k: ReturnStats.from_returns(v) for k, v in out.items()}


def short_horizon_experiment(env, controllers: dict, horizons, cfg: TrainConfig,
                             n_episodes: int = 250, tag: str = "horizon") -> dict:
    """Mean return of each named controller for episodes truncated at each horizon.

    Returns ``{name: array of (mean, stderr) per horizon}``.
    """
    out = {}
    for name, ctrl in controllers.items():
        rows = []
        for h in horizons:
            steps = max(1, int(round(h / cfg.dt)))
            g = evaluate(env, ctrl, cfg, n_episodes, tag=tag, steps=steps)
            rows.append((g.mean(), g.std(ddof=1) / math.sqrt(g.size)))
        out[name] = np.array(rows)
    return out


def agent_comparison_experiment(env, cfg: TrainConfig, specs: dict, baseline: BaselineParams,
                                n_eval: int | None = None):
    """Train each named agent spec under the same seeds and report learning
    curves plus final held-out returns (mean action)."""
    result = {}
    for name, spec in specs.items():
        agent = build_agent(spec, baseline, cfg.seed, env.d)
        curve, agent = train(agent, env, cfg)
        g = evaluate(env, greedy(agent), cfg, n_eval, tag="final")
        result[name] = (curve, agent, ReturnStats.from_returns(g))
    return result
