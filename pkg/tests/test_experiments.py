import math

import numpy as np
import pytest

from swimrl.agents import PrescribedController, reward
from swimrl.errors import InsufficientSamples, NoStationaryState
from swimrl.experiments import (AgentSpec, ComparisonRow, HistogramConfig, build_agent, lyapunov_experiment,
                                lyapunov_samples, pc_vs_ap_experiment, return_distribution_experiment,
                                separation_histogram_experiment, short_horizon_experiment,
                                value_validation_experiment)
from swimrl.flows import ABCFlowParams, BKFlowParams
from swimrl.rng import child_rng
from swimrl.theory import BaselineParams, bk_cramer, tail_exponent
from swimrl.training import TrainConfig, make_env

BK = BKFlowParams(0.04, 3, 1e-4)
PHI_STAR = 0.574166


def test_lyapunov_needs_samples():
    with pytest.raises(InsufficientSamples):
        lyapunov_experiment(BK, 1.0, 999)


def test_zero_abc_field_has_no_stretching():
    lam = lyapunov_samples(ABCFlowParams(0.0, 0.0, 0.0, 1e-4), 2.0, 50)
    assert np.all(lam == 0.0)


def test_histogram_rejects_sub_threshold_gain_and_missing_fit():
    with pytest.raises(NoStationaryState):
        separation_histogram_experiment(make_env(BK), 0.1)
    with pytest.raises(ValueError):
        separation_histogram_experiment(make_env(ABCFlowParams(1.0, 0.7, 0.43, 1e-4)), 1.1)


def test_predicted_tail_steepens_with_gain():
    fit = bk_cramer(0.04, 3)
    slopes = [tail_exponent(phi, fit).radial_slope for phi in (0.6, 1.1, 1.6)]
    assert slopes == sorted(slopes, reverse=True)


def test_small_histogram_run():
    cfg = HistogramConfig(n_particles=400, burn_in=3.0, duration=4.0, seed=1)
    res, pred = separation_histogram_experiment(make_env(BK), 1.1, cfg=cfg)
    widths = np.diff(res.edges)
    assert res.density.shape == res.centers.shape == res.predicted.shape
    assert np.all(res.density >= 0)
    assert np.sum(res.density * widths) <= 1.0 + 1e-9
    assert res.fitted_slope < 0 and pred.radial_slope == pytest.approx(-25.5)


def test_value_grid_terminal_row_is_zero():
    env = make_env(BK)
    cfg = TrainConfig(init_scale=0.0, steps=100)
    base = BaselineParams(PHI_STAR, 0.4, 0.1, 0.1, 1.0, BK.kappa, 3)
    grid = value_validation_experiment(env, base, cfg, [0.5, 1.0], [0.0, 0.05], n_rollouts=50)
    assert np.all(grid.mc[1] == 0.0) and np.all(grid.theory[1] == 0.0)
    assert np.all(grid.mc[0] < 0) and len(list(grid.rows())) == 4
    with pytest.raises(ValueError):
        value_validation_experiment(env, base, TrainConfig(init_scale=0.0, steps=50), [0.0], [0.0], 10)


def test_single_step_horizon_is_first_reward():
    env = make_env(BK)
    cfg = TrainConfig(init_scale=0.1, steps=1000, seed=3)
    n = 40
    out = short_horizon_experiment(env, {"a": PrescribedController(0.8), "b": PrescribedController(0.8)},
                                   [cfg.dt], cfg, n)
    assert np.array_equal(out["a"], out["b"])
    s0 = np.stack([0.1 * child_rng(3, "horizon", i).standard_normal(3) for i in range(n)])
    want = np.mean(reward(s0, 0.8 * s0, cfg.beta) * cfg.dt)
    assert out["a"][0, 0] == pytest.approx(want, rel=1e-12)


def test_noiseless_still_env_collapses_distributions():
    env = make_env(BKFlowParams(0.0, 3, 0.0))
    cfg = TrainConfig(init_scale=0.0, steps=50)
    base = BaselineParams(PHI_STAR, 0.4, 0.1, 0.1, 0.5, 1e-4, 3)
    agent = build_agent(AgentSpec(hidden=(8, 8)), base, 0)
    stats = return_distribution_experiment(env, agent, PHI_STAR, cfg, 20)
    for st in stats.values():
        assert np.all(st.returns == st.returns[0])


def test_agents_of_every_kind_share_the_initial_actor():
    base = BaselineParams(PHI_STAR, 0.4, 0.1, 0.1, 10.0, 1e-4, 3)
    thetas = [build_agent(AgentSpec(kind=k), base, 5).policy.theta for k in ("ap", "a2c", "ppo")]
    assert all(np.array_equal(thetas[0], t) for t in thetas[1:])
    with pytest.raises(ValueError):
        build_agent(AgentSpec(kind="ap"), None, 0)
    with pytest.raises(ValueError):
        AgentSpec(kind="sac")


def test_pc_vs_ap_with_given_agents():
    env = make_env(BK)
    cfg = TrainConfig(init_scale=0.05, steps=50)
    base = BaselineParams(PHI_STAR, 0.4, 0.1, 0.1, 0.5, 1e-4, 3)
    agent = build_agent(AgentSpec(hidden=(8, 8)), base, 0)
    rows, agents = pc_vs_ap_experiment(env, [PHI_STAR], cfg, AgentSpec(), 0.4, 20, {PHI_STAR: agent})
    assert agents[PHI_STAR] is agent
    assert rows[0].phi == PHI_STAR and math.isfinite(rows[0].ap_mean)
    assert ComparisonRow(1.0, -2.0, -1.0, 0.1, 0.1).winner == "AP"
    assert ComparisonRow(1.0, -1.0, -1.0, 0.1, 0.1).winner == "PC"
