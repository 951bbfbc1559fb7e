import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from swimrl.agents import (A2CAgent, APAgent, Batch, GaussianPolicy, HybridController, PolicyController,
                           PPOAgent, a2c_update, agent_from_dict, agent_to_dict, ap_update, hybrid_action,
                           load_agent, make_critic, normalize_advantages, policy_action, ppo_surrogate_weights,
                           ppo_update, prescribed_action, reward, save_agent, td_advantage)
from swimrl.flows import BKFlowParams, IntegratorConfig
from swimrl.neural import OptimizerState
from swimrl.theory import BaselineParams, physicist_value
from swimrl.training import TrainConfig, make_env, rollout_batch

BASE = BaselineParams(0.574166, 0.4, 0.1, 0.1, 10.0, 1e-4, 3)


def random_policy(seed=0, log_std=math.log(0.3)):
    rng = np.random.default_rng(seed)
    pol = GaussianPolicy(3, (16, 16), rng, log_std=log_std)
    # give the mean head something to say
    pol.net.weights[-1][...] = rng.standard_normal(pol.net.weights[-1].shape) * 0.3
    pol.net.biases[-1][...] = [0.2, -0.1, 0.05]
    return pol


def random_batch(n=20, seed=1, policy=None):
    rng = np.random.default_rng(seed)
    s = rng.standard_normal((n, 3)) * 0.1
    a = rng.standard_normal((n, 3)) * 0.3
    t = np.arange(n) * 0.01
    s_next = s + 0.01 * rng.standard_normal((n, 3))
    done = np.zeros(n, dtype=bool)
    done[-1] = True
    logp = policy.log_prob(s, a) if policy is not None else np.zeros(n)
    r = reward(s, a, 0.1) * 0.01
    return Batch(t, s, a, logp, r, t + 0.01, s_next, done)


# --- reward and simple rules ------------------------------------------------

# squares of components below ~1e-160 underflow to zero
COMPONENT = st.floats(-10, 10).filter(lambda x: x == 0 or abs(x) > 1e-100)


def test_reward_examples():
    assert reward(np.zeros(3), np.zeros(3), 0.1) == 0.0
    assert reward([1.0, 0, 0], np.zeros(3), 0.1) == pytest.approx(-0.1)
    assert reward(np.zeros(3), np.ones(3), 0.1) == pytest.approx(-3.0)


@settings(max_examples=100, deadline=None)
@given(st.lists(COMPONENT, min_size=3, max_size=3),
       st.lists(COMPONENT, min_size=3, max_size=3), st.floats(1e-3, 10))
def test_reward_non_positive(s, a, beta):
    r = reward(s, a, beta)
    assert r <= 0
    if r == 0:
        assert not np.any(s) and not np.any(a)


def test_prescribed_action():
    assert np.array_equal(prescribed_action(np.zeros(3), 0.574166), np.zeros(3))
    assert np.array_equal(prescribed_action([1.0, 0, 0], 0.574166), [0.574166, 0, 0])
    s = np.array([0.3, -0.2, 0.1])
    assert np.array_equal(prescribed_action(2 * s, 0.7), 2 * prescribed_action(s, 0.7))


def test_td_advantage_examples():
    assert td_advantage(0.0, -2.0, -2.0, 1.0) == 0.0
    assert td_advantage(-0.1, -1.0, -1.0, 0.999) == pytest.approx(-0.099, abs=1e-12)
    with pytest.raises(ValueError):
        td_advantage(0.0, 0.0, 0.0, 0.0)


def mrp(gamma):
    """Deterministic chain 0 -> 1 -> 2 -> end with rewards and exact values."""
    r = np.array([-0.5, -0.2, -1.0])
    v = np.zeros(3)
    v[2] = r[2]
    v[1] = r[1] + gamma * v[2]
    v[0] = r[0] + gamma * v[1]
    return r, v


def test_td_advantage_zero_with_exact_values():
    gamma = 0.9
    r, v = mrp(gamma)
    v_next = np.array([v[1], v[2], 0.0])
    assert np.allclose(td_advantage(r, v_next, v, gamma), 0.0, atol=1e-15)


def test_normalize_advantages():
    assert np.array_equal(normalize_advantages([2.0, 2.0]), [0.0, 0.0])
    z = normalize_advantages([1.0, 2.0, 3.0])
    assert z.mean() == pytest.approx(0.0) and z.std() == pytest.approx(1.0)


# --- Gaussian policy --------------------------------------------------------

def test_policy_std_to_zero_is_deterministic():
    pol = random_policy(log_std=-40.0)
    s = np.array([[0.1, 0.2, -0.3]])
    a, _ = policy_action(pol, s, np.random.default_rng(0))
    assert np.allclose(a, pol.mean(s), atol=1e-15)


def test_log_prob_at_mean():
    pol = random_policy()
    s = np.array([0.1, 0.2, -0.3])
    want = -np.sum(np.log(pol.std * math.sqrt(2 * math.pi)))
    assert pol.log_prob(s, pol.mean(s)) == pytest.approx(want, rel=1e-14)


def test_policy_moments():
    pol = random_policy()
    n = 100_000
    s = np.tile([0.05, -0.1, 0.2], (n, 1))
    _, raw, _ = pol.sample(s, np.random.default_rng(2).standard_normal((n, 3)))
    mu, std = pol.mean(s[0]), pol.std
    assert np.all(np.abs(raw.mean(0) - mu) < 3 * std / math.sqrt(n))
    assert np.all(np.abs(raw.var(0) - std ** 2) < 3 * std ** 2 * math.sqrt(2.0 / n))


def test_policy_action_clips_but_scores_raw():
    pol = random_policy(log_std=math.log(100.0))
    s = np.zeros((200, 3))
    eps = np.random.default_rng(0).standard_normal((200, 3))
    applied, raw, logp = pol.sample(s, eps)
    assert np.all(np.abs(applied) <= pol.a_max)
    assert np.any(np.abs(raw) > pol.a_max)
    assert np.allclose(logp, pol.log_prob(s, raw), rtol=1e-12)


def test_log_prob_slices_integrate_to_one():
    pol = random_policy()
    s = np.array([0.1, -0.2, 0.3])
    mu, std = pol.mean(s), pol.std
    for i in range(3):
        def dens(x):
            a = mu.copy()
            a[i] = x
            return math.exp(pol.log_prob(s, a))
        # the other components sit at their peak; divide their densities out
        peak = np.prod([1 / (std[j] * math.sqrt(2 * math.pi)) for j in range(3) if j != i])
        total = integrate.quad(dens, mu[i] - 12 * std[i], mu[i] + 12 * std[i], epsabs=0, epsrel=1e-10)[0]
        assert total / peak == pytest.approx(1.0, rel=1e-4)


def test_grad_log_prob_finite_differences():
    pol = random_policy()
    b = random_batch(5)
    w = np.random.default_rng(3).standard_normal(5)
    g = pol.grad_log_prob(b.s, b.actions, w)
    h = 1e-6
    for k in np.random.default_rng(4).choice(pol.theta.size, 40, replace=False):
        old = pol.theta[k]
        pol.theta[k] = old + h
        up = w @ pol.log_prob(b.s, b.actions)
        pol.theta[k] = old - h
        down = w @ pol.log_prob(b.s, b.actions)
        pol.theta[k] = old
        assert (up - down) / (2 * h) == pytest.approx(g[k], rel=1e-4, abs=1e-8)


# --- AP update --------------------------------------------------------------

def ap_agent(seed=0, lr=1e-3):
    return APAgent(random_policy(seed), BASE, OptimizerState(lr=lr))


def test_ap_zero_advantage_no_change():
    agent = ap_agent()
    b = random_batch()
    b.advantages = np.zeros(len(b))
    before = agent.policy.theta.copy()
    ap_update(agent, b)
    assert np.array_equal(agent.policy.theta, before)


def test_ap_positive_advantage_raises_log_prob():
    agent = ap_agent(lr=1e-4)
    b = random_batch(1)
    b.advantages = np.array([1.0])
    before = agent.policy.log_prob(b.s, b.actions)[0]
    ap_update(agent, b)
    assert agent.policy.log_prob(b.s, b.actions)[0] > before


def test_ap_opposite_advantages_cancel():
    agent = ap_agent()
    b = random_batch(1)
    two = Batch(*(np.concatenate([x, x]) for x in (b.t, b.s, b.actions, b.log_probs, b.rewards,
                                                    b.t_next, b.s_next, b.done)))
    two.advantages = np.array([0.7, -0.7])
    before = agent.policy.theta.copy()
    ap_update(agent, two)
    # the two terms cancel up to BLAS rounding (~1e-17), which Adam scales by lr / eps
    assert np.allclose(agent.policy.theta, before, rtol=0, atol=1e-6 * agent.opt.lr)


@pytest.mark.parametrize("lr", [1e-3, 1e-4, 1e-5])
def test_ap_step_increases_batch_objective(lr):
    agent = ap_agent(lr=lr)
    b = random_batch(30)
    b.advantages = agent.advantages(b, 0.999)
    obj = lambda: float(agent.policy.log_prob(b.s, b.actions) @ b.advantages)
    before = obj()
    ap_update(agent, b)
    assert obj() > before


def test_ap_advantages_use_physicist_value():
    agent = ap_agent()
    b = random_batch(4)
    adv = agent.advantages(b, 0.99)
    v = physicist_value(np.linalg.norm(b.s, axis=1), b.t, BASE)
    vn = physicist_value(np.linalg.norm(b.s_next, axis=1), b.t_next, BASE)
    vn[-1] = 0.0
    assert np.allclose(adv, b.rewards + 0.99 * vn - v, rtol=1e-14)


def test_ap_update_rejects_empty():
    with pytest.raises(ValueError):
        ap_update(ap_agent(), random_batch(3))


# --- A2C and PPO ------------------------------------------------------------

def a2c_agent(seed=0, lr=1e-3, cls=A2CAgent, **kw):
    pol = random_policy(seed)
    critic = make_critic(3, (16, 16), np.random.default_rng(seed + 100))
    return cls(pol, critic, OptimizerState(lr=lr), OptimizerState(lr=lr), **kw)


def test_a2c_critic_learns_mrp_values():
    gamma = 0.9
    r, v = mrp(gamma)
    states = np.array([[0.5, 0, 0], [0, 0.5, 0], [0, 0, 0.5]])
    b = Batch(np.zeros(3), states, np.zeros((3, 3)), np.zeros(3), r, np.zeros(3),
              np.array([states[1], states[2], states[2]]), np.array([False, False, True]))
    agent = a2c_agent(lr=0.0)
    agent.critic_opt = OptimizerState(lr=3e-3)
    for _ in range(5000):
        a2c_update(agent, b, gamma)
    assert np.max(np.abs(agent.value(0.0, states) - v)) < 1e-2


def test_a2c_zero_rewards_no_movement():
    agent = a2c_agent()
    b = random_batch()
    b.rewards = np.zeros(len(b))
    pol, cri = agent.policy.theta.copy(), agent.critic.theta.copy()
    a2c_update(agent, b, 0.999)
    assert np.array_equal(agent.policy.theta, pol) and np.array_equal(agent.critic.theta, cri)


def test_a2c_with_physicist_critic_matches_ap():
    gamma = 0.999
    b = random_batch(25)
    ap = ap_agent()
    a2c = a2c_agent()
    a2c.value = lambda t, s: physicist_value(np.linalg.norm(s, axis=-1), t, BASE)
    b.advantages = ap.advantages(b, gamma)
    start = ap.policy.theta.copy()
    ap_update(ap, b)
    a2c_update(a2c, b, gamma)
    assert np.allclose(a2c.policy.theta - start, ap.policy.theta - start, rtol=1e-12, atol=1e-15)


def test_ppo_clip_weights():
    adv = np.array([1.0, 1.0, -1.0, -1.0, 2.0])
    ratio = np.array([1.5, 1.1, 0.5, 0.9, 1.0])
    w = ppo_surrogate_weights(ratio, adv, 0.2)
    assert np.array_equal(w, [0.0, 1.1, 0.0, -0.9, 2.0])
    assert np.array_equal(ppo_surrogate_weights(np.ones(5), adv, 0.2), adv)


def test_ppo_wide_clip_one_epoch_equals_a2c():
    gamma = 0.999
    a2c = a2c_agent()
    ppo = a2c_agent(cls=PPOAgent, clip=1e12, epochs=1)
    b = random_batch(25, policy=a2c.policy)
    start = a2c.policy.theta.copy()
    a2c_update(a2c, b, gamma)
    ppo_update(ppo, b, gamma)
    d_a2c, d_ppo = a2c.policy.theta - start, ppo.policy.theta - start
    assert np.linalg.norm(d_ppo - d_a2c) <= 1e-6 * np.linalg.norm(d_a2c)
    assert np.allclose(ppo.critic.theta, a2c.critic.theta, rtol=1e-12)


def test_ppo_validation():
    with pytest.raises(ValueError):
        a2c_agent(cls=PPOAgent, clip=0.0)
    with pytest.raises(ValueError):
        a2c_agent(cls=PPOAgent, epochs=0)


def test_every_rule_zero_advantage_fresh_optimizer():
    # rewards equal to V(s) - gamma V(s') make every critic advantage vanish
    gamma = 0.99
    for cls in (A2CAgent, PPOAgent):
        agent = a2c_agent(cls=cls)
        b = random_batch(10, policy=agent.policy)
        v = agent.value(b.t, b.s)
        vn = np.where(b.done, 0.0, agent.value(b.t_next, b.s_next))
        b.rewards = v - gamma * vn
        agent.critic_opt = OptimizerState(lr=0.0)
        before = agent.policy.theta.copy()
        (ppo_update if cls is PPOAgent else a2c_update)(agent, b, gamma)
        assert np.allclose(agent.policy.theta, before, rtol=0, atol=1e-12)


# --- hybrid -----------------------------------------------------------------

def hybrid(threshold=0.0, explore=False):
    return HybridController(random_policy(), BASE, 0.574166, 0.999, n=5, threshold=threshold, explore=explore)


def test_hybrid_empty_ring_plays_ap():
    ctrl = hybrid()
    s = np.array([0.1, -0.2, 0.3])
    assert np.array_equal(hybrid_action(ctrl, s), ctrl.policy.mean(s))


def test_hybrid_forced_switch():
    ctrl = hybrid()
    s = np.array([0.1, -0.2, 0.3])
    ctrl.ring[:] = -1e6
    ctrl.count[:] = ctrl.n
    assert np.array_equal(hybrid_action(ctrl, s), prescribed_action(s, 0.574166))


def test_hybrid_ring_updates_every_step():
    ctrl = hybrid()
    ctrl.reset(2)
    s = np.full((2, 3), 0.1)
    for k in range(7):
        ctrl.observe(0.01 * k, s, np.full(2, -0.01), 0.01 * (k + 1), s, np.zeros(2, dtype=bool))
    assert np.array_equal(ctrl.count, [7, 7])
    assert np.all(ctrl.ring != 0.0)
    with pytest.raises(ValueError):
        HybridController(random_policy(), BASE, 0.5, 0.99, n=0)


def test_hybrid_without_threshold_matches_pure_ap():
    flow = BKFlowParams(0.04, 3, 1e-4)
    env = make_env(flow, IntegratorConfig(dt=0.01))
    cfg = TrainConfig(init_scale=0.3, steps=200, seed=3)
    ctrl = hybrid(threshold=-math.inf, explore=True)
    a = rollout_batch(env, ctrl, cfg, range(4), "hyb")
    b = rollout_batch(env, PolicyController(ctrl.policy, explore=True), cfg, range(4), "hyb")
    assert np.array_equal(a.states, b.states) and np.array_equal(a.returns, b.returns)
    assert not ctrl.switched.any()


# --- checkpoints ------------------------------------------------------------

@pytest.mark.parametrize("kind", ["ap", "a2c", "ppo"])
def test_checkpoint_round_trip(tmp_path, kind):
    agent = {"ap": ap_agent, "a2c": a2c_agent, "ppo": lambda: a2c_agent(cls=PPOAgent, clip=0.3, epochs=2)}[kind]()
    path = tmp_path / "agent.json"
    save_agent(agent, path)
    back = load_agent(path)
    assert type(back) is type(agent)
    assert np.array_equal(back.policy.theta, agent.policy.theta)
    assert agent_to_dict(back) == agent_to_dict(agent)
    s = np.array([0.1, 0.0, -0.1])
    assert np.array_equal(back.policy.mean(s), agent.policy.mean(s))
    with pytest.raises(ValueError):
        agent_from_dict({**agent_to_dict(agent), "kind": "dqn"})
