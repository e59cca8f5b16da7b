import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from moorl.data import Batch
from moorl.errors import InvalidArgumentError, NumericalError
from moorl.sac import (AgentParams, AgentSpec, Optimizers, SacConfig, actor_loss_and_grad,
                       actor_sample, backup_values, critic_loss_and_grad, init_agent, mean_q,
                       q_values, sac_update, soft_update, squashed_log_prob,
                       temperature_loss_and_grad)

from oracles import gradient_errors


def discrete_batch(states, actions, rewards, next_states, dones):
    n = len(states)
    return Batch(np.asarray(states), np.asarray(actions), np.asarray(rewards, float),
                 np.asarray(next_states), np.asarray(dones, float), np.zeros(n, int))


def linear_discrete(n_obs=1, n_actions=1):
    """No hidden layer: every network is W (n_obs x out) then b."""
    return AgentSpec(n_obs, True, n_actions=n_actions, hidden=())


def test_entropy_targets():
    assert SacConfig().entropy_target(AgentSpec(3, False, action_dim=4)) == -2.0
    assert SacConfig(target_entropy=0.3).entropy_target(linear_discrete()) == 0.3
    with pytest.raises(InvalidArgumentError):
        SacConfig(gamma=1.0)
    with pytest.raises(InvalidArgumentError):
        SacConfig(ema_rho=0.0)


def test_params_shapes_and_alpha():
    spec = AgentSpec(4, True, n_actions=3, hidden=(5,))
    p = init_agent(spec, np.random.default_rng(0), init_alpha=1.0)
    assert p.alpha == 1.0 and p.critic1.shape == p.target2.shape == (spec.critic.n_params,)
    assert np.array_equal(p.critics, p.targets)
    with pytest.raises(InvalidArgumentError):
        AgentParams(p.actor, critics=p.critics, targets=p.targets[:, :-1])


def test_discrete_uniform_log_prob():
    spec = AgentSpec(3, True, n_actions=4, hidden=(5,))
    actor = np.zeros(spec.actor.n_params)
    a, lp = actor_sample(spec, actor, np.arange(3).repeat(50), np.random.default_rng(0))
    assert np.allclose(lp, np.log(0.25)) and set(a.tolist()) == {0, 1, 2, 3}


def test_discrete_probabilities_sum_to_one():
    spec = AgentSpec(3, True, n_actions=4, hidden=(5,))
    p = init_agent(spec, np.random.default_rng(1))
    p.actor += np.random.default_rng(2).normal(size=p.actor.shape)
    from moorl.nn import mlp_forward
    logits = mlp_forward(spec.actor, p.actor, spec.encode(np.arange(3)))
    z = logits - logits.max(axis=1, keepdims=True)
    probs = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    a, lp = actor_sample(spec, p.actor, np.arange(3), np.random.default_rng(0))
    assert np.allclose(np.exp(lp), probs[np.arange(3), a])
    assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-9)


def test_continuous_deterministic_in_range():
    spec = AgentSpec(2, False, action_dim=3, hidden=(8,))
    p = init_agent(spec, np.random.default_rng(0))
    p.actor *= 3.0
    a, _ = actor_sample(spec, p.actor, np.random.default_rng(1).normal(size=(1000, 2)), None, True)
    assert a.shape == (1000, 3) and np.all(np.abs(a) < 1.0)


def test_continuous_entropy_matches_quadrature():
    # actor with zero weights: mean 0, log_std 0 for any state
    spec = AgentSpec(1, False, action_dim=1, hidden=())
    actor = np.zeros(spec.actor.n_params)
    _, lp = actor_sample(spec, actor, np.zeros((100_000, 1)), np.random.default_rng(0))
    u = np.linspace(-12.0, 12.0, 200_001)
    du = u[1] - u[0]
    phi = np.exp(-0.5 * u * u) / np.sqrt(2 * np.pi)
    corr = np.sum(phi * np.log(1.0 - np.tanh(u) ** 2 + 1e-6)) * du
    expected = 0.5 * np.log(2 * np.pi * np.e) + corr
    assert np.mean(-lp) == pytest.approx(expected, abs=0.01)


@pytest.mark.parametrize("mean,log_std", [(0.0, 0.0), (0.7, -0.5), (-1.5, 0.4)])
def test_squashed_density_integrates_to_one(mean, log_std):
    a = np.linspace(-1 + 1e-9, 1 - 1e-9, 400_001)
    u = np.arctanh(a)
    dens = np.exp(squashed_log_prob(u[:, None], np.full((1, 1), mean), np.full((1, 1), log_std)))
    assert np.trapezoid(dens, a) == pytest.approx(1.0, abs=1e-3)


def test_non_finite_actor_output():
    spec = AgentSpec(2, False, action_dim=1, hidden=(3,))
    actor = np.full(spec.actor.n_params, np.nan)
    with pytest.raises(NumericalError):
        actor_sample(spec, actor, np.zeros(2), np.random.default_rng(0))


def test_critic_loss_zero_on_exact_terminal_fit():
    spec = linear_discrete(2, 2)
    p = init_agent(spec, np.random.default_rng(0))
    # Q = bias 0.7 everywhere, terminal transitions with reward 0.7
    for c in (p.critics, p.targets):
        c[:] = 0.0
        c[:, -2:] = 0.7
    batch = discrete_batch([0, 1], [0, 1], [0.7, 0.7], [1, 0], [1, 1])
    loss, g1, g2 = critic_loss_and_grad(spec, batch, p, SacConfig())
    assert loss == 0.0 and not g1.any() and not g2.any()


def test_critic_loss_by_hand_cdq():
    spec = linear_discrete()
    p = AgentParams(np.zeros(2), [2.0, 0.5], [1.0, 0.0], [1.0, 1.0], [0.5, 0.0], 0.0)
    batch = discrete_batch([0], [0], [1.0], [0], [0])
    loss, _, _ = critic_loss_and_grad(spec, batch, p, SacConfig(gamma=0.9))
    # y = 1 + 0.9 * min(2, 0.5); Q1 = 2.5, Q2 = 1
    y = 1 + 0.9 * 0.5
    assert loss == pytest.approx((2.5 - y) ** 2 + (1 - y) ** 2, abs=1e-12)


def test_critic_loss_by_hand_entropy_backup():
    spec = linear_discrete(1, 2)
    # target1 per-action Q' = (1, 3); uniform actor -> soft value = 2 + alpha * ln 2
    t1 = np.array([0.0, 0.0, 1.0, 3.0])
    p = AgentParams(np.zeros(4), np.zeros(4), np.zeros(4), t1, np.zeros(4), np.log(0.5))
    batch = discrete_batch([0], [1], [0.0], [0], [0])
    cfg = SacConfig(gamma=0.5, use_cdq=False, use_entropy_backup=True)
    y = 0.5 * (2.0 + 0.5 * np.log(2))
    loss, _, _ = critic_loss_and_grad(spec, batch, p, cfg)
    assert loss == pytest.approx(2 * y * y, abs=1e-12)


def test_empty_batch_rejected():
    spec = linear_discrete()
    p = init_agent(spec, np.random.default_rng(0))
    empty = discrete_batch([], [], [], [], [])
    for fn in (critic_loss_and_grad, actor_loss_and_grad, temperature_loss_and_grad):
        with pytest.raises(InvalidArgumentError):
            fn(spec, empty, p, SacConfig(), np.random.default_rng(0))


@pytest.mark.parametrize("seed", range(6))
def test_gradients_match_finite_differences(seed):
    err = gradient_errors(100 + seed)
    assert err["critic"] < 1e-4 and err["temperature"] < 1e-4 and err["actor"] < 1e-3


def test_critic_gradient_on_one_transition_matches_network_chain():
    from moorl.nn import mlp_backward, mlp_forward
    spec = AgentSpec(3, True, n_actions=2, hidden=(4,))
    p = init_agent(spec, np.random.default_rng(3))
    batch = discrete_batch([1], [1], [0.5], [2], [0])
    cfg = SacConfig(gamma=0.9)
    _, g1, _ = critic_loss_and_grad(spec, batch, p, cfg)
    y = 0.5 + 0.9 * backup_values(spec, p, cfg, batch.next_states, None)[0]
    x = spec.encode([1])[0]
    q = mlp_forward(spec.critic, p.critic1, x)[1]
    chain, _ = mlp_backward(spec.critic, p.critic1, x, np.array([0.0, 2 * (q - y)]))
    assert np.allclose(g1, chain, rtol=1e-10, atol=1e-14)


def test_actor_no_signal_with_constant_critic():
    for spec in (AgentSpec(2, True, n_actions=3, hidden=(4,)), AgentSpec(2, False, action_dim=2, hidden=(4,))):
        p = init_agent(spec, np.random.default_rng(0), init_alpha=1.0)
        p.log_alpha = -np.inf
        p.critics[:] = 0.0
        p.critics[:, -1] = 1.5  # output bias
        if spec.discrete:
            p.critics[:, -spec.n_actions:] = 1.5
            batch = discrete_batch([0, 1], [0, 1], [0, 0], [0, 1], [0, 0])
        else:
            batch = Batch(np.ones((2, 2)), np.zeros((2, 2)), np.zeros(2), np.ones((2, 2)),
                          np.zeros(2), np.zeros(2, int))
        loss, g = actor_loss_and_grad(spec, batch, p, SacConfig(), np.random.default_rng(1))
        assert loss == pytest.approx(-1.5) and np.abs(g).max() < 1e-12


def test_actor_step_moves_toward_better_action():
    spec = linear_discrete(1, 2)
    p = AgentParams(np.zeros(4), [0, 0, 10.0, 0.0], [0, 0, 10.0, 0.0], np.zeros(4), np.zeros(4),
                    np.log(1e-3))
    batch = discrete_batch([0], [0], [0.0], [0], [0])
    _, g = actor_loss_and_grad(spec, batch, p, SacConfig())
    logits = -0.1 * g[2:]
    assert logits[0] > logits[1]


def test_temperature_examples():
    spec = linear_discrete(1, 4)
    p = init_agent(spec, np.random.default_rng(0))
    p.actor[:] = 0.0  # uniform: entropy = ln 4
    batch = discrete_batch([0], [0], [0.0], [0], [0])
    loss, g = temperature_loss_and_grad(spec, batch, p, SacConfig(target_entropy=np.log(4)))
    assert abs(loss) < 1e-12 and abs(g) < 1e-12
    _, g = temperature_loss_and_grad(spec, batch, p, SacConfig(target_entropy=np.log(4) + 0.2))
    assert g < 0
    # log pi fixed at -2, target entropy -1, alpha 1: L = -(1)(-2 + (-1)) = 3
    loss, g = temperature_loss_and_grad(spec, batch, p, SacConfig(target_entropy=-1.0),
                                        log_probs=np.array([-2.0]))
    assert loss == pytest.approx(3.0) and g == pytest.approx(3.0)


def test_soft_update_examples():
    t, o = np.array([0.0, 2.0]), np.array([1.0, -1.0])
    assert np.array_equal(soft_update(t, o, 1.0), o)
    assert np.array_equal(soft_update(t, o, 0.0), t)
    assert soft_update(np.zeros(1), np.ones(1), 0.005)[0] == pytest.approx(0.005)
    with pytest.raises(InvalidArgumentError):
        soft_update(t, o[:1], 0.5)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10**6), rho=st.floats(0.0, 1.0))
def test_soft_update_contracts(seed, rho):
    rng = np.random.default_rng(seed)
    t, o = rng.normal(size=6), rng.normal(size=6)
    new = soft_update(t, o, rho)
    assert np.allclose(np.abs(new - o), (1 - rho) * np.abs(t - o), atol=1e-12)


def test_mean_q_examples():
    spec = linear_discrete(1, 2)
    z = np.zeros(4)
    batch = discrete_batch([0], [1], [0.0], [0], [0])
    assert mean_q(spec, batch, AgentParams(z, z, z, z, z)) == 0.0
    p = AgentParams(z, [0, 0, 1.0, 4.0], [0, 0, 1.0, 3.0], z, z)
    assert mean_q(spec, batch, p) == 3.0
    assert q_values(spec, p.critic1, [0], [1])[0] == 4.0


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10**6), discrete=st.booleans())
def test_cdq_backup_never_exceeds_single_critic(seed, discrete):
    rng = np.random.default_rng(seed)
    spec = (AgentSpec(3, True, n_actions=3, hidden=(4,)) if discrete
            else AgentSpec(2, False, action_dim=1, hidden=(4,)))
    p = init_agent(spec, rng)
    p.targets += rng.normal(0, 0.3, p.targets.shape)
    s = rng.integers(3, size=8) if discrete else rng.normal(size=(8, 2))
    on = backup_values(spec, p, SacConfig(use_cdq=True), s, np.random.default_rng(1))
    off = backup_values(spec, p, SacConfig(use_cdq=False), s, np.random.default_rng(1))
    assert np.all(on <= off + 1e-12)


def test_near_greedy_backup_equals_max_backup():
    # tabular max-backup comparison: a sharply greedy actor reproduces max_a Q'(s', a)
    spec = linear_discrete(3, 3)
    rng = np.random.default_rng(0)
    qt = rng.normal(size=(3, 3))
    t1 = np.concatenate([qt.ravel(), np.zeros(3)])
    actor = np.concatenate([200.0 * qt.ravel(), np.zeros(3)])
    p = AgentParams(actor, np.zeros(12), np.zeros(12), t1, t1, 0.0)
    v = backup_values(spec, p, SacConfig(use_entropy_backup=False), np.arange(3), None)
    assert np.allclose(v, qt.max(axis=1), atol=1e-6)


def test_sac_update_is_pure_and_moves_targets():
    spec = AgentSpec(3, True, n_actions=2, hidden=(4,))
    p = init_agent(spec, np.random.default_rng(0))
    before = p.checksum()
    batch = discrete_batch([0, 1, 2], [0, 1, 0], [1.0, 0.0, 0.5], [1, 2, 0], [0, 0, 1])
    opt = Optimizers.adam(spec, 1e-2)
    new, opt2, stats = sac_update(spec, p, opt, batch, SacConfig(), np.random.default_rng(0))
    assert p.checksum() == before and opt.critics.step_count == 0
    assert opt2.critics.step_count == opt2.actor.step_count == opt2.log_alpha.step_count == 1
    assert np.allclose(new.targets, soft_update(p.targets, new.critics, 0.005))
    assert not np.array_equal(new.actor, p.actor) and new.log_alpha != p.log_alpha
    assert set(stats) == {"critic_loss", "actor_loss", "temperature_loss"}
