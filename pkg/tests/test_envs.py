import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from moorl.envs import (GRID_MAPS, GridworldSpec, PointMassEnv, TabularEnv, TabularMdp,
                        TabularPolicy, VisitDist, exact_policy_return, exact_visitation,
                        grid_to_mdp, load_grid_map, make_env, parse_grid_map, policy_evaluation,
                        random_mdp, random_policy, value_iteration)
from moorl.errors import ConfigurationError, InvalidArgumentError

RIGHT = 1


def chain_mdp(length, gamma, reward_at_end=1.0):
    """Deterministic chain 0 -> 1 -> ... -> length-1 (terminal); one action."""
    T = np.zeros((length, 1, length))
    R = np.zeros((length, 1, length))
    for s in range(length - 1):
        T[s, 0, s + 1] = 1.0
    T[-1, 0, -1] = 1.0
    R[length - 2, 0, length - 1] = reward_at_end
    rho = np.eye(length)[0]
    term = np.zeros(length, bool)
    term[-1] = True
    return TabularMdp(T, R, gamma, rho, terminal=term)


def one_state(gamma, reward=1.0):
    return TabularMdp(np.ones((1, 1, 1)), np.full((1, 1, 1), reward), gamma, np.ones(1))


def test_mdp_validation():
    T = np.array([[[0.5, 0.4]]])
    with pytest.raises(InvalidArgumentError):
        TabularMdp(T, np.zeros_like(T), 0.9, np.array([1.0]))
    with pytest.raises(InvalidArgumentError):
        one_state(1.0)
    with pytest.raises(InvalidArgumentError):
        TabularMdp(np.ones((1, 1, 1)), np.zeros((1, 1, 1)), 0.9, np.array([0.5]))


def test_policy_validation():
    with pytest.raises(InvalidArgumentError):
        TabularPolicy(np.array([[0.5, 0.6]]))
    with pytest.raises(InvalidArgumentError):
        VisitDist(np.array([[0.5, 0.4]]))


def test_one_by_two_grid():
    spec = parse_grid_map("SG", slip_prob=0.0)
    mdp = grid_to_mdp(spec)
    assert mdp.n_states == 2 and mdp.n_actions == 4
    assert mdp.transition[0, RIGHT, 1] == 1.0 and mdp.terminal[1]


def test_slippery_rows_sum_to_one():
    mdp = grid_to_mdp(GridworldSpec(3, 3, goal=(2, 2), slip_prob=0.1))
    assert np.allclose(mdp.transition.sum(axis=2), 1.0, atol=1e-12)


def test_grid5_optimal_value_is_discounted_path():
    env = make_env("grid5")
    spec, mdp = env.spec, env.mdp
    L = spec.shortest_path()
    V, _, _ = value_iteration(mdp)
    start = spec.free_cells().index(spec.start)
    # reward 1 arrives on the L-th move
    assert V[start] == pytest.approx(mdp.gamma ** (L - 1), abs=1e-8)


def test_unreachable_goal():
    with pytest.raises(ConfigurationError):
        parse_grid_map("S#G")
    with pytest.raises(ConfigurationError):
        parse_grid_map("SS.")  # no goal
    with pytest.raises(ConfigurationError):
        GridworldSpec(2, 2, start=(0, 0), goal=(0, 0))


def test_value_iteration_examples():
    V, _, _ = value_iteration(one_state(0.99), tol=1e-8)
    assert V[0] == pytest.approx(100.0, abs=1e-6)
    env = make_env("grid1x2")
    mdp = grid_to_mdp(parse_grid_map("SG", gamma=0.9))
    V, Q, greedy = value_iteration(mdp)
    assert V[0] == pytest.approx(1.0) and V[1] == 0.0
    assert greedy.probs[0, RIGHT] == 1.0
    V, _, _ = value_iteration(chain_mdp(5, 0.9))
    assert V[0] == pytest.approx(0.9 ** 3)
    assert env.mdp.n_states == 2


def test_value_iteration_tie_break_lowest_index():
    mdp = TabularMdp(np.ones((1, 3, 1)), np.zeros((1, 3, 1)), 0.9, np.ones(1))
    _, _, greedy = value_iteration(mdp)
    assert greedy.probs[0].tolist() == [1.0, 0.0, 0.0]


def test_visitation_examples():
    d = exact_visitation(one_state(0.5), TabularPolicy.uniform(1, 1))
    assert d.d.tolist() == [[1.0]]
    d = exact_visitation(chain_mdp(2, 0.5), TabularPolicy.uniform(2, 1))
    assert np.allclose(d.d[:, 0], [0.5, 0.5])


def test_policy_return_examples():
    assert exact_policy_return(one_state(0.99), TabularPolicy.uniform(1, 1)) == pytest.approx(100.0)
    env = make_env("grid5")
    V, _, greedy = value_iteration(env.mdp)
    assert exact_policy_return(env.mdp, greedy) == pytest.approx(env.mdp.rho @ V, abs=1e-6)


def test_uniform_return_on_one_by_two_grid():
    # from S: 1/4 "right" reaches G with reward 1; otherwise stay at S.
    # V = 0.25 * 1 + 0.75 * 0.9 * V  ->  V = 0.25 / (1 - 0.675)
    mdp = grid_to_mdp(parse_grid_map("SG", gamma=0.9))
    assert exact_policy_return(mdp, TabularPolicy.uniform(2, 4)) == pytest.approx(0.25 / 0.325, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6), S=st.integers(1, 8), A=st.integers(1, 4))
def test_visitation_is_a_distribution(seed, S, A):
    rng = np.random.default_rng(seed)
    mdp = random_mdp(S, A, rng)
    d = exact_visitation(mdp, random_policy(S, A, rng))
    assert abs(d.d.sum() - 1.0) <= 1e-9 and d.d.min() >= 0.0


def test_vi_greedy_beats_random_policies():
    rng = np.random.default_rng(5)
    mdp = random_mdp(6, 3, rng)
    _, _, greedy = value_iteration(mdp)
    best = exact_policy_return(mdp, greedy)
    for _ in range(100):
        assert exact_policy_return(mdp, random_policy(6, 3, rng)) <= best + 1e-9


def test_policy_evaluation_matches_bellman():
    rng = np.random.default_rng(6)
    mdp = random_mdp(5, 2, rng)
    pi = random_policy(5, 2, rng)
    V = policy_evaluation(mdp, pi)
    r = mdp.expected_reward()
    backup = (pi.probs * (r + mdp.gamma * mdp.transition @ V)).sum(axis=1)
    assert np.allclose(V, backup, atol=1e-10)


def test_grid_step_reaches_goal():
    env = make_env("grid1x2")
    nxt, r, done = env.step(env.reset(np.random.default_rng(0)), RIGHT, np.random.default_rng(0))
    assert (nxt, r, done) == (1, 1.0, True)
    with pytest.raises(InvalidArgumentError):
        env.step(0, 4, np.random.default_rng(0))
    with pytest.raises(InvalidArgumentError):
        env.step(0, 1.5, np.random.default_rng(0))


def test_tabular_step_frequencies_match_tensor():
    rng = np.random.default_rng(7)
    mdp = random_mdp(4, 2, rng)
    env = TabularEnv(mdp)
    for s in range(4):
        for a in range(2):
            counts = np.bincount([env.step(s, a, rng)[0] for _ in range(25_000)], minlength=4)
            tv = 0.5 * np.abs(counts / counts.sum() - mdp.transition[s, a]).sum()
            assert tv < 0.01


def test_pointmass_zero_action_from_rest():
    env = PointMassEnv()
    s0 = np.array([-0.5, -0.5, 0.0, 0.0])
    s1, r, done = env.step(s0, np.zeros(2))
    assert np.array_equal(s1[:2], s0[:2]) and not done
    assert r == pytest.approx(-env.spec.reward_scale * np.sqrt(2.0))


def test_pointmass_clips_and_stays_in_arena():
    env = PointMassEnv()
    rng = np.random.default_rng(0)
    s = env.reset(rng)
    for _ in range(500):
        s, r, _ = env.step(s, rng.normal(scale=5.0, size=2))
        assert np.all(np.abs(s[:2]) <= env.spec.arena) and np.all(np.abs(s[2:]) <= 1.0)
        assert abs(r) <= env.r_max
    with pytest.raises(InvalidArgumentError):
        env.step(s, np.zeros(3))


def test_pd_expert_beats_random():
    refs = PointMassEnv().reference_returns(n_episodes=20)
    assert refs["expert"] > refs["random"]


def test_map_file_roundtrip(tmp_path):
    path = tmp_path / "maze.txt"
    path.write_text(GRID_MAPS["grid5"])
    env = make_env(str(path))
    ref = make_env("grid5")
    assert env.mdp.n_states == ref.mdp.n_states
    assert np.array_equal(env.mdp.transition, ref.mdp.transition)
    assert load_grid_map(path).name == "maze"


def test_unknown_env():
    with pytest.raises(ConfigurationError):
        make_env("no-such-env")


def test_reference_returns_ordered():
    for env_id in ("grid5", "grid8"):
        refs = make_env(env_id).reference_returns()
        assert refs["expert"] > refs["random"] >= 0.0
