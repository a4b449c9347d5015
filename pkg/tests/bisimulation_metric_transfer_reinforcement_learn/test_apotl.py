import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from edgemeta.apotl import (ApotlConfig, Codebook, ExpertProfile, action_probabilities, bisim_fixed_point,
                            expert_weights, tabulate, train_apotl, up_bound_single, up_bound_vector,
                            up_bound_weighted)
from edgemeta.ddqn import DDQNTrainer, TrainConfig, make_episodes
from edgemeta.net import ReplayBuffer, SchedNet
from conftest import request, tiny_env


def random_mdp(rng, S, A, support=2):
    R = rng.uniform(0, 0.2, (S, A))
    P = np.zeros((S, A, S))
    for s in range(S):
        for a in range(A):
            idx = rng.choice(S, size=min(support, S), replace=False)
            P[s, a, idx] = rng.random(idx.size) + 0.05
    return R, P / P.sum(axis=2, keepdims=True)


def value_iteration(R, P, gamma, tol=1e-12):
    Q = np.zeros_like(R)
    while True:
        new = R + gamma * P @ Q.max(axis=1)
        if np.max(np.abs(new - Q)) < tol:
            return new
        Q = new


# --- bisimulation table -------------------------------------------------------
def test_identical_deterministic_samples_give_zero_table():
    rng = np.random.default_rng(0)
    R = np.full((3, 2), 0.4)
    P = np.zeros((3, 2, 3))
    P[np.arange(3)[:, None], np.arange(2)[None], rng.integers(0, 3, (3, 2))] = 1
    tab = bisim_fixed_point(R, P, R, P)
    assert tab.iterations == 5
    np.testing.assert_array_equal(tab.dis, 0)


def test_self_distance_keeps_hausdorff_minmax_term():
    # the min-max half of the set distance sees other actions, so a clone is not at distance 0
    R = np.array([[0.0, 1.0]])
    P = np.ones((1, 2, 1))
    tab = bisim_fixed_point(R, P, R, P, 1.0, 0.5, iterations=1)
    assert tab.dis[0, 0, 0, 0] == pytest.approx(0.5)


def test_zero_kd_weight_is_pure_reward_difference():
    rng = np.random.default_rng(1)
    Re, Rl = rng.random((2, 3)), rng.random((4, 3))
    P_e, P_l = np.full((2, 3, 2), 0.5), np.full((4, 3, 4), 0.25)
    tab = bisim_fixed_point(Re, P_e, Rl, P_l, eta_r=0.7, eta_kd=0.0)
    np.testing.assert_allclose(tab.dis, 0.7 * np.abs(Re[:, :, None, None] - Rl[None, None]))


def test_two_state_chain_matches_hand_unroll():
    # expert: 0 -> 1 -> 1, learner: 0 -> 1 -> 0, a single action
    P_e = np.array([[[0, 1]], [[0, 1]]], float)
    P_l = np.array([[[0, 1]], [[1, 0]]], float)
    tab = bisim_fixed_point([[0.0], [1.0]], P_e, [[0.5], [1.0]], P_l, 0.5, 0.5, iterations=2)
    np.testing.assert_allclose(tab.dis[:, 0, :, 0], [[0.3125, 0.625], [0.3125, 0.125]])
    np.testing.assert_allclose(tab.changes, [0.125, 0.0625])


def test_negative_weights_rejected():
    with pytest.raises(ValueError):
        bisim_fixed_point([[0.0]], [[[1.0]]], [[0.0]], [[[1.0]]], eta_r=-1)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 5), st.integers(1, 3), st.integers(0, 10_000))
def test_fixed_point_contraction(S, A, seed):
    rng = np.random.default_rng(seed)
    Re, Pe = random_mdp(rng, S, A)
    Rl, Pl = random_mdp(rng, S, A)
    tab = bisim_fixed_point(Re, Pe, Rl, Pl, 1.0, 0.9, iterations=8)
    assert all(b <= a + 1e-12 for a, b in zip(tab.changes[1:], tab.changes[2:]))
    assert not tab.diverged
    assert np.all(tab.dis >= 0)


@settings(max_examples=12, deadline=None)
@given(st.integers(2, 5), st.integers(1, 3), st.integers(0, 10_000))
def test_bound_validity_against_value_iteration(S, A, seed):
    gamma = 0.9
    rng = np.random.default_rng(seed)
    R, P = random_mdp(rng, S, A)
    Q = value_iteration(R, P, gamma)
    V = Q.max(axis=1)
    tab = bisim_fixed_point(R, P, R, P, eta_r=1.0, eta_kd=gamma, tol=1e-10)
    for s in range(S):
        best = int(np.argmax(Q[s]))
        for a in range(A):
            up = up_bound_single(tab.dis, s, best, s, a, best)
            assert up - abs(V[s] - Q[s, a]) >= -1e-6


# --- bounds -----------------------------------------------------------------
def test_up_bound_clone_and_vector():
    rng = np.random.default_rng(2)
    R, P = random_mdp(rng, 3, 2)
    assert up_bound_single(bisim_fixed_point(R, P, R, P, 1.0, 0.0).dis, 1, 0, 1, 0, 0) == 0
    tab = bisim_fixed_point(R, P, R, P, 1.0, 0.5)
    vec = up_bound_vector(tab.dis, 1, 0, 2, 1)
    assert vec.shape == (2,)
    assert vec[0] == pytest.approx(up_bound_single(tab.dis, 1, 0, 2, 0, 1))


def test_up_bound_weighted():
    assert up_bound_weighted([4.0, 0.0], [0.25, 0.75]) == pytest.approx(1.0)
    np.testing.assert_allclose(up_bound_weighted([[1.0, 2.0]], [1.0]), [1.0, 2.0])
    np.testing.assert_allclose(up_bound_weighted([[3.0, 1.0]] * 2, [0.1, 0.9]), [3.0, 1.0])
    with pytest.raises(ValueError):
        up_bound_weighted([1.0, 2.0], [0.5, 0.6])


# --- action probabilities ------------------------------------------------------
def test_action_probability_examples():
    np.testing.assert_allclose(action_probabilities([0.3, 0.3, 0.3]), [1 / 3] * 3)
    np.testing.assert_allclose(action_probabilities([0.0, np.log(3.0)]), [2 / 3, 1 / 3])
    np.testing.assert_allclose(action_probabilities([0.0, np.inf]), [1.0, 0.0])
    with pytest.raises(ValueError):
        action_probabilities([])


finite_ups = st.lists(st.floats(0, 50), min_size=1, max_size=12)


@settings(max_examples=100, deadline=None)
@given(finite_ups)
def test_probabilities_form_a_distribution(up):
    p = action_probabilities(up)
    assert abs(p.sum() - 1) <= 1e-9 and np.all(p >= 0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 20), min_size=2, max_size=8), st.integers(0, 7), st.floats(0.01, 5))
def test_probability_decreases_in_own_bound(up, i, bump):
    i %= len(up)
    before = action_probabilities(up)[i]
    up2 = list(up)
    up2[i] += bump
    assert action_probabilities(up2)[i] < before


# --- expert weights --------------------------------------------------------
def test_expert_weights():
    np.testing.assert_allclose(expert_weights([0.4]), [1.0])
    mu = expert_weights([0.0, 1.5])
    assert mu[0] / mu[1] > 1 and mu.sum() == pytest.approx(1, abs=1e-9)
    np.testing.assert_allclose(expert_weights([1.0, 3.0], eps=0.0), [0.75, 0.25])
    with pytest.raises(ValueError):
        expert_weights([])


# --- abstraction -----------------------------------------------------------
def test_codebook_and_tabulate():
    X = np.array([[0.0, 0], [0.1, 0], [5, 5], [5.1, 5]])
    cb = Codebook.fit(X, 2, seed=0)
    cells = cb.cells(X)
    assert cb.size == 2 and cells[0] == cells[1] != cells[2] == cells[3]
    assert Codebook.fit(X[:1], 5).size == 1
    c = np.array([0, 0, 1])
    R, P, N = tabulate(c, np.array([0, 0, 1]), np.array([1.0, 3.0, -1.0]), np.array([1, 0, 1]), 2, 2)
    assert R[0, 0] == 2.0 and R[1, 1] == -1.0 and N[0, 0] == 2
    np.testing.assert_allclose(P[0, 0], [0.5, 0.5])
    np.testing.assert_allclose(P[1, 0], [1 / 3, 2 / 3])     # unseen pair: pooled successor histogram
    assert R[1, 0] == pytest.approx(1.0)
    R2, P2, _ = tabulate(c, np.array([0, 0, 1]), np.array([1.0, 3.0, -1.0]), np.array([1, 0, 1]), 2, 2,
                         prior=(np.full((2, 2), 9.0), np.full((2, 2, 2), 0.5)))
    assert R2[1, 0] == 9.0 and R2[0, 0] == 2.0


# --- training loop --------------------------------------------------------------
def setup_training(seed=0):
    env = tiny_env(kappa=0.2)
    rng = np.random.default_rng(seed)
    reqs = [request(env, rng.uniform([0.5, 1, 0], [3, 20, 1.5]), latency=rng.uniform(1.5, 3),
                    pos=rng.uniform(0, 4, 2), rid=i) for i in range(48)]
    lay = env.feature_layout()
    net = SchedNet(env.resources.names, env.services.names, lay["resource_group"], lay["net_block"],
                   env.n_actions, hidden=16, seed=seed)
    eps = make_episodes(reqs, 8, 2, (0.3, 0.7), np.random.default_rng(5))
    return env, net, reqs, eps


def expert_profile(env, net, reqs, eps):
    cfg = TrainConfig(max_episodes=10, batch_size=16, warmup=16, require_threshold=False)
    replay = ReplayBuffer(cfg.replay_capacity, seed=0)
    res = DDQNTrainer(env, net.copy(), cfg, seed=0, replay=replay).train(reqs, eps)
    return ExpertProfile.from_replay(replay, res.net, "rt", size=50, seed=0)


def test_expert_profile_subsample_and_errors():
    env, net, reqs, eps = setup_training()
    prof = expert_profile(env, net, reqs, eps)
    assert prof.size == 50 and prof.best_actions.shape == (50,)
    with pytest.raises(ValueError):
        ExpertProfile.from_replay(ReplayBuffer(10), net, "rt")


def test_train_apotl_deterministic_and_requires_head():
    env, net, reqs, eps = setup_training()
    prof = expert_profile(env, net, reqs, eps)
    cfg = TrainConfig(max_episodes=12, batch_size=16, warmup=16, require_threshold=False)
    small = ApotlConfig(refresh_every=5, n_cells=4)
    a = train_apotl(env, net.copy(), [prof], "rt", reqs, eps, cfg, small, seed=3)
    b = train_apotl(env, net.copy(), [prof], "rt", reqs, eps, cfg, small, seed=3)
    assert [r["reward"] for r in a.trace] == [r["reward"] for r in b.trace]
    assert a.extra["experts"] == ["rt"]
    with pytest.raises(ValueError):
        train_apotl(env, net, [prof], "iov", reqs, eps, cfg)


def test_zero_beta_is_plain_ddqn():
    env, net, reqs, eps = setup_training()
    prof = expert_profile(env, net, reqs, eps)
    cfg = TrainConfig(max_episodes=8, batch_size=16, warmup=16, require_threshold=False)
    guided = train_apotl(env, net.copy(), [prof], "rt", reqs, eps, cfg,
                         ApotlConfig(beta_start=0.0, beta_end=0.0), seed=2)
    plain = DDQNTrainer(env, net.copy(), cfg, seed=2).train(reqs, eps)
    assert [r["reward"] for r in guided.trace] == [r["reward"] for r in plain.trace]
    for k in plain.net.params:
        np.testing.assert_array_equal(guided.net.params[k], plain.net.params[k])
