import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fpo.envs import (GridWorld, Pendulum, PointMass2, VecEnv, gridworld_saddle_state,
                      gridworld_step, make_env, pendulum_step, pointmass_step, wrap_angle)


def test_gridworld_goal_entry():
    s, r, done = gridworld_step(np.array([12.5, 23.5, 0.0]), np.array([0.0, 1.0]))
    assert r == 1.0 and done
    s, r, done = gridworld_step(np.array([12.5, 1.5, 0.0]), np.array([0.0, -1.0]))
    assert r == 1.0 and done


def test_gridworld_plain_move_and_timeout():
    s, r, done = gridworld_step(np.array([3.5, 3.5, 0.0]), np.array([0.5, 0.0]))
    assert r == 0.0 and not done
    np.testing.assert_allclose(s, [4.0, 3.5, 1.0])
    s, r, done = gridworld_step(np.array([3.5, 3.5, 199.0]), np.array([0.5, 0.0]))
    assert r == -1.0 and done


def test_gridworld_action_norm_and_bounds():
    s, _, _ = gridworld_step(np.array([0.2, 5.5, 0.0]), np.array([-30.0, 40.0]))
    np.testing.assert_allclose(s[:2], [0.0, 6.3])  # unit step (-0.6, 0.8), x clipped at 0


def test_gridworld_saddle_equidistant():
    env = GridWorld()
    s = gridworld_saddle_state()
    np.testing.assert_array_equal(s, env.probe_states[0])
    assert not env.in_goal(s)
    # distance to the nearest goal cell edge, above and below
    assert (env.goal_rows[1] - s[1]) == pytest.approx(s[1] - (env.goal_rows[0] + 1))


def test_gridworld_goal_modes():
    env = GridWorld()
    np.testing.assert_array_equal(env.goal_mode(np.array([[12.5, 24.5], [12.5, 0.5], [3, 3]])), [1, -1, 0])


def test_pointmass_goal_and_cost():
    s, r, done = pointmass_step(np.array([0.0, 0.65, 0.0, 0.0, 0.0]), np.zeros(2))
    assert done and r == pytest.approx(1.0)
    s, r, done = pointmass_step(np.array([0.5, 0.0, 0.0, 0.0, 0.0]), np.array([1.0, 1.0]))
    assert not done and r == pytest.approx(-0.002)


def test_pointmass_time_limit_truncates():
    env = PointMass2()
    res = env.step(np.array([[0.5, 0.0, 0.0, 0.0, 99.0]]), np.zeros((1, 2)))
    assert res.truncated[0] and not res.terminated[0]


def test_pendulum_rewards():
    _, r, _ = pendulum_step(np.array([0.0, 0.0, 0.0]), np.zeros(1))
    assert r == 0.0
    _, r, _ = pendulum_step(np.array([np.pi, 0.0, 0.0]), np.zeros(1))
    assert r == pytest.approx(-np.pi ** 2) and r == pytest.approx(-9.87, abs=5e-3)


@pytest.mark.parametrize("theta0", [0.5, 1.5, 2.5, 3.0])
def test_pendulum_energy_conserved_without_torque(theta0):
    env = Pendulum()
    s = np.array([[theta0, 0.0, 0.0]])
    e0 = env.energy(s)[0]
    drift = 0.0
    for _ in range(100):
        s = env.step(s, np.zeros((1, 1)), speed_limit=False).state
        drift = max(drift, abs(env.energy(s)[0] - e0) / e0)
    assert drift < 0.01


def test_wrap_angle_range():
    th = np.linspace(-20, 20, 1001)
    w = wrap_angle(th)
    assert (w > -np.pi - 1e-12).all() and (w <= np.pi + 1e-12).all()
    np.testing.assert_allclose(np.cos(w), np.cos(th), atol=1e-12)


@pytest.mark.parametrize("name", ["gridworld", "pointmass2", "pendulum"])
def test_identical_batch_rows_give_identical_transitions(name):
    env = make_env(name)
    s = np.repeat(env.reset_one(np.random.default_rng(0))[None], 4, axis=0)
    a = np.repeat(np.array([[0.3] * env.spec.act_dim]), 4, axis=0)
    res = env.step(s, a)
    assert (res.state == res.state[0]).all() and (res.reward == res.reward[0]).all()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(2, 6))
def test_vecenv_rows_independent_of_batch_size(seed, n):
    env = GridWorld()
    ss = np.random.SeedSequence(seed)
    big = VecEnv.from_seed(env, n, ss)
    small = VecEnv(env, [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)][:1])
    np.testing.assert_array_equal(big.state[0], small.state[0])
    for _ in range(5):
        a = np.ones((n, 2))
        big.step(a)
        small.step(a[:1])
    np.testing.assert_array_equal(big.state[0], small.state[0])


def test_vecenv_auto_reset_reports_final_obs():
    env = GridWorld()
    v = VecEnv.from_seed(env, 2, 0)
    v.set_state(np.array([[12.5, 23.5, 0.0], [3.5, 3.5, 0.0]]))
    out = v.step(np.array([[0.0, 1.0], [0.0, 0.0]]))
    assert out.terminated[0] and out.success[0]
    np.testing.assert_allclose(out.final_obs[0], [12.5, 24.5])
    assert v.state[0, 2] == 0 and not env.in_goal(v.state[0, :2])
    with pytest.raises(ValueError):
        v.step(np.zeros((3, 2)))


def test_reset_never_starts_in_goal():
    rng = np.random.default_rng(0)
    for env in (GridWorld(), PointMass2()):
        for _ in range(300):
            s = env.reset_one(rng)
            assert not env.goal_mode(s[None, :2])[0]


def test_unknown_env():
    with pytest.raises(ValueError):
        make_env("cartpole")
