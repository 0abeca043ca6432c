import numpy as np
import pytest

from fpo.autodiff import Tensor
from fpo.flow import SamplerCfg, Schedule, cfm_loss_u
from fpo.nn import ParamSet
from fpo.policies import (ActionRecord, FlowPolicy, GaussianPolicy, flow_loss_current,
                          gaussian_logp, gaussian_logp_np, time_embedding)


def flow(**kw):
    return FlowPolicy(3, 2, (16, 16), **kw)


def test_zero_field_gives_noise_marginal():
    pol = flow()
    zero = ParamSet(np.zeros(pol.mlp.n_params))
    obs = np.zeros((4000, 3))
    rec = pol.sample(zero, obs, np.random.default_rng(0), with_mc=False)
    a0 = np.random.default_rng(0).standard_normal((4000, 2))
    np.testing.assert_array_equal(rec.actions, a0)
    assert abs(rec.actions.mean()) < 0.05 and abs(rec.actions.std() - 1) < 0.05


def test_sampling_is_deterministic_given_seed():
    pol = flow()
    p = pol.init_params(np.random.default_rng(1))
    obs = np.random.default_rng(2).normal(size=(5, 3))
    r1 = pol.sample(p, obs, np.random.default_rng(3))
    r2 = pol.sample(p, obs, np.random.default_rng(3))
    for name in ("actions", "mc_tau", "mc_eps", "loss_old"):
        np.testing.assert_array_equal(getattr(r1, name), getattr(r2, name))


def test_mc_pairs_shape_and_distinct():
    pol = flow(n_mc=8)
    p = pol.init_params(np.random.default_rng(0))
    rec = pol.sample(p, np.zeros((3, 3)), np.random.default_rng(0))
    assert rec.mc_tau.shape == (3, 8) and rec.mc_eps.shape == (3, 8, 2)
    assert rec.loss_old.shape == (3, 8)
    for row in rec.mc_tau:
        assert len(set(row.tolist())) == 8


@pytest.mark.parametrize("param", ["eps_mse", "u_mse"])
def test_loss_current_at_old_params_is_mean_stored_loss(param):
    pol = flow(mc_param=param)
    p = pol.init_params(np.random.default_rng(0))
    obs = np.random.default_rng(1).normal(size=(6, 3))
    rec = pol.sample(p, obs, np.random.default_rng(2))
    cur = flow_loss_current(pol, p, obs, rec)
    np.testing.assert_array_equal(cur, rec.loss_old.mean(axis=1))


def test_u_loss_hand_residual():
    # v_hat = 0, a - eps = (-1, 1) gives residual (1, -1)
    assert cfm_loss_u(np.zeros((1, 2)), np.array([[0.0, 1.0]]), np.array([[1.0, 0.0]]))[0] == 2.0


def test_loss_mean_over_pairs():
    pol = flow(mc_param="u_mse")
    zero = ParamSet(np.zeros(pol.mlp.n_params))
    rec = ActionRecord(actions=np.array([[1.0, 0.0]]), mc_tau=np.array([[0.5, 0.5]]),
                       mc_eps=np.array([[[0.0, 0.0], [1.0 - np.sqrt(3.0), 0.0]]]))
    # pair losses ||a - eps||^2 = 1 and 3
    np.testing.assert_allclose(flow_loss_current(pol, zero, np.zeros((1, 3)), rec), [2.0])


def test_record_take_and_stack_align():
    pol = flow()
    p = pol.init_params(np.random.default_rng(0))
    recs = [pol.sample(p, np.full((2, 3), float(i)), np.random.default_rng(i), record_path=True)
            for i in range(3)]
    st = ActionRecord.stack(recs)
    assert st.path_states.shape == (11, 6, 2)
    sub = st.take(np.array([4, 5]))
    np.testing.assert_array_equal(sub.actions, recs[2].actions)
    np.testing.assert_array_equal(sub.path_states, recs[2].path_states)


def test_gaussian_logp_examples():
    pol = GaussianPolicy(2, 1, (8,))
    assert gaussian_logp_np(np.zeros((1, 1)), np.zeros((1, 1)), np.ones(1))[0] == pytest.approx(-0.9189, abs=1e-4)
    assert gaussian_logp_np(np.ones((1, 1)), np.zeros((1, 1)), np.ones(1))[0] == pytest.approx(-1.4189, abs=1e-4)
    a, mu, sd = np.array([[0.3, -1.0]]), np.array([[0.1, 0.2]]), np.array([0.5, 2.0])
    both = gaussian_logp_np(a, mu, sd)[0]
    sep = sum(gaussian_logp_np(a[:, [k]], mu[:, [k]], sd[[k]])[0] for k in range(2))
    assert both == pytest.approx(sep, abs=1e-14)


def test_gaussian_logp_tensor_matches_numpy_and_entropy():
    pol = GaussianPolicy(3, 2, (8,), init_log_std=-0.3)
    p = pol.init_params(np.random.default_rng(0))
    obs = np.random.default_rng(1).normal(size=(7, 3))
    rec = pol.sample(p, obs, np.random.default_rng(2))
    np.testing.assert_allclose(gaussian_logp(pol, p, obs, rec.actions), rec.logp_old, atol=1e-12)
    unit = GaussianPolicy(3, 2, (8,))
    ent = unit.entropy(Tensor(unit.init_params(np.random.default_rng(0)).vector)).item()
    assert ent == pytest.approx(2.8379, abs=1e-4)


def test_gaussian_deterministic_is_mean():
    pol = GaussianPolicy(2, 2, (8,))
    p = pol.init_params(np.random.default_rng(0))
    obs = np.ones((3, 2))
    mu, _ = pol.mean_std(p, obs)
    np.testing.assert_array_equal(pol.sample(p, obs, np.random.default_rng(0), deterministic=True).actions, mu)


def test_path_logp_single_step_shift():
    # one 1-D step; stored state equals the old mean, new mean moves by sigma_t
    pol = FlowPolicy(1, 1, (4,), sampler=SamplerCfg("stochastic_euler", 1, 0.05))
    zero = np.zeros(pol.mlp.n_params)
    rec = ActionRecord(actions=np.array([[0.3]]),
                       path_states=np.array([[[0.3]], [[0.3]]]))
    obs = np.zeros((1, 1))
    lp_old = pol.path_logp(Tensor(zero), obs, rec, 0.05).data[0]
    shifted = zero.copy()
    (_, _, b_last) = pol.mlp.layout[-1]
    shifted[b_last] = 0.05  # v_hat = sigma_t with dt = 1
    lp_new = pol.path_logp(Tensor(shifted), obs, rec, 0.05).data[0]
    assert lp_new - lp_old == pytest.approx(-0.5, abs=1e-12)
    assert np.exp(lp_new - lp_old) == pytest.approx(0.6065, abs=1e-4)


def test_path_logp_matches_recorded_means():
    pol = FlowPolicy(2, 2, (8,), sampler=SamplerCfg("stochastic_euler", 5, 0.1))
    p = pol.init_params(np.random.default_rng(0))
    obs = np.random.default_rng(1).normal(size=(4, 2))
    rec = pol.sample(p, obs, np.random.default_rng(2), with_mc=False, record_path=True)
    z = (rec.path_states[1:] - rec.path_means) / 0.1
    ref = (-0.5 * z ** 2 - np.log(0.1) - 0.5 * np.log(2 * np.pi)).sum(axis=(0, 2))
    np.testing.assert_allclose(pol.path_logp(Tensor(p.vector), obs, rec, 0.1).data, ref, atol=1e-10)


def test_time_embedding_shape_and_range():
    e = time_embedding(np.linspace(0, 1, 5))
    assert e.shape == (5, 8) and np.abs(e).max() <= 1.0


def test_vp_policy_samples_finite():
    pol = flow(schedule=Schedule("vp_cosine"))
    p = pol.init_params(np.random.default_rng(0))
    rec = pol.sample(p, np.zeros((5, 3)), np.random.default_rng(0))
    assert np.isfinite(rec.actions).all() and np.isfinite(rec.loss_old).all()
