import numpy as np
import pytest

from fpo.algos import Learner
from fpo.autodiff import Tensor
from fpo.flow import SamplerCfg
from fpo.policies import ActionRecord, FlowPolicy, GaussianPolicy
from fpo.rollout import GaeCfg, RolloutBuffer


def make_buffer(learner: Learner, t_len=4, n_env=3, seed=0, adv=None, kind="fpo", churn=0.05):
    """Synthetic batch with records produced by the learner's current policy."""
    rng = np.random.default_rng(seed)
    pol = learner.policy
    obs = rng.normal(size=(t_len, n_env, pol.obs_dim))
    recs = []
    for t in range(t_len):
        if kind == "dppo":
            r = pol.sample(learner.pi_params, obs[t], rng, with_mc=False, record_path=True)
            r.logp_old = pol.path_logp(Tensor(learner.pi_params.vector), obs[t], r, churn).data
        else:
            r = pol.sample(learner.pi_params, obs[t], rng)
        recs.append(r)
    rewards = rng.normal(size=(t_len, n_env))
    zeros = np.zeros((t_len, n_env))
    buf = RolloutBuffer(obs, ActionRecord.stack(recs), rewards, zeros.copy(),
                        learner.values(obs.reshape(-1, pol.obs_dim)).reshape(t_len, n_env),
                        zeros.copy(), zeros.copy(), np.zeros(n_env))
    buf.compute_advantages(GaeCfg())
    if adv is not None:
        buf.advantages = np.broadcast_to(np.asarray(adv, float), (t_len, n_env)).copy()
    return buf


@pytest.fixture
def flow_learner():
    pol = FlowPolicy(3, 2, (16, 16), n_mc=4)
    return Learner.create(pol, (16,), np.random.default_rng(0))


@pytest.fixture
def gauss_learner():
    return Learner.create(GaussianPolicy(3, 2, (16, 16)), (16,), np.random.default_rng(0))


@pytest.fixture
def dppo_learner():
    pol = FlowPolicy(3, 2, (16, 16), sampler=SamplerCfg("stochastic_euler", 10, 0.05))
    return Learner.create(pol, (16,), np.random.default_rng(0))


# ---- acceptance report: one line per criterion, printed at the end of the session

ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def report(name: str, passed: bool, detail: str) -> None:
    ACCEPTANCE[name] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE, key=lambda s: int(s.split("-")[1])):
        ok, detail = ACCEPTANCE[name]
        terminalreporter.write_line(f"{name} {'PASS' if ok else 'FAIL'}: {detail}")
