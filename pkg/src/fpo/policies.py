"""Flow and diagonal-Gaussian action distributions.

Both policies are frozen descriptions of an architecture; parameters travel
separately as :class:`~fpo.nn.ParamSet` values so a rollout can evaluate a
snapshot while the learner produces the next one.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .flow import (Schedule, SamplerCfg, Weighting, cfm_loss_eps, cfm_loss_u,
                   draw_cfm_samples, integrate, path_velocity, perturb)
from .nn import Mlp, ParamSet

TIME_EMBED_DIM = 8
MC_PARAMS = ("eps_mse", "u_mse")
LOG_2PI = float(np.log(2.0 * np.pi))


def time_embedding(tau) -> np.ndarray:
    """Sinusoidal features of flow time, shape ``tau.shape + (8,)``."""
    tau = np.asarray(tau, dtype=np.float64)[..., None]
    freqs = np.pi * 2.0 ** np.arange(TIME_EMBED_DIM // 2)
    return np.concatenate([np.sin(freqs * tau), np.cos(freqs * tau)], axis=-1)


@dataclass
class ActionRecord:
    """A batch of sampled actions plus whatever each algorithm needs to re-score them.

    Flow: ``mc_tau`` (B, N_mc), ``mc_eps`` (B, N_mc, d), ``loss_old`` (B, N_mc).
    Gaussian: ``logp_old`` (B,).
    Denoising path: ``path_states`` (n_steps + 1, B, d) starting at the initial noise,
    ``path_means`` (n_steps, B, d) pre-churn means under the sampling parameters.
    """

    actions: np.ndarray
    mc_tau: np.ndarray | None = None
    mc_eps: np.ndarray | None = None
    loss_old: np.ndarray | None = None
    logp_old: np.ndarray | None = None
    path_states: np.ndarray | None = None
    path_means: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.actions)

    def take(self, idx) -> "ActionRecord":
        def pick(x, axis=0):
            if x is None:
                return None
            return x[idx] if axis == 0 else x[:, idx]

        return ActionRecord(
            actions=self.actions[idx],
            mc_tau=pick(self.mc_tau),
            mc_eps=pick(self.mc_eps),
            loss_old=pick(self.loss_old),
            logp_old=pick(self.logp_old),
            path_states=pick(self.path_states, 1),
            path_means=pick(self.path_means, 1),
        )

    @staticmethod
    def stack(records: list["ActionRecord"]) -> "ActionRecord":
        def cat(name, axis=0):
            vals = [getattr(r, name) for r in records]
            return None if vals[0] is None else np.concatenate(vals, axis=axis)

        return ActionRecord(
            actions=cat("actions"), mc_tau=cat("mc_tau"), mc_eps=cat("mc_eps"),
            loss_old=cat("loss_old"), logp_old=cat("logp_old"),
            path_states=cat("path_states", 1), path_means=cat("path_means", 1),
        )


@dataclass(frozen=True)
class FlowPolicy:
    obs_dim: int
    act_dim: int
    hidden: tuple[int, ...] = (64, 64)
    activation: str = "tanh"
    schedule: Schedule = field(default_factory=Schedule)
    sampler: SamplerCfg = field(default_factory=SamplerCfg)
    n_mc: int = 8
    mc_param: str = "eps_mse"
    weighting: Weighting = field(default_factory=Weighting)

    kind = "flow"

    def __post_init__(self):
        if self.n_mc < 1:
            raise ValueError("n_mc must be >= 1")
        if self.mc_param not in MC_PARAMS:
            raise ValueError(f"mc_param must be one of {MC_PARAMS}")

    @property
    def mlp(self) -> Mlp:
        return Mlp((self.obs_dim + self.act_dim + TIME_EMBED_DIM, *self.hidden, self.act_dim),
                   self.activation)

    def init_params(self, rng: np.random.Generator) -> ParamSet:
        return self.mlp.init(rng, final_gain=0.01)

    def with_sampler(self, sampler: SamplerCfg) -> "FlowPolicy":
        return replace(self, sampler=sampler)

    def _inputs(self, obs: np.ndarray, x, tau) -> np.ndarray | Tensor:
        emb = time_embedding(tau)
        if isinstance(x, Tensor):
            return ad.concat([obs, x, emb], axis=-1)
        return np.concatenate([obs, x, emb], axis=-1)

    def velocity(self, theta: np.ndarray, obs: np.ndarray, x: np.ndarray, tau) -> np.ndarray:
        """Network output v_hat for a batch; ``tau`` scalar or per-row."""
        tau = np.broadcast_to(np.asarray(tau, dtype=np.float64), (len(x),))
        return self.mlp.apply(theta, self._inputs(obs, x, tau))

    def _field(self, theta: np.ndarray, obs: np.ndarray):
        def f(x, tau):
            return path_velocity(self.velocity(theta, obs, x, tau), x, tau, self.schedule)
        return f

    def sample(self, params: ParamSet, obs: np.ndarray, rng: np.random.Generator,
               mc_rng: np.random.Generator | None = None, sampler: SamplerCfg | None = None,
               with_mc: bool = True, record_path: bool = False) -> ActionRecord:
        """Integrate noise into actions and log the MC pairs with their current losses."""
        obs = np.asarray(obs, dtype=np.float64)
        sampler = sampler or self.sampler
        a0 = rng.standard_normal((len(obs), self.act_dim))
        theta = params.vector
        rec = ActionRecord(actions=None)
        if record_path:
            a, means, states = integrate(self._field(theta, obs), a0, sampler, rng, record=True)
            rec.path_states = np.concatenate([a0[None], states], axis=0)
            rec.path_means = means
        else:
            a = integrate(self._field(theta, obs), a0, sampler, rng)
        rec.actions = a
        if with_mc:
            tau, eps = draw_cfm_samples(mc_rng or rng, (len(obs), self.n_mc), self.act_dim,
                                        self.schedule)
            rec.mc_tau, rec.mc_eps = tau, eps
            rec.loss_old = self.pair_losses(Tensor(theta), obs, a, tau, eps).data
        return rec

    def pair_losses(self, theta: Tensor, obs: np.ndarray, actions: np.ndarray,
                    tau: np.ndarray, eps: np.ndarray) -> Tensor:
        """Per-pair CFM losses, shape (B, N_mc), at the stored (tau, eps)."""
        b, n = tau.shape
        d = self.act_dim
        a_rep = np.broadcast_to(actions[:, None, :], (b, n, d)).reshape(b * n, d)
        o_rep = np.broadcast_to(obs[:, None, :], (b, n, obs.shape[-1])).reshape(b * n, -1)
        t = tau.reshape(b * n)
        e = eps.reshape(b * n, d)
        x_tau = perturb(a_rep, e, t, self.schedule)
        v_hat = self.mlp.forward(theta, self._inputs(o_rep, x_tau, t))
        if self.mc_param == "u_mse":
            loss = cfm_loss_u(v_hat, a_rep, e)
        else:
            loss = cfm_loss_eps(v_hat, a_rep, e, t, self.schedule, self.weighting)
        return loss.reshape(b, n)

    def loss_current(self, theta: Tensor, obs: np.ndarray, rec: ActionRecord) -> Tensor:
        """Mean CFM loss over each record's stored pairs, shape (B,)."""
        if rec.mc_tau is None or rec.mc_tau.shape[1] == 0:
            raise ValueError("action record carries no MC pairs")
        return self.pair_losses(theta, obs, rec.actions, rec.mc_tau, rec.mc_eps).mean(axis=1)

    def path_logp(self, theta: Tensor, obs: np.ndarray, rec: ActionRecord,
                  churn_std: float) -> Tensor:
        """Log-density of the stored denoising chain, summed over steps, shape (B,).

        Each step is a Gaussian sub-action ``N(mu_k(theta), churn_std^2 I)`` where
        ``mu_k`` is the Euler mean from the stored pre-step state.
        """
        if rec.path_states is None:
            raise ValueError("action record carries no denoising path")
        if churn_std <= 0:
            raise ValueError("path likelihood needs churn_std > 0")
        states = rec.path_states
        k, b, d = states.shape[0] - 1, states.shape[1], states.shape[2]
        dt = 1.0 / k
        x_prev = states[:-1].reshape(k * b, d)
        x_next = states[1:].reshape(k * b, d)
        taus = np.repeat(np.arange(k) * dt, b)
        o_rep = np.broadcast_to(obs[None], (k, b, obs.shape[-1])).reshape(k * b, -1)
        v_hat = self.mlp.forward(theta, self._inputs(o_rep, x_prev, taus))
        if self.schedule.kind != "ot_linear":
            raise NotImplementedError("path likelihoods are implemented for ot_linear")
        mu = v_hat * dt + x_prev
        z = (x_next - mu) * (1.0 / churn_std)
        per_step = (z ** 2).sum(axis=-1) * -0.5 - d * (np.log(churn_std) + 0.5 * LOG_2PI)
        return per_step.reshape(k, b).sum(axis=0)


@dataclass(frozen=True)
class GaussianPolicy:
    """tanh-squashed mean MLP with a state-independent log-std (last ``act_dim`` params)."""

    obs_dim: int
    act_dim: int
    hidden: tuple[int, ...] = (64, 64)
    activation: str = "tanh"
    init_log_std: float = 0.0

    kind = "gaussian"

    @property
    def mlp(self) -> Mlp:
        return Mlp((self.obs_dim, *self.hidden, self.act_dim), self.activation)

    def init_params(self, rng: np.random.Generator) -> ParamSet:
        net = self.mlp.init(rng, final_gain=0.01)
        return ParamSet(np.concatenate([net.vector, np.full(self.act_dim, self.init_log_std)]))

    def _split(self, theta):
        n = self.mlp.n_params
        return theta[:n], theta[n:]

    def mean_std(self, params: ParamSet, obs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        net, log_std = self._split(params.vector)
        return np.tanh(self.mlp.apply(net, obs)), np.exp(log_std)

    def sample(self, params: ParamSet, obs: np.ndarray, rng: np.random.Generator,
               deterministic: bool = False) -> ActionRecord:
        mu, std = self.mean_std(params, np.asarray(obs, dtype=np.float64))
        a = mu if deterministic else mu + std * rng.standard_normal(mu.shape)
        return ActionRecord(actions=a, logp_old=gaussian_logp_np(a, mu, std))

    def logp(self, theta: Tensor, obs: np.ndarray, actions: np.ndarray) -> Tensor:
        net, log_std = self._split(theta)
        mu = ad.tanh(self.mlp.forward(net, obs))
        z = (actions - mu) / ad.exp(log_std)
        return (z ** 2 * -0.5 - log_std - 0.5 * LOG_2PI).sum(axis=-1)

    def entropy(self, theta: Tensor) -> Tensor:
        _, log_std = self._split(theta)
        return (log_std + 0.5 * (LOG_2PI + 1.0)).sum()


def gaussian_logp_np(a: np.ndarray, mu: np.ndarray, std: np.ndarray) -> np.ndarray:
    z = (a - mu) / std
    return (-0.5 * z * z - np.log(std) - 0.5 * LOG_2PI).sum(axis=-1)


# functional aliases matching the operation names used across the package
def flow_sample_action(policy: FlowPolicy, params: ParamSet, obs, rng, **kw) -> ActionRecord:
    return policy.sample(params, obs, rng, **kw)


def flow_loss_current(policy: FlowPolicy, params, obs, rec: ActionRecord) -> np.ndarray:
    theta = params if isinstance(params, Tensor) else Tensor(getattr(params, "vector", params))
    return policy.loss_current(theta, np.asarray(obs, dtype=np.float64), rec).data


def gaussian_sample_action(policy: GaussianPolicy, params: ParamSet, obs, rng) -> ActionRecord:
    return policy.sample(params, obs, rng)


def gaussian_logp(policy: GaussianPolicy, params, obs, actions) -> np.ndarray:
    theta = params if isinstance(params, Tensor) else Tensor(getattr(params, "vector", params))
    return policy.logp(theta, np.asarray(obs, dtype=np.float64), np.asarray(actions)).data
