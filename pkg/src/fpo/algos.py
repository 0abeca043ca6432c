"""Update rules: FPO, Gaussian PPO and a denoising-MDP (DPPO-style) baseline.

All three share one minibatch loop: shuffle the flattened batch, normalize
advantages per minibatch, form a likelihood-ratio surrogate, add the clipped
value loss, and take one Adam step on the policy and one on the critic.
They differ only in how the per-sample ratio is computed.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tape, Tensor
from .nn import AdamState, Mlp, ParamSet, adam_step
from .policies import ActionRecord, FlowPolicy, GaussianPolicy
from .rollout import RolloutBuffer, normalize_advantages, value_loss

ALGOS = ("fpo", "ppo_gaussian", "dppo")


@dataclass(frozen=True)
class OptimCfg:
    lr: float = 3e-4
    epochs: int = 16
    n_minibatches: int = 32
    value_coef: float = 0.25
    value_clip: float = 0.0
    max_grad_norm: float = 1.0
    adv_mode: str = "zscore"
    adv_floor: float = 0.0


@dataclass(frozen=True)
class FpoCfg:
    clip_eps: float = 0.05
    n_mc: int = 8
    mc_param: str = "eps_mse"
    log_ratio_clamp: float = 20.0

    def __post_init__(self):
        if self.clip_eps <= 0:
            raise ValueError("clip_eps must be > 0")
        if self.n_mc < 1:
            raise ValueError("n_mc must be >= 1")


@dataclass(frozen=True)
class PpoCfg:
    clip_eps: float = 0.1
    entropy_coef: float = 0.01
    log_ratio_clamp: float = 20.0


@dataclass(frozen=True)
class DppoCfg:
    clip_eps: float = 0.2
    churn_std: float = 0.05
    n_steps: int = 10
    log_ratio_clamp: float = 20.0

    def __post_init__(self):
        if self.churn_std <= 0:
            raise ValueError("denoising-MDP training needs churn_std > 0")


@dataclass
class UpdateStats:
    surrogate: float = 0.0
    value_loss: float = 0.0
    clip_frac: float = 0.0
    ratio_mean: float = 1.0
    approx_kl: float = 0.0
    grad_norm: float = 0.0
    n_steps: int = 0
    aborted: str | None = None

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class Learner:
    """Policy + critic parameters and their optimizers."""

    policy: FlowPolicy | GaussianPolicy
    pi_params: ParamSet
    value_mlp: Mlp
    v_params: ParamSet
    pi_opt: AdamState
    v_opt: AdamState

    @classmethod
    def create(cls, policy, value_hidden: tuple[int, ...], rng: np.random.Generator,
               lr: float = 3e-4, activation: str = "tanh") -> "Learner":
        pi = policy.init_params(rng)
        vmlp = Mlp((policy.obs_dim, *value_hidden, 1), activation)
        vp = vmlp.init(rng, final_gain=1.0)
        return cls(policy, pi, vmlp, vp, AdamState(pi.size, lr=lr), AdamState(vp.size, lr=lr))

    def values(self, obs: np.ndarray) -> np.ndarray:
        return self.value_mlp.apply(self.v_params.vector, obs)[:, 0]


def fpo_ratio(loss_new_mean, loss_old_mean, clamp: float = 20.0):
    """``exp(L_old - L_new)`` with the log-ratio clamped to +-clamp before exponentiating."""
    if isinstance(loss_new_mean, Tensor):
        return ad.exp(ad.clip(loss_old_mean - loss_new_mean, -clamp, clamp))
    new, old = np.asarray(loss_new_mean, float), np.asarray(loss_old_mean, float)
    if not (np.isfinite(new).all() and np.isfinite(old).all()):
        raise NonFiniteError("non-finite CFM loss")
    return np.exp(np.clip(old - new, -clamp, clamp))


def clipped_surrogate(ratio, adv, clip_eps: float):
    """Elementwise ``min(r*A, clip(r, 1-eps, 1+eps)*A)``."""
    if clip_eps <= 0:
        raise ValueError("clip_eps must be > 0")
    if isinstance(ratio, Tensor):
        return ad.minimum(ratio * adv, ad.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * adv)
    ratio = np.asarray(ratio, float)
    return np.minimum(ratio * adv, np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * adv)


def _clip_grad(g: np.ndarray, max_norm: float) -> tuple[np.ndarray, float]:
    norm = float(np.sqrt((g * g).sum()))
    if max_norm > 0 and norm > max_norm:
        g = g * (max_norm / norm)
    return g, norm


# log-ratio builder: (theta, obs, record) -> (log_ratio Tensor, extra loss Tensor or None)
RatioFn = Callable[[Tensor, np.ndarray, ActionRecord], tuple[Tensor, Tensor | None]]


@dataclass
class MinibatchLoss:
    total: Tensor
    surrogate: Tensor
    value_loss: Tensor
    log_ratio: Tensor
    ratio: Tensor


def minibatch_objective(learner: Learner, theta: Tensor, phi: Tensor, obs: np.ndarray,
                        rec: ActionRecord, adv: np.ndarray, returns: np.ndarray,
                        old_values: np.ndarray, ratio_fn: RatioFn, clip_eps: float,
                        clamp: float, optim: OptimCfg) -> MinibatchLoss:
    """Loss minimized on one minibatch: ``-mean(clipped surrogate) + value loss (+ extra)``.

    ``adv`` is used as given (normalize before calling).
    """
    log_ratio, extra = ratio_fn(theta, obs, rec)
    ratio = ad.exp(ad.clip(log_ratio, -clamp, clamp))
    surr = clipped_surrogate(ratio, adv, clip_eps).mean()
    v_pred = learner.value_mlp.forward(phi, obs).reshape(-1)
    vloss = value_loss(v_pred, returns, old_values, optim.value_clip, optim.value_coef)
    total = -surr + vloss
    if extra is not None:
        total = total + extra
    return MinibatchLoss(total, surr, vloss, log_ratio, ratio)


def _ppo_loop(buffer: RolloutBuffer, learner: Learner, optim: OptimCfg, clip_eps: float,
              clamp: float, ratio_fn: RatioFn, rng: np.random.Generator) -> UpdateStats:
    if buffer.advantages is None:
        raise ValueError("compute advantages before updating")
    obs = buffer.flat("obs")
    adv_all = buffer.advantages.ravel()
    ret_all = buffer.returns.ravel()
    oldv_all = buffer.values.ravel()
    n = len(adv_all)
    mb = max(1, n // optim.n_minibatches)
    n_mb = max(1, n // mb) if optim.n_minibatches > 0 else 0
    sums = dict(surrogate=0.0, value_loss=0.0, clip_frac=0.0, ratio_mean=0.0,
                approx_kl=0.0, grad_norm=0.0)
    count = 0
    stats = UpdateStats()
    for epoch in range(optim.epochs):
        perm = rng.permutation(n)
        try:
            for k in range(n_mb):
                idx = perm[k * mb:(k + 1) * mb]
                adv = normalize_advantages(adv_all[idx], optim.adv_mode, optim.adv_floor)
                with Tape() as tape:
                    theta = learner.pi_params.leaf()
                    phi = learner.v_params.leaf()
                    mbl = minibatch_objective(learner, theta, phi, obs[idx],
                                              buffer.records.take(idx), adv, ret_all[idx],
                                              oldv_all[idx], ratio_fn, clip_eps, clamp, optim)
                g_pi, g_v = tape.gradient(mbl.total, [theta, phi])
                g_pi, norm = _clip_grad(g_pi, optim.max_grad_norm)
                g_v, _ = _clip_grad(g_v, optim.max_grad_norm)
                learner.pi_params = adam_step(learner.pi_params, g_pi, learner.pi_opt)
                learner.v_params = adam_step(learner.v_params, g_v, learner.v_opt)
                r = mbl.ratio.data
                lr_ = np.clip(mbl.log_ratio.data, -clamp, clamp)
                sums["surrogate"] += mbl.surrogate.item()
                sums["value_loss"] += mbl.value_loss.item()
                sums["clip_frac"] += float(np.mean(np.abs(r - 1.0) > clip_eps))
                sums["ratio_mean"] += float(r.mean())
                sums["approx_kl"] += float(np.mean((r - 1.0) - lr_))
                sums["grad_norm"] += norm
                count += 1
        except NonFiniteError as exc:
            stats.aborted = f"epoch {epoch}: {exc}"
            break
    if count:
        for key, val in sums.items():
            setattr(stats, key, val / count)
    stats.n_steps = count
    return stats


def fpo_ratio_fn(policy: FlowPolicy) -> RatioFn:
    """log r = mean stored loss - mean current loss, per action."""
    def ratio_fn(theta, obs, rec):
        return rec.loss_old.mean(axis=1) - policy.loss_current(theta, obs, rec), None
    return ratio_fn


def fpo_update(buffer: RolloutBuffer, learner: Learner, cfg: FpoCfg, optim: OptimCfg,
               rng: np.random.Generator) -> UpdateStats:
    """Clipped surrogate on ``exp(mean stored loss - mean current loss)`` per action."""
    policy: FlowPolicy = learner.policy
    if buffer.records.loss_old is None:
        raise ValueError("buffer actions carry no MC pairs")

    return _ppo_loop(buffer, learner, optim, cfg.clip_eps, cfg.log_ratio_clamp,
                     fpo_ratio_fn(policy), rng)


def ppo_gaussian_update(buffer: RolloutBuffer, learner: Learner, cfg: PpoCfg, optim: OptimCfg,
                        rng: np.random.Generator) -> UpdateStats:
    """Standard PPO-clip with exact Gaussian likelihood ratios and an entropy bonus."""
    policy: GaussianPolicy = learner.policy

    def ratio_fn(theta, obs, rec):
        extra = policy.entropy(theta) * -cfg.entropy_coef if cfg.entropy_coef else None
        return policy.logp(theta, obs, rec.actions) - rec.logp_old, extra

    return _ppo_loop(buffer, learner, optim, cfg.clip_eps, cfg.log_ratio_clamp, ratio_fn, rng)


def dppo_ratio_fn(policy: FlowPolicy, churn_std: float) -> RatioFn:
    """log r = current minus stored log-density of the recorded denoising chain."""
    def ratio_fn(theta, obs, rec):
        return policy.path_logp(theta, obs, rec, churn_std) - rec.logp_old, None
    return ratio_fn


def dppo_update(buffer: RolloutBuffer, learner: Learner, cfg: DppoCfg, optim: OptimCfg,
                rng: np.random.Generator) -> UpdateStats:
    """PPO-clip on the likelihood ratio of the whole stored denoising chain.

    The environment-step advantage is shared by every denoising sub-action, so
    the per-action ratio is the product of per-step ratios.
    """
    policy: FlowPolicy = learner.policy
    if buffer.records.path_states is None or buffer.records.logp_old is None:
        raise ValueError("buffer actions carry no denoising path")

    return _ppo_loop(buffer, learner, optim, cfg.clip_eps, cfg.log_ratio_clamp,
                     dppo_ratio_fn(policy, cfg.churn_std), rng)
