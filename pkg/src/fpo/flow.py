"""Flow-matching primitives: schedules, weightings, per-sample CFM losses, samplers.

Orientation: tau=0 is pure noise and tau=1 is data, so ``x_tau = alpha*a + sigma*eps``
with ``alpha_0 = 0, sigma_0 = 1`` and ``alpha_1 = 1, sigma_1 = 0``.  The network
always regresses the conditional flow ``a - eps``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tensor

SCHEDULES = ("ot_linear", "vp_cosine")
WEIGHTINGS = ("uniform", "exp_half_neg_lambda")
SAMPLERS = ("euler", "heun", "stochastic_euler")

TAU_MIN = 1e-3


@dataclass(frozen=True)
class Schedule:
    kind: str = "ot_linear"
    tau_min: float = TAU_MIN

    def __post_init__(self):
        if self.kind not in SCHEDULES:
            raise ValueError(f"unknown schedule {self.kind!r}; expected one of {SCHEDULES}")
        if not 0.0 < self.tau_min < 0.5:
            raise ValueError("tau_min must lie in (0, 0.5)")

    def clamp(self, tau):
        return np.clip(tau, self.tau_min, 1.0 - self.tau_min)

    def alpha_sigma(self, tau):
        """(alpha, sigma, d alpha/d tau, d sigma/d tau); valid on the closed interval."""
        tau = np.asarray(tau, dtype=np.float64)
        if self.kind == "ot_linear":
            one = np.ones_like(tau)
            return tau, 1.0 - tau, one, -one
        half_pi = 0.5 * np.pi
        s, c = np.sin(half_pi * tau), np.cos(half_pi * tau)
        return s, c, half_pi * c, -half_pi * s


@dataclass(frozen=True)
class Weighting:
    kind: str = "uniform"

    def __post_init__(self):
        if self.kind not in WEIGHTINGS:
            raise ValueError(f"unknown weighting {self.kind!r}; expected one of {WEIGHTINGS}")


@dataclass(frozen=True)
class SamplerCfg:
    method: str = "euler"
    n_steps: int = 10
    churn_std: float = 0.0

    def __post_init__(self):
        if self.method not in SAMPLERS:
            raise ValueError(f"unknown sampler {self.method!r}; expected one of {SAMPLERS}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ValueError("n_steps must be a positive integer")
        if self.churn_std < 0:
            raise ValueError("churn_std must be >= 0")


def schedule_eval(schedule: Schedule, tau):
    """Return (alpha, sigma, lambda, d lambda / d tau) with lambda = log(alpha^2 / sigma^2).

    Lambda is singular at both endpoints, so ``tau`` must lie strictly inside (0, 1).
    """
    tau = np.asarray(tau, dtype=np.float64)
    if np.any(tau <= 0.0) or np.any(tau >= 1.0):
        raise ValueError("log-SNR is singular at tau in {0, 1}; clamp tau first")
    alpha, sigma, _, _ = schedule.alpha_sigma(tau)
    lam = 2.0 * (np.log(alpha) - np.log(sigma))
    if schedule.kind == "ot_linear":
        dlam = 2.0 / (tau * (1.0 - tau))
    else:
        dlam = 2.0 * np.pi / np.sin(np.pi * tau)
    return alpha, sigma, lam, dlam


def weighting_eval(weighting: Weighting, lam):
    lam = np.asarray(lam, dtype=np.float64)
    if weighting.kind == "uniform":
        return np.ones_like(lam)
    return np.exp(-0.5 * lam)


def perturb(a, eps, tau, schedule: Schedule):
    """``alpha_tau * a + sigma_tau * eps``; ``tau`` broadcasts against the leading axes."""
    a_arr = a.data if isinstance(a, Tensor) else np.asarray(a)
    e_arr = eps.data if isinstance(eps, Tensor) else np.asarray(eps)
    if a_arr.shape[-1] != e_arr.shape[-1]:
        raise ValueError(f"action dim {a_arr.shape[-1]} != noise dim {e_arr.shape[-1]}")
    alpha, sigma, _, _ = schedule.alpha_sigma(tau)
    alpha = np.asarray(alpha)[..., None]
    sigma = np.asarray(sigma)[..., None]
    if isinstance(a, Tensor) or isinstance(eps, Tensor):
        return ad.as_tensor(a) * alpha + ad.as_tensor(eps) * sigma
    return alpha * a_arr + sigma * e_arr


def _residual(v_hat, a, eps):
    if isinstance(v_hat, Tensor):
        return v_hat - (np.asarray(a) - np.asarray(eps))
    v_hat = np.asarray(v_hat, dtype=np.float64)
    if v_hat.shape != np.shape(a) or np.shape(a) != np.shape(eps):
        raise ValueError("v_hat, a and eps must share a shape")
    return v_hat - (np.asarray(a) - np.asarray(eps))


def cfm_loss_u(v_hat, a, eps):
    """Velocity-space loss ``||v_hat - (a - eps)||^2`` summed over the last axis."""
    r = _residual(v_hat, a, eps)
    if isinstance(r, Tensor):
        return (r ** 2).sum(axis=-1)
    return (r * r).sum(axis=-1)


def eps_from_velocity(v_hat, x_tau, tau, schedule: Schedule):
    """Invert the path for the noise estimate: ``(x_tau - alpha*v_hat) / (alpha + sigma)``.

    Follows from ``x_tau = alpha*a + sigma*eps`` with ``a = v_hat + eps``; for the
    linear path this is ``x_tau - tau * v_hat``.
    """
    alpha, sigma, _, _ = schedule.alpha_sigma(tau)
    alpha = np.asarray(alpha)[..., None]
    denom = alpha + np.asarray(sigma)[..., None]
    return (x_tau - v_hat * alpha) / denom


def cfm_loss_eps(v_hat, a, eps, tau, schedule: Schedule, weighting: Weighting):
    """Weighted noise-space loss ``0.5 * w(lambda) * |d lambda/d tau| * ||eps_hat - eps||^2``.

    The absolute derivative appears because lambda increases with tau in this
    orientation (tau=1 is data).
    """
    tau = np.asarray(tau, dtype=np.float64)
    lo, hi = schedule.tau_min, 1.0 - schedule.tau_min
    if np.any(tau < lo - 1e-15) or np.any(tau > hi + 1e-15):
        raise ValueError(f"tau outside the clamped range [{lo}, {hi}]")
    if np.shape(a) != np.shape(eps) or tuple(v_hat.shape) != np.shape(a):
        raise ValueError("v_hat, a and eps must share a shape")
    _, _, lam, dlam = schedule_eval(schedule, tau)
    scale = 0.5 * weighting_eval(weighting, lam) * np.abs(dlam)
    x_tau = perturb(a, eps, tau, schedule)
    eps_hat = eps_from_velocity(v_hat, x_tau, tau, schedule)
    d = eps_hat - np.asarray(eps)
    if isinstance(d, Tensor):
        return (d ** 2).sum(axis=-1) * scale
    return (d * d).sum(axis=-1) * scale


def draw_cfm_samples(rng: np.random.Generator, shape: tuple, act_dim: int,
                     schedule: Schedule) -> tuple[np.ndarray, np.ndarray]:
    """Uniform tau on the clamped interval and standard-normal eps."""
    tau = rng.uniform(schedule.tau_min, 1.0 - schedule.tau_min, size=shape)
    eps = rng.standard_normal(tuple(shape) + (act_dim,))
    return tau, eps


def path_velocity(v_hat: np.ndarray, x: np.ndarray, tau: float, schedule: Schedule) -> np.ndarray:
    """d x_tau / d tau implied by a network output, for integrating any schedule.

    Identity for ``ot_linear``; for ``vp_cosine`` recovers (a_hat, eps_hat) from
    (x, v_hat) and differentiates the trigonometric path.
    """
    if schedule.kind == "ot_linear":
        return v_hat
    alpha, sigma, d_alpha, d_sigma = schedule.alpha_sigma(tau)
    eps_hat = (x - alpha * v_hat) / (alpha + sigma)
    a_hat = v_hat + eps_hat
    return d_alpha * a_hat + d_sigma * eps_hat


VelocityField = Callable[[np.ndarray, float], np.ndarray]


def integrate(velocity_field: VelocityField, a0: np.ndarray, cfg: SamplerCfg,
              rng: np.random.Generator | None = None, record: bool = False):
    """Transport ``a0`` from tau=0 to tau=1.

    With ``record=True`` also returns the per-step deterministic means and the
    states actually reached (post-churn), each shaped ``(n_steps,) + a0.shape``.
    """
    x = np.array(a0, dtype=np.float64)
    n = int(cfg.n_steps)
    dt = 1.0 / n
    means, states = [], []
    if cfg.method == "stochastic_euler" and cfg.churn_std > 0 and rng is None:
        raise ValueError("stochastic_euler needs an rng")
    for k in range(n):
        tau = k * dt
        v = velocity_field(x, tau)
        if cfg.method == "heun":
            x_pred = x + dt * v
            v_next = velocity_field(x_pred, tau + dt)
            mean = x + 0.5 * dt * (v + v_next)
        else:
            mean = x + dt * v
        if cfg.method == "stochastic_euler" and cfg.churn_std > 0:
            x = mean + cfg.churn_std * rng.standard_normal(mean.shape)
        else:
            x = mean
        if not np.isfinite(x).all():
            raise NonFiniteError(f"non-finite sampler state at step {k}")
        if record:
            means.append(mean)
            states.append(x)
    if record:
        return x, np.stack(means), np.stack(states)
    return x
