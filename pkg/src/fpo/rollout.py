"""Experience storage, GAE, running normalization and the clipped value loss."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .policies import ActionRecord

ADV_MODES = ("zscore", "shift_positive", "none")


@dataclass(frozen=True)
class GaeCfg:
    gamma: float = 0.995
    lam: float = 0.95
    reward_scale: float = 10.0

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0 or not 0.0 <= self.lam <= 1.0:
            raise ValueError("gamma and lambda must lie in [0, 1]")


def compute_gae(rewards, values, dones, bootstrap, cfg: GaeCfg,
                truncated=None, trunc_values=None) -> tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimation over a (T,) or (T, N) rollout.

    ``dones`` marks every episode boundary.  Where ``truncated`` is set the
    episode was cut by a time limit, so the discounted value of the cut-off
    state (``trunc_values``) is folded into that step's reward.  ``bootstrap``
    is the value of the state following the last step.  Rewards are expected
    to be already scaled.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    if not rewards.shape == values.shape == dones.shape:
        raise ValueError(f"length mismatch: rewards {rewards.shape}, values {values.shape}, "
                         f"dones {dones.shape}")
    bootstrap = np.broadcast_to(np.asarray(bootstrap, dtype=np.float64), rewards.shape[1:])
    if truncated is not None:
        rewards = rewards + cfg.gamma * np.asarray(truncated, dtype=np.float64) * trunc_values
    t_len = len(rewards)
    adv = np.zeros_like(rewards)
    last = np.zeros(rewards.shape[1:])
    for t in reversed(range(t_len)):
        nonterminal = 1.0 - dones[t]
        next_v = bootstrap if t == t_len - 1 else values[t + 1]
        delta = rewards[t] + cfg.gamma * next_v * nonterminal - values[t]
        last = delta + cfg.gamma * cfg.lam * nonterminal * last
        adv[t] = last
    if not np.isfinite(adv).all():
        raise FloatingPointError("non-finite advantages")
    return adv, adv + values


def normalize_advantages(adv, mode: str = "zscore", floor: float = 0.0) -> np.ndarray:
    adv = np.asarray(adv, dtype=np.float64)
    if adv.size == 0:
        raise ValueError("empty advantage batch")
    if mode == "zscore":
        return (adv - adv.mean()) / max(adv.std(), 1e-8)
    if mode == "shift_positive":
        if floor < 0:
            raise ValueError("shift floor must be >= 0")
        return adv - adv.min() + floor
    if mode == "none":
        return adv
    raise ValueError(f"unknown advantage mode {mode!r}; expected one of {ADV_MODES}")


@dataclass
class RunningNorm:
    """Welford/Chan running mean and (population) variance per feature."""

    dim: int
    count: float = 0.0
    mean: np.ndarray = None
    var: np.ndarray = None

    def __post_init__(self):
        if self.mean is None:
            self.mean = np.zeros(self.dim)
        if self.var is None:
            self.var = np.ones(self.dim)

    def copy(self) -> "RunningNorm":
        return RunningNorm(self.dim, self.count, self.mean.copy(), self.var.copy())


def update_running_norm(norm: RunningNorm, batch) -> RunningNorm:
    batch = np.asarray(batch, dtype=np.float64).reshape(-1, norm.dim)
    n = len(batch)
    if n == 0:
        return norm.copy()
    b_mean, b_var = batch.mean(axis=0), batch.var(axis=0)
    if norm.count == 0:
        return RunningNorm(norm.dim, float(n), b_mean, b_var)
    total = norm.count + n
    delta = b_mean - norm.mean
    mean = norm.mean + delta * n / total
    m2 = norm.var * norm.count + b_var * n + delta ** 2 * norm.count * n / total
    return RunningNorm(norm.dim, total, mean, np.maximum(m2 / total, 0.0))


def normalize(norm: RunningNorm, obs) -> np.ndarray:
    return np.clip((np.asarray(obs) - norm.mean) / np.sqrt(norm.var + 1e-8), -10.0, 10.0)


def value_loss(pred, returns, old_values, clip_coef: float, coef: float = 0.25):
    """``coef * mean(max((v - R)^2, (v_old + clip(v - v_old) - R)^2))``; clip_coef 0 disables clipping."""
    unclipped = (pred - returns) ** 2
    if clip_coef <= 0:
        return unclipped.mean() * coef
    if isinstance(pred, Tensor):
        v_clip = ad.clip(pred - old_values, -clip_coef, clip_coef) + old_values
        return ad.maximum(unclipped, (v_clip - returns) ** 2).mean() * coef
    v_clip = old_values + np.clip(pred - old_values, -clip_coef, clip_coef)
    return np.maximum(unclipped, (v_clip - returns) ** 2).mean() * coef


@dataclass
class RolloutBuffer:
    """One batch of experience, stored time-major as (T, N, ...) arrays.

    ``records`` is the per-step action records concatenated along the flattened
    (T*N) axis, so ``records.take(i)`` lines up with ``flat(obs)[i]``.
    """

    obs: np.ndarray
    records: ActionRecord
    rewards: np.ndarray
    dones: np.ndarray
    values: np.ndarray
    truncated: np.ndarray
    trunc_values: np.ndarray
    bootstrap: np.ndarray
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None
    extras: dict = field(default_factory=dict)

    @property
    def n_steps(self) -> int:
        return self.rewards.size

    def compute_advantages(self, cfg: GaeCfg) -> None:
        self.advantages, self.returns = compute_gae(
            self.rewards, self.values, self.dones, self.bootstrap, cfg,
            truncated=self.truncated, trunc_values=self.trunc_values)

    def flat(self, name: str) -> np.ndarray:
        arr = getattr(self, name)
        return arr.reshape(self.n_steps, *arr.shape[2:])

    def dump(self, path) -> None:
        """One JSON object per transition, for offline inspection."""
        obs = self.flat("obs")
        acts = self.records.actions
        rew, done = self.rewards.ravel(), self.dones.ravel()
        val = self.values.ravel()
        adv = None if self.advantages is None else self.advantages.ravel()
        ret = None if self.returns is None else self.returns.ravel()
        t_len, n_env = self.rewards.shape
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            for i in range(self.n_steps):
                row = {"t": i // n_env, "env": i % n_env, "obs": obs[i].tolist(),
                       "action": acts[i].tolist(), "reward": float(rew[i]),
                       "done": bool(done[i]), "value": float(val[i])}
                if adv is not None:
                    row["advantage"] = float(adv[i])
                    row["return"] = float(ret[i])
                fh.write(json.dumps(row) + "\n")
