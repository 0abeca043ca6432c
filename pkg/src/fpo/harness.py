"""Training loop, evaluation, checkpoints, the multimodality probe and sweeps."""

from __future__ import annotations

import csv
import itertools
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .algos import (DppoCfg, FpoCfg, Learner, OptimCfg, PpoCfg, UpdateStats, dppo_update,
                    fpo_update, ppo_gaussian_update)
from .autodiff import NonFiniteError, Tensor
from .ckpt import CheckpointError, read_checkpoint, write_checkpoint
from .config import ConfigError, RunConfig, save_config, with_overrides
from .envs import VecEnv, make_env
from .flow import SamplerCfg, Schedule, Weighting, integrate
from .nn import AdamState, Mlp, ParamSet
from .policies import ActionRecord, FlowPolicy, GaussianPolicy
from .rollout import GaeCfg, RolloutBuffer, RunningNorm, normalize, update_running_norm

log = logging.getLogger(__name__)

SWEEP_KEYS = {
    "fpo.clip_eps", "ppo.clip_eps", "dppo.clip_eps", "optim.lr", "flow.n_mc",
    "dppo.churn_std", "flow.mc_param",
}
CKPT_FORMAT = "fpo-policy"


@dataclass
class Streams:
    """Independent generators split from one root seed."""

    init: np.random.Generator
    env: np.random.SeedSequence
    action: np.random.Generator
    mc: np.random.Generator
    shuffle: np.random.Generator
    eval: np.random.SeedSequence

    @classmethod
    def from_seed(cls, seed: int) -> "Streams":
        init, env, action, mc, shuffle, ev = np.random.SeedSequence(seed).spawn(6)
        g = np.random.default_rng
        return cls(g(init), env, g(action), g(mc), g(shuffle), ev)


def build_policy(cfg: RunConfig, obs_dim: int, act_dim: int):
    p = cfg.policy
    if cfg.run.algo == "ppo_gaussian":
        return GaussianPolicy(obs_dim, act_dim, tuple(p.hidden), p.activation, p.init_log_std)
    sampler = SamplerCfg(cfg.sampler.method, cfg.sampler.n_steps, cfg.sampler.churn_std)
    if cfg.run.algo == "dppo":
        sampler = SamplerCfg("stochastic_euler", cfg.sampler.n_steps, cfg.dppo.churn_std)
    return FlowPolicy(
        obs_dim, act_dim, tuple(p.hidden), p.activation,
        schedule=Schedule(cfg.flow.schedule, cfg.flow.tau_min), sampler=sampler,
        n_mc=cfg.flow.n_mc, mc_param=cfg.flow.mc_param, weighting=Weighting(cfg.flow.mc_weighting))


def optim_cfg(cfg: RunConfig) -> OptimCfg:
    o = cfg.optim
    return OptimCfg(o.lr, o.epochs, o.n_minibatches, o.value_coef, o.value_clip,
                    o.max_grad_norm, o.adv_mode, o.adv_floor)


def eval_sampler(policy: FlowPolicy, override: SamplerCfg | None = None) -> SamplerCfg:
    """Deterministic version of the policy's sampler unless overridden."""
    if override is not None:
        return override
    s = policy.sampler
    method = "euler" if s.method == "stochastic_euler" else s.method
    return SamplerCfg(method, s.n_steps, 0.0)


def act(policy, params: ParamSet, obs: np.ndarray, rng: np.random.Generator,
        deterministic: bool, sampler: SamplerCfg | None = None) -> np.ndarray:
    if isinstance(policy, GaussianPolicy):
        return policy.sample(params, obs, rng, deterministic=deterministic).actions
    s = eval_sampler(policy, sampler) if deterministic else sampler
    return policy.sample(params, obs, rng, sampler=s, with_mc=False).actions


# ---------------------------------------------------------------- collection

@dataclass
class EpisodeLog:
    returns: list = field(default_factory=list)
    successes: list = field(default_factory=list)


def collect(venv: VecEnv, learner: Learner, norm: RunningNorm, cfg: RunConfig,
            streams: Streams, running_returns: np.ndarray, episodes: EpisodeLog):
    """Roll out ``cfg.run.unroll`` steps on every env; returns (buffer, raw observations)."""
    policy = learner.policy
    theta = learner.pi_params
    algo = cfg.run.algo
    t_len, n = cfg.run.unroll, venv.n
    obs_dim = venv.env.spec.obs_dim
    obs_buf = np.zeros((t_len, n, obs_dim))
    raw_buf = np.zeros((t_len, n, obs_dim))
    rew = np.zeros((t_len, n))
    done = np.zeros((t_len, n))
    trunc = np.zeros((t_len, n))
    trunc_v = np.zeros((t_len, n))
    vals = np.zeros((t_len, n))
    records = []
    for t in range(t_len):
        raw = venv.observe()
        o = normalize(norm, raw)
        if algo == "ppo_gaussian":
            rec = policy.sample(theta, o, streams.action)
        elif algo == "dppo":
            rec = policy.sample(theta, o, streams.action, with_mc=False, record_path=True)
            rec.logp_old = policy.path_logp(Tensor(theta.vector), o, rec,
                                            cfg.dppo.churn_std).data
        else:
            rec = policy.sample(theta, o, streams.action, mc_rng=streams.mc)
        records.append(rec)
        vals[t] = learner.values(o)
        step = venv.step(rec.actions)
        obs_buf[t], raw_buf[t] = o, raw
        rew[t] = step.reward * cfg.gae.reward_scale
        done[t] = step.done
        trunc[t] = step.truncated
        if step.truncated.any():
            idx = np.flatnonzero(step.truncated)
            trunc_v[t, idx] = learner.values(normalize(norm, step.final_obs[idx]))
        running_returns += step.reward
        for i in np.flatnonzero(step.done):
            episodes.returns.append(float(running_returns[i]))
            episodes.successes.append(bool(step.success[i]))
            running_returns[i] = 0.0
    bootstrap = learner.values(normalize(norm, venv.observe()))
    buf = RolloutBuffer(obs_buf, ActionRecord.stack(records), rew, done, vals, trunc,
                        trunc_v, bootstrap)
    return buf, raw_buf


def update(buffer: RolloutBuffer, learner: Learner, cfg: RunConfig,
           rng: np.random.Generator) -> UpdateStats:
    opt = optim_cfg(cfg)
    if cfg.run.algo == "fpo":
        fc = FpoCfg(cfg.fpo.clip_eps, cfg.flow.n_mc, cfg.flow.mc_param, cfg.fpo.log_ratio_clamp)
        return fpo_update(buffer, learner, fc, opt, rng)
    if cfg.run.algo == "dppo":
        dc = DppoCfg(cfg.dppo.clip_eps, cfg.dppo.churn_std, cfg.sampler.n_steps)
        return dppo_update(buffer, learner, dc, opt, rng)
    return ppo_gaussian_update(buffer, learner, PpoCfg(cfg.ppo.clip_eps, cfg.ppo.entropy_coef),
                               opt, rng)


# ---------------------------------------------------------------- evaluation

@dataclass
class EvalSummary:
    returns: np.ndarray
    successes: np.ndarray
    modes: np.ndarray
    lengths: np.ndarray
    trajectories: list | None = None

    @property
    def n(self) -> int:
        return len(self.returns)

    @property
    def mean_return(self) -> float:
        return float(self.returns.mean()) if self.n else float("nan")

    @property
    def stderr(self) -> float:
        return float(self.returns.std(ddof=1) / np.sqrt(self.n)) if self.n > 1 else 0.0

    @property
    def success_rate(self) -> float:
        return float(self.successes.mean()) if self.n else float("nan")

    def as_dict(self) -> dict:
        return {"episodes": self.n, "mean_return": self.mean_return, "stderr": self.stderr,
                "success_rate": self.success_rate}


def evaluate(policy, params: ParamSet, norm: RunningNorm, env, n_episodes: int,
             seed, sampler: SamplerCfg | None = None, starts: np.ndarray | None = None,
             deterministic: bool = True, record: bool = False) -> EvalSummary:
    """Run ``n_episodes`` in parallel from fixed start positions (env probe states by default)."""
    if n_episodes == 0:
        e = np.zeros(0)
        return EvalSummary(e, e.astype(bool), e.astype(int), e.astype(int), [] if record else None)
    rng = np.random.default_rng(seed)
    starts = env.probe_states if starts is None else np.atleast_2d(starts)
    pos = starts[np.arange(n_episodes) % len(starts)]
    state = env.state_at(pos)
    returns = np.zeros(n_episodes)
    alive = np.ones(n_episodes, dtype=bool)
    success = np.zeros(n_episodes, dtype=bool)
    modes = np.zeros(n_episodes, dtype=int)
    lengths = np.zeros(n_episodes, dtype=int)
    traj = [[] for _ in range(n_episodes)] if record else None
    for t in range(env.spec.max_steps):
        if not alive.any():
            break
        idx = np.flatnonzero(alive)
        o = normalize(norm, env.observe(state[idx]))
        a = act(policy, params, o, rng, deterministic, sampler)
        res = env.step(state[idx], a)
        returns[idx] += res.reward
        lengths[idx] += 1
        if record:
            for j, i in enumerate(idx):
                traj[i].append((t, state[i].copy(), a[j].copy(), float(res.reward[j])))
        state[idx] = res.state
        success[idx] |= res.success
        if hasattr(env, "goal_mode"):
            modes[idx] = np.where(res.success, env.goal_mode(res.state[:, :2]), modes[idx])
        alive[idx] = ~res.done
    return EvalSummary(returns, success, modes, lengths, traj)


def write_trajectories(summary: EvalSummary, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        rows = summary.trajectories or []
        if rows and rows[0]:
            s_dim, a_dim = len(rows[0][0][1]), len(rows[0][0][2])
            w.writerow(["episode", "t"] + [f"s{i}" for i in range(s_dim)]
                       + [f"a{i}" for i in range(a_dim)] + ["reward"])
        for ep, steps in enumerate(rows):
            for t, s, a, r in steps:
                w.writerow([ep, t, *map(float, s), *map(float, a), r])


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, learner: Learner, norm: RunningNorm, cfg: RunConfig) -> None:
    pol = learner.policy
    header = {
        "format": CKPT_FORMAT, "kind": pol.kind, "env": cfg.run.env, "algo": cfg.run.algo,
        "obs_dim": pol.obs_dim, "act_dim": pol.act_dim, "hidden": list(pol.hidden),
        "activation": pol.activation, "value_hidden": list(learner.value_mlp.sizes[1:-1]),
        "step": learner.pi_params.step, "norm_count": norm.count,
    }
    if isinstance(pol, FlowPolicy):
        header.update({
            "schedule": pol.schedule.kind, "tau_min": pol.schedule.tau_min,
            "sampler": {"method": pol.sampler.method, "n_steps": pol.sampler.n_steps,
                        "churn_std": pol.sampler.churn_std},
            "n_mc": pol.n_mc, "mc_param": pol.mc_param, "mc_weighting": pol.weighting.kind,
        })
    else:
        header["init_log_std"] = pol.init_log_std
    write_checkpoint(path, header, {
        "pi_params": learner.pi_params.vector, "v_params": learner.v_params.vector,
        "norm_mean": norm.mean, "norm_var": norm.var})


@dataclass
class Checkpoint:
    header: dict
    learner: Learner
    norm: RunningNorm

    @property
    def policy(self):
        return self.learner.policy

    @property
    def params(self) -> ParamSet:
        return self.learner.pi_params


def load_checkpoint(path) -> Checkpoint:
    header, arrays = read_checkpoint(path)
    if header.get("format") != CKPT_FORMAT:
        raise CheckpointError(f"{path}: not a policy checkpoint")
    h = header
    if h["kind"] == "flow":
        s = h["sampler"]
        pol = FlowPolicy(h["obs_dim"], h["act_dim"], tuple(h["hidden"]), h["activation"],
                         Schedule(h["schedule"], h["tau_min"]),
                         SamplerCfg(s["method"], s["n_steps"], s["churn_std"]),
                         h["n_mc"], h["mc_param"], Weighting(h["mc_weighting"]))
    elif h["kind"] == "gaussian":
        pol = GaussianPolicy(h["obs_dim"], h["act_dim"], tuple(h["hidden"]), h["activation"],
                             h["init_log_std"])
    else:
        raise CheckpointError(f"{path}: unknown policy kind {h['kind']!r}")
    vmlp = Mlp((h["obs_dim"], *h["value_hidden"], 1), h["activation"])
    pi = ParamSet(arrays["pi_params"], h["step"])
    vp = ParamSet(arrays["v_params"], h["step"])
    learner = Learner(pol, pi, vmlp, vp, AdamState(pi.size), AdamState(vp.size))
    norm = RunningNorm(h["obs_dim"], h["norm_count"], arrays["norm_mean"], arrays["norm_var"])
    return Checkpoint(header, learner, norm)


# ---------------------------------------------------------------- training

@dataclass
class TrainResult:
    learner: Learner
    norm: RunningNorm
    metrics: list
    checkpoint: Path | None
    batches: int
    env_steps: int
    final_eval: EvalSummary | None
    aborted: str | None = None


def _jsonable(x):
    if isinstance(x, float) and not np.isfinite(x):
        return None
    return x


def train(cfg: RunConfig, out_dir=None, progress: Callable[[dict], None] | None = None,
          max_batches: int | None = None,
          hook: Callable[[dict, Learner, RunningNorm], None] | None = None) -> TrainResult:
    """Collect -> GAE -> update -> (periodic) evaluate, deterministic in ``cfg.run.seed``.

    Writes ``config.toml``, ``metrics.jsonl`` (one record per batch),
    ``timing.jsonl`` (wall clock, kept apart so metrics stay reproducible) and
    ``policy.ckpt`` when ``out_dir`` is given.  With ``run.target_success > 0``
    training stops at the first evaluation reaching that success rate.
    """
    cfg.validate()
    env = make_env(cfg.run.env)
    streams = Streams.from_seed(cfg.run.seed)
    policy = build_policy(cfg, env.spec.obs_dim, env.spec.act_dim)
    learner = Learner.create(policy, tuple(cfg.policy.value_hidden), streams.init,
                             cfg.optim.lr, cfg.policy.activation)
    norm = RunningNorm(env.spec.obs_dim)
    venv = VecEnv.from_seed(env, cfg.run.num_envs, streams.env)
    gae = GaeCfg(cfg.gae.gamma, cfg.gae.lam, cfg.gae.reward_scale)
    out = Path(out_dir) if out_dir is not None else None
    metrics_fh = timing_fh = None
    ckpt_path = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        save_config(cfg, out / "config.toml")
        metrics_fh = open(out / "metrics.jsonl", "w")
        timing_fh = open(out / "timing.jsonl", "w")
        ckpt_path = out / "policy.ckpt"
        save_checkpoint(ckpt_path, learner, norm, cfg)
    n_batches = cfg.n_batches if max_batches is None else min(cfg.n_batches, max_batches)
    eval_seeds = iter(streams.eval.spawn(n_batches + 1))
    running = np.zeros(cfg.run.num_envs)
    metrics, env_steps, final_eval, aborted = [], 0, None, None
    t0 = time.perf_counter()
    batch = 0
    try:
        for batch in range(1, n_batches + 1):
            episodes = EpisodeLog()
            try:
                buf, raw = collect(venv, learner, norm, cfg, streams, running, episodes)
                buf.compute_advantages(gae)
            except (NonFiniteError, FloatingPointError) as exc:
                aborted = f"batch {batch}: {exc}"
                break
            norm = update_running_norm(norm, raw)
            good = (learner.pi_params, learner.v_params)
            stats = update(buf, learner, cfg, streams.shuffle)
            if stats.aborted:
                learner.pi_params, learner.v_params = good
                aborted = f"batch {batch}: {stats.aborted}"
            env_steps += buf.n_steps
            rec = {"batch": batch, "env_steps": env_steps,
                   "train_episodes": len(episodes.returns),
                   "train_return": float(np.mean(episodes.returns)) if episodes.returns else None,
                   "train_success": float(np.mean(episodes.successes)) if episodes.successes else None}
            rec.update(stats.as_dict())
            ev_seed = next(eval_seeds)
            if batch % cfg.run.eval_every == 0 or batch == n_batches or aborted:
                ev = evaluate(learner.policy, learner.pi_params, norm, env,
                              cfg.run.eval_episodes, ev_seed)
                final_eval = ev
                rec.update({"eval_return": ev.mean_return, "eval_stderr": ev.stderr,
                            "eval_success": ev.success_rate})
            rec = {k: _jsonable(v) for k, v in rec.items()}
            metrics.append(rec)
            if metrics_fh:
                metrics_fh.write(json.dumps(rec) + "\n")
                metrics_fh.flush()
                timing_fh.write(json.dumps({"batch": batch,
                                            "wall_time": time.perf_counter() - t0}) + "\n")
            if ckpt_path is not None and not aborted:
                save_checkpoint(ckpt_path, learner, norm, cfg)
            if progress:
                progress(rec)
            if hook:
                hook(rec, learner, norm)
            if aborted:
                log.error("training aborted: %s", aborted)
                break
            if (cfg.run.target_success > 0 and rec.get("eval_success") is not None
                    and rec["eval_success"] >= cfg.run.target_success):
                break
    finally:
        if metrics_fh:
            metrics_fh.close()
            timing_fh.close()
    return TrainResult(learner, norm, metrics, ckpt_path, batch if metrics else 0,
                       env_steps, final_eval, aborted)


# ---------------------------------------------------------------- multimodality probe

def two_means(points: np.ndarray, n_iter: int = 50, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Plain 2-means (k-means++ style init, deterministic). Returns (labels, centroids)."""
    rng = np.random.default_rng(seed)
    c0 = points[rng.integers(len(points))]
    d = ((points - c0) ** 2).sum(axis=1)
    c1 = points[int(np.argmax(d))]
    cent = np.stack([c0, c1])
    labels = np.zeros(len(points), dtype=int)
    for _ in range(n_iter):
        dist = ((points[:, None, :] - cent[None]) ** 2).sum(axis=-1)
        new = dist.argmin(axis=1)
        for k in range(2):
            if np.any(new == k):
                cent[k] = points[new == k].mean(axis=0)
        if np.array_equal(new, labels):
            break
        labels = new
    return labels, cent


def mode_report(actions: np.ndarray, separation_factor: float = 4.0) -> dict:
    """Cluster action directions into at most two modes.

    Two clusters count as distinct modes only when the distance between their
    centroids is at least ``separation_factor`` times the RMS distance of points
    to their own centroid; otherwise the samples are reported as one mode.
    """
    norms = np.linalg.norm(actions, axis=1, keepdims=True)
    dirs = actions / np.maximum(norms, 1e-12)
    labels, cent = two_means(dirs)
    masses = np.array([np.mean(labels == 0), np.mean(labels == 1)])
    separation = float(np.linalg.norm(cent[0] - cent[1]))
    spread = float(np.sqrt(((dirs - cent[labels]) ** 2).sum(axis=1).mean()))
    bimodal = bool(masses.min() > 0 and separation >= separation_factor * max(spread, 1e-12))
    order = np.argsort(-masses)
    if bimodal:
        mode_masses = masses[order].tolist()
        mode_dirs = cent[order].tolist()
    else:
        mode_masses = [1.0]
        mode_dirs = [dirs.mean(axis=0).tolist()]
    return {"n_samples": len(actions), "n_modes": 2 if bimodal else 1, "bimodal": bimodal,
            "mode_masses": mode_masses, "mode_directions": mode_dirs,
            "dominant_mass": float(max(mode_masses)), "cluster_masses": masses[order].tolist(),
            "separation": separation, "spread": spread,
            "separation_ratio": separation / max(spread, 1e-12)}


def probe_multimodality(policy, params: ParamSet, norm: RunningNorm, env, position,
                        n_samples: int = 256, seed: int = 0,
                        snapshot_taus=(0.0, 0.5, 1.0)) -> tuple[dict, dict]:
    """Sample ``n_samples`` actions at one state; returns (mode report, sample dump).

    For flow policies the dump also holds the intermediate denoising states at
    the requested flow times.
    """
    rng = np.random.default_rng(seed)
    state = env.state_at(position)
    obs = normalize(norm, env.observe(np.repeat(state, n_samples, axis=0)))
    dump: dict = {}
    if isinstance(policy, FlowPolicy):
        sampler = eval_sampler(policy)
        a0 = rng.standard_normal((n_samples, policy.act_dim))
        _, _, states = integrate(policy._field(params.vector, obs), a0, sampler, rng, record=True)
        grid = np.concatenate([a0[None], states])
        taus = np.linspace(0.0, 1.0, sampler.n_steps + 1)
        for tau in snapshot_taus:
            k = int(np.argmin(np.abs(taus - tau)))
            dump[f"tau_{taus[k]:.2f}"] = grid[k]
        actions = grid[-1]
    else:
        actions = policy.sample(params, obs, rng).actions
    dump["actions"] = actions
    report = mode_report(actions)
    report["state"] = list(map(float, np.ravel(position)))
    report["policy_kind"] = policy.kind
    return report, dump


# ---------------------------------------------------------------- sweeps

def parse_grid(spec: str) -> dict[str, list]:
    """``"fpo.clip_eps=0.05,0.1;flow.n_mc=1,4,8"`` -> ordered dict of value lists."""
    grid: dict[str, list] = {}
    for part in filter(None, (p.strip() for p in spec.split(";"))):
        if "=" not in part:
            raise ConfigError(f"bad grid entry {part!r}; expected key=v1,v2")
        key, vals = part.split("=", 1)
        grid[key.strip()] = [_parse_scalar(v.strip()) for v in vals.split(",") if v.strip()]
    return grid


def _parse_scalar(text: str):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text.strip('"')


def sweep(cfg: RunConfig, grid: dict[str, list], seeds: int | list[int], out_dir=None,
          progress: Callable[[dict], None] | None = None) -> list[dict]:
    """Train every grid cell for every seed; aggregate terminal eval returns per cell."""
    bad = set(grid) - SWEEP_KEYS
    if bad:
        raise ConfigError(f"non-sweepable keys {sorted(bad)}; allowed: {sorted(SWEEP_KEYS)}")
    seed_list = list(range(seeds)) if isinstance(seeds, int) else list(seeds)
    keys = list(grid)
    rows = []
    for values in itertools.product(*(grid[k] for k in keys)):
        overrides = dict(zip(keys, values))
        returns, successes = [], []
        for seed in seed_list:
            cell_cfg = with_overrides(cfg, {**overrides, "run.seed": seed})
            cell_dir = None
            if out_dir is not None:
                tag = "_".join(f"{k.split('.')[-1]}={v}" for k, v in overrides.items()) or "base"
                cell_dir = Path(out_dir) / tag / f"seed{seed}"
            res = train(cell_cfg, cell_dir)
            ev = res.final_eval
            returns.append(ev.mean_return if ev else float("nan"))
            successes.append(ev.success_rate if ev else float("nan"))
        r = np.array(returns)
        row = {**overrides, "seeds": len(seed_list), "mean_return": float(np.mean(r)),
               "stderr": float(np.std(r, ddof=1) / np.sqrt(len(r))) if len(r) > 1 else None,
               "mean_success": float(np.mean(successes)), "returns": returns}
        rows.append(row)
        if progress:
            progress(row)
    if out_dir is not None:
        write_sweep_csv(rows, Path(out_dir) / "sweep.csv", keys)
    return rows


def write_sweep_csv(rows: list[dict], path, keys: list[str]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = keys + ["seeds", "mean_return", "stderr", "mean_success"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for row in rows:
            w.writerow(["" if row.get(c) is None else row.get(c) for c in cols])
