"""Desk-scale environments with a shared batched step interface.

Every environment keeps its state as a float array of shape (N, state_dim) and
steps a whole batch at once.  :class:`VecEnv` adds auto-reset and one rng
stream per environment so outcomes do not depend on batch order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class EnvSpec:
    obs_dim: int
    act_dim: int
    act_low: float
    act_high: float
    max_steps: int

    def __post_init__(self):
        if self.obs_dim < 1 or self.act_dim < 1 or self.max_steps < 1:
            raise ValueError("env dimensions must be positive")
        if not (np.isfinite(self.act_low) and np.isfinite(self.act_high)):
            raise ValueError("action bounds must be finite")


@dataclass
class StepResult:
    state: np.ndarray
    reward: np.ndarray
    terminated: np.ndarray
    truncated: np.ndarray
    success: np.ndarray

    @property
    def done(self) -> np.ndarray:
        return self.terminated | self.truncated


class GridWorld:
    """25x25 continuous-position grid with two goal bands (top and bottom centre).

    State columns: x, y, step count.  Actions are 2-D displacements whose norm is
    clipped to one cell.  Reaching a goal cell pays +1 and ends the episode;
    running out of steps pays -1 and ends it.  Nothing else is rewarded.
    """

    name = "gridworld"
    size = 25
    goal_cols = (11, 12, 13)
    goal_rows = (0, 24)
    max_steps = 200
    goal_reward = 1.0
    timeout_penalty = -1.0
    # timeouts are part of the task (penalised), so they terminate rather than truncate
    time_limit_is_terminal = True

    spec = EnvSpec(obs_dim=2, act_dim=2, act_low=-1.0, act_high=1.0, max_steps=200)

    probe_states = np.array([
        [12.5, 12.5], [3.5, 12.5], [21.5, 12.5], [12.5, 7.5],
        [12.5, 17.5], [4.5, 4.5], [20.5, 20.5], [6.5, 19.5],
    ])

    def cells(self, pos: np.ndarray) -> np.ndarray:
        return np.minimum(np.floor(pos), self.size - 1).astype(int)

    def in_goal(self, pos: np.ndarray) -> np.ndarray:
        c = self.cells(pos)
        return np.isin(c[..., 0], self.goal_cols) & np.isin(c[..., 1], self.goal_rows)

    def goal_mode(self, pos: np.ndarray) -> np.ndarray:
        """+1 for the top band, -1 for the bottom band, 0 elsewhere."""
        c = self.cells(pos)
        top = self.in_goal(pos) & (c[..., 1] == self.goal_rows[1])
        bottom = self.in_goal(pos) & (c[..., 1] == self.goal_rows[0])
        return top.astype(int) - bottom.astype(int)

    def observe(self, state: np.ndarray) -> np.ndarray:
        return state[..., :2].copy()

    def reset_one(self, rng: np.random.Generator) -> np.ndarray:
        while True:
            cell = rng.integers(0, self.size, size=2)
            pos = cell + rng.uniform(0.0, 1.0, size=2)
            if not self.in_goal(pos):
                return np.array([pos[0], pos[1], 0.0])

    def state_at(self, pos) -> np.ndarray:
        pos = np.atleast_2d(np.asarray(pos, dtype=np.float64))
        return np.concatenate([pos, np.zeros((len(pos), 1))], axis=1)

    def clip_action(self, a: np.ndarray) -> np.ndarray:
        norm = np.linalg.norm(a, axis=-1, keepdims=True)
        return a * np.minimum(1.0, 1.0 / np.maximum(norm, 1e-12))

    def step(self, state: np.ndarray, action: np.ndarray) -> StepResult:
        pos = np.clip(state[:, :2] + self.clip_action(action), 0.0, float(self.size))
        t = state[:, 2] + 1
        goal = self.in_goal(pos)
        timeout = (~goal) & (t >= self.max_steps)
        reward = np.where(goal, self.goal_reward, np.where(timeout, self.timeout_penalty, 0.0))
        new = np.column_stack([pos, t])
        return StepResult(new, reward, goal | timeout, np.zeros_like(goal), goal)


def gridworld_saddle_state() -> np.ndarray:
    """Grid midpoint, equidistant from both goal bands."""
    return np.array([GridWorld.size / 2.0, GridWorld.size / 2.0])


def gridworld_step(state, action) -> tuple[np.ndarray, float, bool]:
    env = GridWorld()
    res = env.step(np.atleast_2d(state).astype(np.float64), np.atleast_2d(action))
    return res.state[0], float(res.reward[0]), bool(res.terminated[0] | res.truncated[0])


class PointMass2:
    """Point mass in [-1, 1]^2 with two goal discs at (0, +-0.7).

    State columns: x, y, vx, vy, step count.  Force actions in [-1, 1]^2 drive a
    semi-implicit Euler integrator; walls stop the mass.  Reaching either goal
    pays +1 and terminates; every step costs ``0.001 * |a|^2``.
    """

    name = "pointmass2"
    dt = 0.05
    force_scale = 2.0
    goals = np.array([[0.0, 0.7], [0.0, -0.7]])
    goal_radius = 0.15
    max_steps = 100
    time_limit_is_terminal = False

    spec = EnvSpec(obs_dim=4, act_dim=2, act_low=-1.0, act_high=1.0, max_steps=100)

    probe_states = np.array([
        [0.0, 0.0], [-0.6, 0.0], [0.6, 0.0], [0.0, 0.3],
        [0.0, -0.3], [-0.7, 0.7], [0.7, -0.7], [0.5, 0.5],
    ])

    def goal_dist(self, pos: np.ndarray) -> np.ndarray:
        return np.linalg.norm(pos[..., None, :] - self.goals, axis=-1).min(axis=-1)

    def goal_mode(self, pos: np.ndarray) -> np.ndarray:
        d = np.linalg.norm(pos[..., None, :] - self.goals, axis=-1)
        hit = d.min(axis=-1) < self.goal_radius
        return np.where(hit, np.where(d[..., 0] < d[..., 1], 1, -1), 0)

    def observe(self, state: np.ndarray) -> np.ndarray:
        return state[..., :4].copy()

    def reset_one(self, rng: np.random.Generator) -> np.ndarray:
        while True:
            pos = rng.uniform(-1.0, 1.0, size=2)
            if self.goal_dist(pos) > self.goal_radius:
                return np.array([pos[0], pos[1], 0.0, 0.0, 0.0])

    def state_at(self, pos) -> np.ndarray:
        pos = np.atleast_2d(np.asarray(pos, dtype=np.float64))
        return np.concatenate([pos, np.zeros((len(pos), 3))], axis=1)

    def clip_action(self, a: np.ndarray) -> np.ndarray:
        return np.clip(a, -1.0, 1.0)

    def step(self, state: np.ndarray, action: np.ndarray) -> StepResult:
        a = self.clip_action(action)
        vel = state[:, 2:4] + self.dt * self.force_scale * a
        pos = state[:, 0:2] + self.dt * vel
        hit_wall = np.abs(pos) > 1.0
        pos = np.clip(pos, -1.0, 1.0)
        vel = np.where(hit_wall, 0.0, vel)
        t = state[:, 4] + 1
        goal = self.goal_dist(pos) < self.goal_radius
        reward = goal * 1.0 - 0.001 * (a * a).sum(axis=-1)
        trunc = (~goal) & (t >= self.max_steps)
        return StepResult(np.column_stack([pos, vel, t]), reward, goal, trunc, goal)


def pointmass_step(state, action) -> tuple[np.ndarray, float, bool]:
    res = PointMass2().step(np.atleast_2d(state).astype(np.float64), np.atleast_2d(action))
    return res.state[0], float(res.reward[0]), bool(res.terminated[0] | res.truncated[0])


def wrap_angle(theta):
    """Map to (-pi, pi]."""
    return np.pi - np.mod(np.pi - theta, 2.0 * np.pi)


class Pendulum:
    """Torque-limited pendulum; angle 0 is upright.

    State columns: theta, theta_dot, step count.  Dense reward
    ``-(theta^2 + 0.1 theta_dot^2 + 0.001 a^2)``; episodes are time-limited only.
    """

    name = "pendulum"
    dt = 0.05
    g_over_l = 10.0
    max_torque = 2.0
    max_speed = 8.0
    max_steps = 200
    # semi-implicit Euler sub-steps per control step; keeps undriven energy drift under 1%
    substeps = 10
    time_limit_is_terminal = False

    spec = EnvSpec(obs_dim=3, act_dim=1, act_low=-1.0, act_high=1.0, max_steps=200)

    probe_states = np.array([[np.pi, 0.0], [np.pi / 2, 0.0], [-np.pi / 2, 0.0], [0.5, 0.0]])

    def observe(self, state: np.ndarray) -> np.ndarray:
        th, thd = state[..., 0], state[..., 1]
        return np.stack([np.cos(th), np.sin(th), thd], axis=-1)

    def reset_one(self, rng: np.random.Generator) -> np.ndarray:
        return np.array([rng.uniform(-np.pi, np.pi), rng.uniform(-1.0, 1.0), 0.0])

    def state_at(self, angle_vel) -> np.ndarray:
        s = np.atleast_2d(np.asarray(angle_vel, dtype=np.float64))
        return np.concatenate([s, np.zeros((len(s), 1))], axis=1)

    def clip_action(self, a: np.ndarray) -> np.ndarray:
        return np.clip(a, -1.0, 1.0)

    def energy(self, state: np.ndarray) -> np.ndarray:
        """Per unit m*l^2, with potential measured from the hanging position."""
        return 0.5 * state[..., 1] ** 2 + self.g_over_l * (1.0 + np.cos(state[..., 0]))

    def step(self, state: np.ndarray, action: np.ndarray, speed_limit: bool = True) -> StepResult:
        u = self.max_torque * self.clip_action(action)[:, 0]
        th, thd = state[:, 0], state[:, 1]
        reward = -(wrap_angle(th) ** 2 + 0.1 * thd ** 2 + 0.001 * u ** 2)
        h = self.dt / self.substeps
        for _ in range(self.substeps):
            thd = thd + h * (self.g_over_l * np.sin(th) + u)
            if speed_limit:
                thd = np.clip(thd, -self.max_speed, self.max_speed)
            th = th + h * thd
        th = wrap_angle(th)
        t = state[:, 2] + 1
        trunc = t >= self.max_steps
        return StepResult(np.column_stack([th, thd, t]), reward, np.zeros_like(trunc),
                          trunc, np.zeros_like(trunc))


def pendulum_step(state, action) -> tuple[np.ndarray, float, bool]:
    res = Pendulum().step(np.atleast_2d(state).astype(np.float64), np.atleast_2d(action))
    return res.state[0], float(res.reward[0]), bool(res.terminated[0] | res.truncated[0])


ENVS = {"gridworld": GridWorld, "pointmass2": PointMass2, "pendulum": Pendulum}


def make_env(name: str):
    try:
        return ENVS[name]()
    except KeyError:
        raise ValueError(f"unknown env {name!r}; expected one of {sorted(ENVS)}") from None


@dataclass
class VecStep:
    obs: np.ndarray
    reward: np.ndarray
    terminated: np.ndarray
    truncated: np.ndarray
    success: np.ndarray
    final_obs: np.ndarray
    final_state: np.ndarray

    @property
    def done(self) -> np.ndarray:
        return self.terminated | self.truncated


class VecEnv:
    """Batch of independent environments with auto-reset.

    ``rngs`` holds one generator per environment; resets for env ``i`` draw only
    from ``rngs[i]``.
    """

    def __init__(self, env, rngs: list[np.random.Generator]):
        self.env = env
        self.rngs = list(rngs)
        self.state = np.stack([env.reset_one(r) for r in self.rngs])

    @classmethod
    def from_seed(cls, env, n: int, seed) -> "VecEnv":
        ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        return cls(env, [np.random.default_rng(s) for s in ss.spawn(n)])

    @property
    def n(self) -> int:
        return len(self.rngs)

    def set_state(self, state: np.ndarray) -> None:
        state = np.asarray(state, dtype=np.float64)
        if state.shape != self.state.shape:
            raise ValueError(f"state batch {state.shape} != {self.state.shape}")
        self.state = state.copy()

    def observe(self) -> np.ndarray:
        return self.env.observe(self.state)

    def step(self, actions: np.ndarray, auto_reset: bool = True) -> VecStep:
        actions = np.asarray(actions, dtype=np.float64)
        if actions.shape != (self.n, self.env.spec.act_dim):
            raise ValueError(f"expected actions ({self.n}, {self.env.spec.act_dim}), "
                             f"got {actions.shape}")
        res = self.env.step(self.state, actions)
        final_state = res.state
        final_obs = self.env.observe(final_state)
        new_state = final_state.copy()
        if auto_reset:
            for i in np.flatnonzero(res.done):
                new_state[i] = self.env.reset_one(self.rngs[i])
        self.state = new_state
        return VecStep(self.env.observe(new_state), res.reward, res.terminated,
                       res.truncated, res.success, final_obs, final_state)


def vec_reset(env, n: int, seed) -> VecEnv:
    return VecEnv.from_seed(env, n, seed)


def vec_step(venv: VecEnv, actions) -> VecStep:
    return venv.step(actions)
