"""Seeded classic-control environments and the synthetic games used to check the bound.

Every environment is a small state machine with a vectorized core
(``reset_batch`` / ``step_batch`` on arrays of shape ``(n, state_dim)``) so that
thousands of certification episodes can advance in lock-step. The single-episode
helpers (``reset`` / ``step`` and the module-level ``*_step`` functions) are thin
wrappers around the batch path with ``n = 1``.

Physical constants for CartPole and Mountain Car follow the classic-control
reference benchmark (OpenAI Gym ``CartPole-v0`` and ``MountainCarContinuous-v0``).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence, Union

import numpy as np

from .errors import BadConfig, DimMismatch, StepAfterDone


@dataclass(frozen=True)
class Discrete:
    n: int

    def __post_init__(self):
        if self.n < 2:
            raise BadConfig("a discrete action space needs at least 2 actions")


@dataclass(frozen=True)
class Continuous:
    low: float
    high: float


ActionSpace = Union[Discrete, Continuous]


@dataclass(frozen=True)
class EnvSpec:
    name: str
    obs_dim: int
    action_space: ActionSpace
    max_steps: int
    reward_kind: str  # "survival" (1 per step) or "terminal" (0/1 outcome)
    reward_min: float
    reward_max: float
    # box the environment itself clips observations to; None means unclipped
    obs_low: tuple | None = None
    obs_high: tuple | None = None

    def __post_init__(self):
        if self.max_steps <= 0:
            raise BadConfig("max_steps must be positive")
        if self.reward_kind not in ("survival", "terminal"):
            raise BadConfig(f"unknown reward kind {self.reward_kind!r}")

    @property
    def discrete(self) -> bool:
        return isinstance(self.action_space, Discrete)

    @property
    def action_dim(self) -> int:
        return 1 if isinstance(self.action_space, Continuous) else self.action_space.n


@dataclass
class EnvState:
    features: np.ndarray
    step_index: int = 0
    done: bool = False
    extra: dict = field(default_factory=dict)


class Environment:
    spec: EnvSpec
    state_dim: int

    def reset_batch(self, rngs: Sequence[np.random.Generator]) -> np.ndarray:
        raise NotImplementedError

    def step_batch(self, features: np.ndarray, t: int, actions: np.ndarray):
        """Advance ``n`` episodes that are all at step index ``t``.

        Returns ``(next_features, rewards, done)``.
        """
        raise NotImplementedError

    def observe(self, features: np.ndarray) -> np.ndarray:
        return features[..., : self.spec.obs_dim]

    def reset(self, rng: np.random.Generator) -> EnvState:
        return EnvState(self.reset_batch([rng])[0].copy())

    def step(self, state: EnvState, action) -> tuple[EnvState, float]:
        if state.done:
            raise StepAfterDone(f"{self.spec.name}: episode already finished")
        feats = np.asarray(state.features, dtype=np.float64)
        if feats.shape != (self.state_dim,):
            raise DimMismatch(f"expected state of size {self.state_dim}, got {feats.shape}")
        nxt, rew, done = self.step_batch(feats[None, :], state.step_index, np.asarray([action]))
        return EnvState(nxt[0], state.step_index + 1, bool(done[0]), dict(state.extra)), float(rew[0])


class CartPole(Environment):
    gravity = 9.8
    cart_mass = 1.0
    pole_mass = 0.1
    half_length = 0.5
    force_mag = 10.0
    tau = 0.02
    theta_limit = 12 * 2 * math.pi / 360
    x_limit = 2.4

    def __init__(self, max_steps: int = 200):
        self.spec = EnvSpec("cartpole", 4, Discrete(2), max_steps, "survival", 0.0, float(max_steps))
        self.state_dim = 4

    def reset_batch(self, rngs):
        return np.stack([rng.uniform(-0.05, 0.05, size=4) for rng in rngs])

    def step_batch(self, features, t, actions):
        x, x_dot, theta, theta_dot = features.T
        force = np.where(np.asarray(actions) == 1, self.force_mag, -self.force_mag)
        total_mass = self.cart_mass + self.pole_mass
        polemass_length = self.pole_mass * self.half_length
        cos_t, sin_t = np.cos(theta), np.sin(theta)
        temp = (force + polemass_length * theta_dot**2 * sin_t) / total_mass
        theta_acc = (self.gravity * sin_t - cos_t * temp) / (
            self.half_length * (4.0 / 3.0 - self.pole_mass * cos_t**2 / total_mass)
        )
        x_acc = temp - polemass_length * theta_acc * cos_t / total_mass
        # explicit Euler, position before velocity
        x = x + self.tau * x_dot
        x_dot = x_dot + self.tau * x_acc
        theta = theta + self.tau * theta_dot
        theta_dot = theta_dot + self.tau * theta_acc
        nxt = np.stack([x, x_dot, theta, theta_dot], axis=1)
        failed = (np.abs(x) > self.x_limit) | (np.abs(theta) > self.theta_limit)
        done = failed | (t + 1 >= self.spec.max_steps)
        return nxt, np.ones(len(nxt)), done


class MountainCar(Environment):
    """Continuous mountain car without the fuel penalty: reward 1 once at the goal."""

    min_position = -1.2
    max_position = 0.6
    max_speed = 0.07
    goal_position = 0.45
    goal_velocity = 0.0
    power = 0.0015

    def __init__(self, max_steps: int = 999):
        self.spec = EnvSpec(
            "mountaincar", 2, Continuous(-1.0, 1.0), max_steps, "terminal", 0.0, 1.0,
            obs_low=(self.min_position, -self.max_speed),
            obs_high=(self.max_position, self.max_speed),
        )
        self.state_dim = 2

    def reset_batch(self, rngs):
        return np.stack([np.array([rng.uniform(-0.6, -0.4), 0.0]) for rng in rngs])

    def step_batch(self, features, t, actions):
        position, velocity = features[:, 0].copy(), features[:, 1].copy()
        force = np.clip(np.asarray(actions, dtype=np.float64).reshape(-1), -1.0, 1.0)
        velocity = velocity + force * self.power - 0.0025 * np.cos(3 * position)
        velocity = np.clip(velocity, -self.max_speed, self.max_speed)
        position = np.clip(position + velocity, self.min_position, self.max_position)
        velocity = np.where((position == self.min_position) & (velocity < 0), 0.0, velocity)
        goal = (position >= self.goal_position) & (velocity >= self.goal_velocity)
        done = goal | (t + 1 >= self.spec.max_steps)
        return np.stack([position, velocity], axis=1), goal.astype(np.float64), done


class WorstCase(Environment):
    """One-step game paying ``nu`` for action 0 (a1) and nothing for action 1 (a2)."""

    def __init__(self, nu: float = 1.0, obs_dim: int = 1, clean_obs: Sequence[float] | None = None):
        self.nu = float(nu)
        lo, hi = min(0.0, self.nu), max(0.0, self.nu)
        self.spec = EnvSpec("worstcase", obs_dim, Discrete(2), 1, "terminal", lo, hi)
        self.state_dim = obs_dim
        self.clean_obs = np.zeros(obs_dim) if clean_obs is None else np.asarray(clean_obs, dtype=np.float64)
        if self.clean_obs.shape != (obs_dim,):
            raise DimMismatch("clean_obs must have obs_dim entries")

    def reset_batch(self, rngs):
        return np.tile(self.clean_obs, (len(rngs), 1))

    def step_batch(self, features, t, actions):
        if t != 0:
            raise StepAfterDone("worstcase game has a single step")
        rew = np.where(np.asarray(actions) == 0, self.nu, 0.0)
        return features.copy(), rew, np.ones(len(features), dtype=bool)


def _and(a1, a2):
    return (a1 == 1) & (a2 == 1)


def _or(a1, a2):
    return (a1 == 1) | (a2 == 1)


def _xor(a1, a2):
    return (a1 == 1) ^ (a2 == 1)


TOY_PREDICATES: dict[str, Callable] = {"and": _and, "or": _or, "xor": _xor}


class ToyTwoStep(Environment):
    """Two-step game with fixed scalar clean observations.

    The state row is ``[clean_obs_t, first_action]``; the agent only sees the
    first entry. The reward is paid at the end of step 2 and is a 0/1 predicate
    of both actions.
    """

    def __init__(self, predicate: str | Callable = "and", clean_obs: tuple[float, float] = (0.0, 0.0)):
        self.predicate = TOY_PREDICATES[predicate] if isinstance(predicate, str) else predicate
        self.clean_obs = tuple(float(v) for v in clean_obs)
        self.spec = EnvSpec("toy2", 1, Discrete(2), 2, "terminal", 0.0, 1.0)
        self.state_dim = 2

    def reset_batch(self, rngs):
        return np.tile([self.clean_obs[0], -1.0], (len(rngs), 1))

    def step_batch(self, features, t, actions):
        actions = np.asarray(actions)
        n = len(features)
        if t == 0:
            nxt = np.column_stack([np.full(n, self.clean_obs[1]), actions.astype(np.float64)])
            return nxt, np.zeros(n), np.zeros(n, dtype=bool)
        if t == 1:
            rew = self.predicate(features[:, 1].astype(int), actions).astype(np.float64)
            return features.copy(), rew, np.ones(n, dtype=bool)
        raise StepAfterDone("toy game has exactly two steps")


def make_env(name: str, **kwargs) -> Environment:
    try:
        cls = {"cartpole": CartPole, "mountaincar": MountainCar, "worstcase": WorstCase, "toy2": ToyTwoStep}[name]
    except KeyError:
        raise BadConfig(f"unknown environment {name!r}") from None
    return cls(**kwargs)


def cartpole_step(state: EnvState, action: int) -> tuple[EnvState, float]:
    return CartPole().step(state, action)


def mountaincar_step(state: EnvState, action: float) -> tuple[EnvState, float]:
    return MountainCar().step(state, action)


def worstcase_env_step(nu: float, state: EnvState, action: int) -> tuple[EnvState, float]:
    env = WorstCase(nu, obs_dim=len(state.features))
    if state.step_index != 0 or state.done:
        raise StepAfterDone("worstcase game has a single step")
    return env.step(state, action)


def toy_twostep_step(state: EnvState, action: int, predicate: str | Callable = "and",
                     clean_obs: tuple[float, float] = (0.0, 0.0)) -> tuple[EnvState, float]:
    return ToyTwoStep(predicate, clean_obs).step(state, action)
