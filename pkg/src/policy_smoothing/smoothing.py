"""Policy smoothing: Gaussian noise on every new frame, once, plus episode budget accounting.

A frame is noised (and attacked) exactly once, when it first arrives. The noisy
frame ``clean + eps + delta`` is then kept unchanged while it slides through the
frame stack, so later decisions reuse the same offset. Padding frames before the
first ``frames`` observations are zeros, carry no noise and cannot be attacked.

Each episode owns a noise stream seeded from ``(master_seed, episode_index)``:
the initial environment state is drawn first, then one standard-normal matrix of
shape ``(max_steps, obs_dim)`` scaled by ``sigma``. That makes certification
rollouts reproducible no matter how episodes are chunked across workers.
"""
from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Protocol, Sequence

import numpy as np

from .env import Environment
from .errors import BadConfig, BudgetExceeded, DimMismatch

LEDGER_TOL = 1e-12
CHUNK_EPISODES = 512


@dataclass(frozen=True)
class SmoothingConfig:
    sigma: float = 0.0
    frames: int = 1
    seed: int = 0

    def __post_init__(self):
        if not self.sigma >= 0:
            raise BadConfig("sigma must be >= 0")
        if self.frames < 1:
            raise BadConfig("frames must be >= 1")


def episode_rng(seed: int, episode_index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(episode_index)])


class BudgetLedger:
    """Running l2 spend of one episode's adversarial offsets."""

    def __init__(self, total: float):
        if not total >= 0:
            raise BadConfig("budget must be >= 0")
        self.total = float(total)
        self.used_sq = 0.0
        self.norms: list[float] = []

    @property
    def remaining(self) -> float:
        return math.sqrt(max(self.total**2 - self.used_sq, 0.0))

    @property
    def used(self) -> float:
        return math.sqrt(self.used_sq)

    def debit(self, eps) -> None:
        sq = float(np.dot(eps, eps))
        if self.used_sq + sq > self.total**2 + LEDGER_TOL:
            raise BudgetExceeded(
                f"offset of norm {math.sqrt(sq):.6g} exceeds remaining budget {self.remaining:.6g}")
        self.used_sq += sq
        self.norms.append(math.sqrt(sq))


class FrameBuffer:
    """The last ``frames`` observations as the agent perceives them."""

    def __init__(self, obs_dim: int, frames: int):
        self.obs_dim = obs_dim
        self.frames = frames
        self.noisy: list[np.ndarray] = []
        self.clean: list[np.ndarray] = []
        self.deltas: list[np.ndarray] = []
        self.eps: list[np.ndarray] = []

    def push(self, clean_frame, eps, delta) -> None:
        clean_frame = np.asarray(clean_frame, dtype=np.float64)
        if clean_frame.shape != (self.obs_dim,):
            raise DimMismatch(f"frame of shape {clean_frame.shape}, expected ({self.obs_dim},)")
        eps = np.asarray(eps, dtype=np.float64)
        self.clean.append(clean_frame)
        self.eps.append(eps)
        self.deltas.append(np.asarray(delta, dtype=np.float64))
        self.noisy.append(clean_frame + eps + delta)

    def _stack(self, frames: list[np.ndarray]) -> np.ndarray:
        recent = frames[-self.frames:]
        pad = [np.zeros(self.obs_dim)] * (self.frames - len(recent))
        return np.concatenate(pad + recent)

    def stacked(self) -> np.ndarray:
        return self._stack(self.noisy)

    def clean_stacked(self) -> np.ndarray:
        return self._stack(self.clean)


def observe(buf: FrameBuffer, clean_frame, eps, cfg: SmoothingConfig, rng: np.random.Generator,
            ledger: BudgetLedger | None = None) -> np.ndarray:
    """Push one new frame with a fresh noise draw and return the stacked observation."""
    eps = np.zeros(buf.obs_dim) if eps is None else np.asarray(eps, dtype=np.float64)
    if eps.shape != (buf.obs_dim,):
        raise DimMismatch(f"offset of shape {eps.shape}, expected ({buf.obs_dim},)")
    if ledger is not None:
        ledger.debit(eps)
    elif np.any(eps != 0):
        raise BudgetExceeded("non-zero offset without a budget ledger")
    delta = cfg.sigma * rng.standard_normal(buf.obs_dim)
    buf.push(clean_frame, eps, delta)
    return buf.stacked()


@dataclass
class SmoothedRollout:
    episode_index: int
    clean: np.ndarray  # (T, obs_dim)
    delta: np.ndarray  # (T, obs_dim)
    eps: np.ndarray  # (T, obs_dim)
    actions: np.ndarray  # (T,) discrete or (T, 1) continuous
    rewards: np.ndarray  # (T,)
    budget: float = 0.0
    sigma: float = 0.0
    seed: int = 0

    @property
    def total_reward(self) -> float:
        return float(self.rewards.sum())

    @property
    def length(self) -> int:
        return len(self.rewards)

    @property
    def noisy(self) -> np.ndarray:
        return self.clean + self.eps + self.delta

    @property
    def spent(self) -> float:
        return math.sqrt(float(np.sum(self.eps * self.eps)))

    def to_json(self) -> str:
        return json.dumps({
            "episode": self.episode_index, "seed": self.seed, "sigma": self.sigma, "budget": self.budget,
            "total_reward": self.total_reward, "rewards": self.rewards.tolist(),
            "actions": self.actions.tolist(), "clean": self.clean.tolist(),
            "delta": self.delta.tolist(), "eps": self.eps.tolist(),
        })

    @classmethod
    def from_json(cls, line: str) -> "SmoothedRollout":
        d = json.loads(line)
        return cls(d["episode"], np.array(d["clean"]), np.array(d["delta"]), np.array(d["eps"]),
                   np.array(d["actions"]), np.array(d["rewards"], dtype=np.float64),
                   d["budget"], d["sigma"], d["seed"])


def write_transcripts(path, rollouts: Iterable[SmoothedRollout]) -> None:
    with open(path, "w") as fh:
        for r in rollouts:
            fh.write(r.to_json() + "\n")


def read_transcripts(path) -> list[SmoothedRollout]:
    with open(path) as fh:
        return [SmoothedRollout.from_json(line) for line in fh if line.strip()]


def read_total_rewards(path) -> np.ndarray:
    with open(path) as fh:
        return np.array([json.loads(line)["total_reward"] for line in fh if line.strip()])


@dataclass
class AdversaryView:
    """What an adaptive adversary sees before choosing the offset for step ``t``.

    Arrays cover the active episodes only (``rows`` indexes the chunk). History
    arrays hold steps ``0..t-1``; the current clean frame is step ``t``. Nothing
    about the future, including this step's noise draw, is visible.
    """

    t: int
    frames: int
    rows: np.ndarray
    episode_indices: np.ndarray
    clean_frame: np.ndarray  # (n, d)
    clean_history: np.ndarray  # (n, t, d)
    noisy_history: np.ndarray  # (n, t, d)
    action_history: np.ndarray  # (n, t) or (n, t, 1)
    remaining: np.ndarray  # (n,)

    def _context(self, history):
        n, _, d = history.shape
        k = self.frames - 1
        ctx = np.zeros((n, k, d))
        take = min(k, self.t)
        if take:
            ctx[:, k - take:] = history[:, self.t - take:]
        return ctx.reshape(n, k * d)

    @property
    def clean_context(self) -> np.ndarray:
        """True previous frames, flattened oldest first, zero padded."""
        return self._context(self.clean_history)

    @property
    def dirty_context(self) -> np.ndarray:
        """Previous frames as the agent perceived them (past eps and delta included)."""
        return self._context(self.noisy_history)


class Adversary(Protocol):
    def perturb(self, view: AdversaryView) -> np.ndarray: ...


Policy = Callable[[np.ndarray], np.ndarray]


def _budget_array(budget, n):
    b = np.broadcast_to(np.asarray(budget, dtype=np.float64), (n,)).copy()
    if np.any(~(b >= 0)):
        raise BadConfig("budgets must be >= 0")
    return b


@dataclass
class EpisodeBatch:
    """Lock-step transcripts of ``n`` episodes, padded to ``max_steps``."""

    indices: np.ndarray
    clean: np.ndarray  # (n, T, d)
    delta: np.ndarray
    eps: np.ndarray
    actions: np.ndarray  # (n, T) or (n, T, 1)
    rewards: np.ndarray  # (n, T)
    lengths: np.ndarray  # (n,)
    budgets: np.ndarray
    sigma: float
    seed: int

    @property
    def totals(self) -> np.ndarray:
        return self.rewards.sum(axis=1)

    @property
    def noisy(self) -> np.ndarray:
        return self.clean + self.eps + self.delta

    @property
    def spent_sq(self) -> np.ndarray:
        return np.einsum("ntd,ntd->n", self.eps, self.eps)

    def rollouts(self) -> list[SmoothedRollout]:
        out = []
        for j, L in enumerate(self.lengths):
            out.append(SmoothedRollout(
                int(self.indices[j]), self.clean[j, :L].copy(), self.delta[j, :L].copy(), self.eps[j, :L].copy(),
                self.actions[j, :L].copy(), self.rewards[j, :L].copy(), float(self.budgets[j]),
                float(self.sigma), int(self.seed)))
        return out


def _episode_streams(env: Environment, cfg: SmoothingConfig, indices):
    """Per-episode generators: initial state first, then the whole noise matrix."""
    rngs = [episode_rng(cfg.seed, i) for i in indices]
    state = env.reset_batch(rngs)
    T, d = env.spec.max_steps, env.spec.obs_dim
    noise = cfg.sigma * np.stack([rng.standard_normal((T, d)) for rng in rngs])
    return state, noise


def _bulk_streams(env: Environment, cfg: SmoothingConfig, chunk_index: int, n: int):
    """One generator for a whole chunk; for large Monte Carlo runs."""
    rng = np.random.default_rng([int(cfg.seed), int(chunk_index), 0xB0])
    state = env.reset_batch([rng] * n)
    noise = cfg.sigma * rng.standard_normal((n, env.spec.max_steps, env.spec.obs_dim))
    return state, noise


def _run_chunk(env: Environment, policy: Policy, cfg: SmoothingConfig, indices: np.ndarray,
               adversary, budgets: np.ndarray, streams=None) -> EpisodeBatch:
    n = len(indices)
    spec = env.spec
    d, T, F = spec.obs_dim, spec.max_steps, cfg.frames
    state, noise = streams if streams is not None else _episode_streams(env, cfg, indices)

    clean = np.zeros((n, T, d))
    eps_hist = np.zeros((n, T, d))
    noisy = np.zeros((n, T, d))
    act_shape = (n, T) if spec.discrete else (n, T, 1)
    actions = np.zeros(act_shape, dtype=np.int64 if spec.discrete else np.float64)
    rewards = np.zeros((n, T))
    used_sq = np.zeros(n)
    lengths = np.full(n, T)
    active = np.arange(n)

    for t in range(T):
        if len(active) == 0:
            break
        frame = env.observe(state[active])
        clean[active, t] = frame
        if adversary is not None:
            view = AdversaryView(
                t=t, frames=F, rows=active, episode_indices=indices[active], clean_frame=frame,
                clean_history=clean[active, :t], noisy_history=noisy[active, :t],
                action_history=actions[active, :t],
                remaining=np.sqrt(np.maximum(budgets[active] ** 2 - used_sq[active], 0.0)),
            )
            eps = np.asarray(adversary.perturb(view), dtype=np.float64).reshape(len(active), d)
            sq = np.einsum("ij,ij->i", eps, eps)
            over = used_sq[active] + sq > budgets[active] ** 2 + LEDGER_TOL
            if np.any(over):
                i = active[np.argmax(over)]
                raise BudgetExceeded(f"episode {indices[i]} overspent budget {budgets[i]} at step {t}")
            used_sq[active] += sq
            eps_hist[active, t] = eps
        noisy[active, t] = frame + eps_hist[active, t] + noise[active, t]

        lo = max(0, t - F + 1)
        window = noisy[active, lo:t + 1]
        if window.shape[1] < F:
            window = np.concatenate([np.zeros((len(active), F - window.shape[1], d)), window], axis=1)
        acts = np.asarray(policy(window.reshape(len(active), F * d)))
        if spec.discrete:
            acts = acts.astype(np.int64).reshape(len(active))
        else:
            acts = acts.astype(np.float64).reshape(len(active), 1)
        actions[active, t] = acts
        nxt, rew, done = env.step_batch(state[active], t, acts)
        state[active] = nxt
        rewards[active, t] = rew
        lengths[active[done]] = t + 1
        active = active[~done]

    return EpisodeBatch(indices, clean, noise, eps_hist, actions, rewards, lengths, budgets,
                        float(cfg.sigma), int(cfg.seed))


def _chunks(n, first_index, budget, chunk):
    indices = np.arange(first_index, first_index + n)
    budgets = _budget_array(budget, n)
    return [(indices[a:a + chunk], budgets[a:a + chunk]) for a in range(0, n, chunk)]


def _map(fn, jobs, threads):
    workers = threads or os.cpu_count() or 1
    if workers == 1 or len(jobs) == 1:
        return [fn(job) for job in jobs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


def run_episodes(env: Environment, policy: Policy, cfg: SmoothingConfig, n_episodes: int,
                 adversary: Adversary | None = None, budget=0.0, first_index: int = 0,
                 threads: int | None = 1, chunk: int = CHUNK_EPISODES) -> list[SmoothedRollout]:
    """Run ``n_episodes`` smoothed episodes in lock-step chunks and return their transcripts.

    ``budget`` is a scalar or one value per episode. Every episode has its own
    noise stream and chunks have a fixed size, so results do not depend on
    ``threads``.
    """
    if n_episodes < 1:
        raise BadConfig("need at least one episode")
    jobs = _chunks(n_episodes, first_index, budget, chunk)
    parts = _map(lambda job: _run_chunk(env, policy, cfg, job[0], adversary, job[1]), jobs, threads)
    return [r for part in parts for r in part.rollouts()]


def monte_carlo(env: Environment, policy: Policy, cfg: SmoothingConfig, n_episodes: int,
                adversary: Adversary | None = None, budget=0.0, chunk: int = 250_000,
                threads: int | None = 1) -> list[EpisodeBatch]:
    """Large Monte Carlo runs: one noise generator per chunk, raw arrays instead of transcripts."""
    if n_episodes < 1:
        raise BadConfig("need at least one episode")
    jobs = list(enumerate(_chunks(n_episodes, 0, budget, chunk)))

    def run(job):
        k, (idx, bud) = job
        return _run_chunk(env, policy, cfg, idx, adversary, bud, _bulk_streams(env, cfg, k, len(idx)))

    return _map(run, jobs, threads)


def rollout(env: Environment, policy: Policy, cfg: SmoothingConfig, adversary: Adversary | None = None,
            budget: float = 0.0, episode_index: int = 0) -> SmoothedRollout:
    return run_episodes(env, policy, cfg, 1, adversary, budget, first_index=episode_index)[0]


def total_rewards(rollouts: Sequence[SmoothedRollout]) -> np.ndarray:
    return np.array([r.total_reward for r in rollouts])
