"""DQN and DDPG agents trained on smoothed observations.

Training observations go through the same frame-once smoothing wrapper used at
certification time, at the same sigma. Validation rounds run greedy smoothed
episodes; the returned agent is the one from the best validation round, only
replaced on strict improvement.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .env import Continuous, Environment, make_env
from .errors import BadConfig, DivergedTraining, MissingCheckpoint
from .neural import AdamState, MlpNet, adam_update
from .smoothing import FrameBuffer, SmoothingConfig, observe, run_episodes

log = logging.getLogger(__name__)


class ReplayBuffer:
    """Fixed-capacity FIFO store of transitions with uniform batch sampling."""

    def __init__(self, capacity: int, obs_dim: int, action_dim: int = 1, discrete: bool = True):
        if capacity < 1:
            raise BadConfig("replay capacity must be >= 1")
        self.capacity = capacity
        self.obs = np.zeros((capacity, obs_dim))
        self.next_obs = np.zeros((capacity, obs_dim))
        self.actions = np.zeros(capacity, dtype=np.int64) if discrete else np.zeros((capacity, action_dim))
        self.rewards = np.zeros(capacity)
        self.dones = np.zeros(capacity)
        self.pos = 0
        self.size = 0

    def __len__(self):
        return self.size

    def add(self, obs, action, reward, next_obs, done) -> None:
        i = self.pos
        self.obs[i] = obs
        self.actions[i] = action
        self.rewards[i] = reward
        self.next_obs[i] = next_obs
        self.dones[i] = float(done)
        self.pos = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size: int, rng: np.random.Generator):
        # without replacement inside a batch
        idx = rng.choice(self.size, size=min(batch_size, self.size), replace=False)
        return self.obs[idx], self.actions[idx], self.rewards[idx], self.next_obs[idx], self.dones[idx]


def _clip_grad_norm(grads, max_norm):
    if max_norm is None:
        return grads
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if total > max_norm:
        grads = [g * (max_norm / (total + 1e-6)) for g in grads]
    return grads


@dataclass
class DqnHyperparams:
    total_steps: int = 500_000
    learning_starts: int = 1000
    buffer_size: int = 100_000
    batch_size: int = 1024
    lr: float = 1e-4
    gamma: float = 0.99
    train_freq: int = 256
    gradient_steps: int = 128
    target_update_interval: int = 10
    exploration_fraction: float = 0.16
    eps_initial: float = 1.0
    eps_final: float = 0.0
    val_interval: int = 2000
    val_episodes: int = 10
    hidden: tuple = (256, 256)
    frames: int = 5
    max_grad_norm: float | None = 10.0
    stop_at_perfect: bool = True


DQN_PROFILES = {
    # full-size multi-frame CartPole settings
    "reference": DqnHyperparams(),
    "desk": DqnHyperparams(hidden=(64, 64), lr=5e-4, batch_size=256, gradient_steps=64, total_steps=200_000),
    "fast": DqnHyperparams(hidden=(64, 64), lr=5e-4, batch_size=256, gradient_steps=64, total_steps=50_000),
}


@dataclass
class TrainingLog:
    rows: list = field(default_factory=list)  # (step, validation mean reward)
    best_step: int = -1
    best_score: float = -math.inf

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("step,validation_mean_reward\n")
            for step, score in self.rows:
                fh.write(f"{step},{score!r}\n")


def epsilon_at(step: int, hp: DqnHyperparams) -> float:
    frac = min(1.0, step / max(1.0, hp.exploration_fraction * hp.total_steps))
    return hp.eps_initial + frac * (hp.eps_final - hp.eps_initial)


class DqnAgent:
    kind = "dqn"

    def __init__(self, q_net: MlpNet, frames: int, sigma: float = 0.0, env_name: str = "cartpole",
                 hyperparams: DqnHyperparams | None = None):
        self.q_net = q_net
        self.target_net = q_net.copy()
        self.frames = frames
        self.sigma = sigma
        self.env_name = env_name
        self.hyperparams = hyperparams or DqnHyperparams(frames=frames)
        self.validation_score = -math.inf

    @property
    def n_actions(self) -> int:
        return self.q_net.out_dim

    def q_values(self, stacked_obs) -> np.ndarray:
        return self.q_net.forward(stacked_obs)

    def act(self, stacked_obs) -> np.ndarray:
        return np.argmax(self.q_net.forward(np.atleast_2d(stacked_obs)), axis=1)

    def __call__(self, stacked_obs):
        return self.act(stacked_obs)

    def to_dict(self) -> dict:
        hp = asdict(self.hyperparams)
        hp["hidden"] = list(hp["hidden"])
        return {"kind": self.kind, "env": self.env_name, "frames": self.frames, "sigma": self.sigma,
                "validation_score": self.validation_score, "hyperparams": hp, "q_net": self.q_net.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "DqnAgent":
        hp = dict(d["hyperparams"])
        hp["hidden"] = tuple(hp["hidden"])
        agent = cls(MlpNet.from_dict(d["q_net"]), d["frames"], d["sigma"], d["env"], DqnHyperparams(**hp))
        agent.validation_score = d["validation_score"]
        return agent


def _huber_grad(diff):
    return np.clip(diff, -1.0, 1.0)


def _huber(diff):
    a = np.abs(diff)
    return np.where(a <= 1.0, 0.5 * diff * diff, a - 0.5)


def _dqn_gradient_step(agent: DqnAgent, batch, hp: DqnHyperparams, opt: AdamState) -> float:
    obs, actions, rewards, next_obs, dones = batch
    q_next = agent.target_net.forward(next_obs).max(axis=1)
    target = rewards + hp.gamma * (1.0 - dones) * q_next
    rows = np.arange(len(actions))

    def loss_grad(q):
        diff = q[rows, actions] - target
        d_out = np.zeros_like(q)
        d_out[rows, actions] = _huber_grad(diff) / len(diff)
        return float(np.mean(_huber(diff))), d_out

    loss, grads = agent.q_net.forward_backward(obs, loss_grad)
    if not math.isfinite(loss):
        raise DivergedTraining(f"non-finite DQN loss {loss}")
    adam_update(agent.q_net, _clip_grad_norm(grads.params(), hp.max_grad_norm), hp.lr, opt)
    return loss


def validate(env: Environment, policy, sigma: float, frames: int, episodes: int, seed: int,
             round_index: int) -> float:
    cfg = SmoothingConfig(sigma, frames, seed)
    rolls = run_episodes(env, policy, cfg, episodes, first_index=round_index * episodes)
    return float(np.mean([r.total_reward for r in rolls]))


def _train_dqn_once(env: Environment, sigma: float, hp: DqnHyperparams, seed: int):
    spec = env.spec
    if not spec.discrete:
        raise BadConfig("DQN needs a discrete action space")
    in_dim = spec.obs_dim * hp.frames
    q_net = MlpNet([in_dim, *hp.hidden, spec.action_space.n], seed=seed)
    agent = DqnAgent(q_net, hp.frames, sigma, spec.name, hp)
    best = agent.q_net.copy()
    opt = AdamState()
    rng = np.random.default_rng([seed, 1])
    buf = ReplayBuffer(hp.buffer_size, in_dim)
    cfg = SmoothingConfig(sigma, hp.frames, seed)
    tlog = TrainingLog()
    val_round = 0

    def new_episode():
        st = env.reset(rng)
        fb = FrameBuffer(spec.obs_dim, hp.frames)
        return st, fb, observe(fb, env.observe(st.features), None, cfg, rng)

    state, fb, obs = new_episode()
    for step in range(1, hp.total_steps + 1):
        if rng.random() < epsilon_at(step - 1, hp):
            action = int(rng.integers(spec.action_space.n))
        else:
            action = int(np.argmax(agent.q_net.forward(obs)))
        state, reward = env.step(state, action)
        next_obs = observe(fb, env.observe(state.features), None, cfg, rng)
        truncated = state.done and state.step_index >= spec.max_steps and spec.reward_kind == "survival"
        buf.add(obs, action, reward, next_obs, state.done and not truncated)
        obs = next_obs
        if state.done:
            state, fb, obs = new_episode()

        if step > hp.learning_starts and step % hp.train_freq == 0:
            for _ in range(hp.gradient_steps):
                _dqn_gradient_step(agent, buf.sample(hp.batch_size, rng), hp, opt)
        if step % hp.target_update_interval == 0:
            agent.target_net.load_from(agent.q_net)

        if step % hp.val_interval == 0:
            score = validate(env, agent.act, sigma, hp.frames, hp.val_episodes, seed + 7919, val_round)
            val_round += 1
            tlog.rows.append((step, score))
            if score > tlog.best_score:
                tlog.best_score, tlog.best_step = score, step
                best = agent.q_net.copy()
                log.info("dqn step %d: new best validation %.2f", step, score)
            if hp.stop_at_perfect and score >= spec.reward_max:
                break

    result = DqnAgent(best, hp.frames, sigma, spec.name, hp)
    result.validation_score = tlog.best_score
    return result, tlog


def train_dqn(env: Environment, sigma: float, hyperparams: DqnHyperparams | None = None, seed: int = 0,
              restarts: int = 1):
    """Train a DQN agent under smoothing noise ``sigma``; returns ``(agent, log)``.

    With ``restarts > 1`` the whole run is repeated with seeds ``seed, seed+1, ...``
    and the run with the best validation score is kept.
    """
    hp = hyperparams or DqnHyperparams()
    best = None
    for r in range(max(1, restarts)):
        agent, tlog = _train_dqn_once(env, sigma, hp, seed + r)
        if best is None or tlog.best_score > best[1].best_score:
            best = (agent, tlog)
    return best


class OrnsteinUhlenbeck:
    def __init__(self, sigma: float, size: int = 1, theta: float = 0.15, dt: float = 1e-2):
        self.sigma, self.theta, self.dt = sigma, theta, dt
        self.x = np.zeros(size)

    def reset(self):
        self.x[:] = 0.0

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        self.x = self.x - self.theta * self.x * self.dt + self.sigma * math.sqrt(self.dt) * rng.standard_normal(
            self.x.shape)
        return self.x


@dataclass
class DdpgHyperparams:
    total_steps: int = 300_000
    learning_starts: int = 100
    buffer_size: int = 1_000_000
    batch_size: int = 100
    lr: float = 1e-4
    gamma: float = 0.99
    tau: float = 0.005
    ou_sigma: float = 0.5
    val_interval: int = 2000
    val_episodes: int = 10
    hidden: tuple = (400, 300)
    frames: int = 5
    stop_at_perfect: bool = False


DDPG_PROFILES = {
    # full-size Mountain Car settings
    "reference": DdpgHyperparams(),
    "desk": DdpgHyperparams(hidden=(64, 64), lr=1e-3, buffer_size=300_000),
    "fast": DdpgHyperparams(hidden=(64, 64), lr=1e-3, buffer_size=50_000, total_steps=50_000),
}


def soft_update(target: MlpNet, online: MlpNet, tau: float) -> None:
    if not 0 < tau <= 1:
        raise BadConfig("tau must be in (0, 1]")
    for t, o in zip(target.params(), online.params()):
        t *= 1.0 - tau
        t += tau * o


class DdpgAgent:
    kind = "ddpg"

    def __init__(self, actor: MlpNet, critic: MlpNet, frames: int, sigma: float = 0.0,
                 env_name: str = "mountaincar", hyperparams: DdpgHyperparams | None = None):
        if critic.in_dim != actor.in_dim + actor.out_dim:
            raise BadConfig("critic input must be observation dim + action dim")
        self.actor, self.critic = actor, critic
        self.actor_target, self.critic_target = actor.copy(), critic.copy()
        self.frames = frames
        self.sigma = sigma
        self.env_name = env_name
        self.hyperparams = hyperparams or DdpgHyperparams(frames=frames)
        self.validation_score = -math.inf

    def act(self, stacked_obs) -> np.ndarray:
        return self.actor.forward(np.atleast_2d(stacked_obs))

    def __call__(self, stacked_obs):
        return self.act(stacked_obs)

    def q_values(self, stacked_obs, actions) -> np.ndarray:
        return self.critic.forward(np.concatenate([np.atleast_2d(stacked_obs), np.atleast_2d(actions)], axis=1))

    def to_dict(self) -> dict:
        hp = asdict(self.hyperparams)
        hp["hidden"] = list(hp["hidden"])
        return {"kind": self.kind, "env": self.env_name, "frames": self.frames, "sigma": self.sigma,
                "validation_score": self.validation_score, "hyperparams": hp,
                "actor": self.actor.to_dict(), "critic": self.critic.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "DdpgAgent":
        hp = dict(d["hyperparams"])
        hp["hidden"] = tuple(hp["hidden"])
        agent = cls(MlpNet.from_dict(d["actor"]), MlpNet.from_dict(d["critic"]), d["frames"], d["sigma"],
                    d["env"], DdpgHyperparams(**hp))
        agent.validation_score = d["validation_score"]
        return agent


def _ddpg_gradient_step(agent: DdpgAgent, batch, hp: DdpgHyperparams, opt_actor, opt_critic) -> float:
    obs, actions, rewards, next_obs, dones = batch
    next_a = agent.actor_target.forward(next_obs)
    q_next = agent.critic_target.forward(np.concatenate([next_obs, next_a], axis=1))[:, 0]
    target = rewards + hp.gamma * (1.0 - dones) * q_next

    def critic_loss(q):
        diff = q[:, 0] - target
        return float(np.mean(diff * diff)), (2.0 * diff / len(diff))[:, None]

    loss, g_critic = agent.critic.forward_backward(np.concatenate([obs, actions], axis=1), critic_loss)
    if not math.isfinite(loss):
        raise DivergedTraining(f"non-finite critic loss {loss}")
    adam_update(agent.critic, g_critic, hp.lr, opt_critic)

    # actor ascends Q(s, pi(s))
    a = agent.actor.forward(obs)
    critic_in = np.concatenate([obs, a], axis=1)
    dq_da = agent.critic.backward(critic_in, np.full((len(obs), 1), -1.0 / len(obs))).d_input[:, -1:]
    adam_update(agent.actor, agent.actor.backward(obs, dq_da), hp.lr, opt_actor)

    soft_update(agent.actor_target, agent.actor, hp.tau)
    soft_update(agent.critic_target, agent.critic, hp.tau)
    return loss


def train_ddpg(env: Environment, sigma: float, hyperparams: DdpgHyperparams | None = None, seed: int = 0):
    """Train a DDPG agent under smoothing noise ``sigma``; returns ``(agent, log)``.

    Gradient updates happen at the end of every episode, one per environment
    step of that episode.
    """
    hp = hyperparams or DdpgHyperparams()
    spec = env.spec
    if not isinstance(spec.action_space, Continuous):
        raise BadConfig("DDPG needs a continuous action space")
    low, high = spec.action_space.low, spec.action_space.high
    in_dim = spec.obs_dim * hp.frames
    actor = MlpNet([in_dim, *hp.hidden, 1], output="tanh", action_low=low, action_high=high, seed=seed)
    critic = MlpNet([in_dim + 1, *hp.hidden, 1], seed=seed + 1)
    agent = DdpgAgent(actor, critic, hp.frames, sigma, spec.name, hp)
    best = (actor.copy(), critic.copy())
    opt_a, opt_c = AdamState(), AdamState()
    rng = np.random.default_rng([seed, 2])
    noise = OrnsteinUhlenbeck(hp.ou_sigma)
    buf = ReplayBuffer(hp.buffer_size, in_dim, 1, discrete=False)
    cfg = SmoothingConfig(sigma, hp.frames, seed)
    tlog = TrainingLog()
    val_round = 0
    step = 0
    next_val = hp.val_interval

    while step < hp.total_steps:
        state = env.reset(rng)
        fb = FrameBuffer(spec.obs_dim, hp.frames)
        obs = observe(fb, env.observe(state.features), None, cfg, rng)
        noise.reset()
        ep_len = 0
        while not state.done and step < hp.total_steps:
            if step < hp.learning_starts:
                action = rng.uniform(low, high, size=1)
            else:
                action = np.clip(agent.actor.forward(obs) + noise.sample(rng), low, high)
            state, reward = env.step(state, float(action[0]))
            next_obs = observe(fb, env.observe(state.features), None, cfg, rng)
            truncated = state.done and reward == 0.0
            buf.add(obs, action, reward, next_obs, state.done and not truncated)
            obs = next_obs
            step += 1
            ep_len += 1
        if step >= hp.learning_starts:
            for _ in range(ep_len):
                _ddpg_gradient_step(agent, buf.sample(hp.batch_size, rng), hp, opt_a, opt_c)
        while step >= next_val:
            score = validate(env, agent.act, sigma, hp.frames, hp.val_episodes, seed + 7919, val_round)
            val_round += 1
            tlog.rows.append((next_val, score))
            if score > tlog.best_score:
                tlog.best_score, tlog.best_step = score, next_val
                best = (agent.actor.copy(), agent.critic.copy())
                log.info("ddpg step %d: new best validation %.3f", next_val, score)
            next_val += hp.val_interval
        if hp.stop_at_perfect and tlog.best_score >= spec.reward_max:
            break

    result = DdpgAgent(best[0], best[1], hp.frames, sigma, spec.name, hp)
    result.validation_score = tlog.best_score
    return result, tlog


def greedy_action(agent, stacked_obs):
    """Deterministic action: Q-argmax (lowest index on ties) or the actor output."""
    out = agent.act(np.atleast_2d(stacked_obs))
    if np.ndim(stacked_obs) == 1:
        return int(out[0]) if agent.kind == "dqn" else out[0]
    return out


def save_agent(agent, path) -> None:
    Path(path).write_text(json.dumps(agent.to_dict()))


def load_agent(path):
    p = Path(path)
    if not p.exists():
        raise MissingCheckpoint(f"no checkpoint at {p}")
    d = json.loads(p.read_text())
    kinds = {"dqn": DqnAgent, "ddpg": DdpgAgent}
    if d.get("kind") not in kinds:
        raise BadConfig(f"unknown agent kind {d.get('kind')!r}")
    return kinds[d["kind"]].from_dict(d)
