"""Episode-budgeted l2 observation attacks on DQN and DDPG agents.

The DQN attack only spends budget where some action is at least ``lambda_q``
worse (by clean Q-value) than the greedy one. For each such target action it
runs targeted l2 PGD on the log-softmax of the Q-values, stopping as soon as
the agent's argmax flips, and keeps the flip with the lowest true Q-value.
Whatever it does not spend carries over to later steps.

The DDPG attack minimizes ``Q(C; o, pi(C'; o')) + lambda * ||o' - o||^2`` by
normalized gradient descent inside the remaining-budget ball.

``C`` is the true (clean) previous-frame context and ``C'`` the context the
agent actually perceived. Against smoothed agents (``m > 0``) every Q/pi
evaluation is replaced by its mean over ``m`` noise draws that stay fixed for
all iterations within one step.

All routines work on a batch of episodes at once; the single-step functions
are the ``n = 1`` case.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .env import Environment, EnvSpec
from .errors import BadConfig
from .neural import MlpNet
from .smoothing import AdversaryView, SmoothedRollout, SmoothingConfig, run_episodes

# lambda search grids. "cartpole" suits Q values on the scale of full-size agents;
# the small desk agents have action gaps below 1, so they get "cartpole_desk".
LAMBDA_Q_GRID = {"cartpole": (4.0, 6.0, 8.0, 10.0), "cartpole_single": (0.0, 0.05, 0.1, 1.0),
                 "cartpole_desk": (0.0, 0.1, 0.2, 0.3)}
LAMBDA_GRID = {"mountaincar": (1e-3, 1e-4, 1e-5)}


@dataclass(frozen=True)
class AttackConfig:
    budget: float = 0.0
    eta: float = 0.01
    nu_mult: float = 2.0
    tau_steps: int = 100
    lambda_q: float = 0.0
    lam: float = 0.0
    m: int = 0
    sigma: float = 0.0  # smoothing std of the victim, used when m > 0
    seed: int = 0

    def __post_init__(self):
        if not self.budget >= 0:
            raise BadConfig("budget must be >= 0")
        if not self.eta > 0:
            raise BadConfig("eta must be > 0")
        if not (self.lambda_q >= 0 and self.lam >= 0 and self.m >= 0):
            raise BadConfig("lambda_q, lambda and m must be >= 0")


@dataclass
class AttackContext:
    clean_context: np.ndarray
    dirty_context: np.ndarray
    remaining: float

    def __post_init__(self):
        self.clean_context = np.asarray(self.clean_context, dtype=np.float64)
        self.dirty_context = np.asarray(self.dirty_context, dtype=np.float64)
        if self.clean_context.shape != self.dirty_context.shape:
            raise BadConfig("clean and dirty contexts must have the same shape")


def _norms(x):
    return np.sqrt(np.einsum("ij,ij->i", x, x))


def project_ball(op, o, radius, box=None):
    """Project rows of ``op`` onto the l2 ball of ``radius`` around ``o`` (then the box)."""
    diff = op - o
    nd = _norms(diff)
    scale = np.where(nd > radius, radius / np.where(nd > 0, nd, 1.0), 1.0)
    out = o + diff * scale[:, None]
    if box is not None:
        out = np.clip(out, box[0], box[1])
    return out


def _box(spec: EnvSpec | None):
    if spec is None or spec.obs_low is None:
        return None
    return np.asarray(spec.obs_low, dtype=np.float64), np.asarray(spec.obs_high, dtype=np.float64)


def _stack(ctx, frame):
    return np.concatenate([ctx, frame], axis=1) if ctx.shape[1] else frame


class _MeanQ:
    """Q(ctx; x, .) averaged over fixed noise draws, with input gradient w.r.t. ``x``."""

    def __init__(self, net: MlpNet, ctx, noise=None):
        self.net, self.ctx, self.noise = net, ctx, noise  # noise: (n, m, d) or None

    def _inputs(self, rows, x):
        ctx = self.ctx[rows]
        if self.noise is None:
            return _stack(ctx, x)
        m = self.noise.shape[1]
        xs = (x[:, None, :] + self.noise[rows]).reshape(-1, x.shape[1])
        return _stack(np.repeat(ctx, m, axis=0), xs)

    def _mean(self, out, n):
        if self.noise is None:
            return out
        return out.reshape(n, self.noise.shape[1], -1).mean(axis=1)

    def values(self, rows, x):
        return self._mean(self.net.forward(self._inputs(rows, x)), len(x))

    def grad(self, rows, x, upstream):
        """Input gradient of ``<upstream, values(rows, x)>`` w.r.t. ``x``."""
        d = x.shape[1]
        if self.noise is None:
            return self.net.backward(_stack(self.ctx[rows], x), upstream).d_input[:, -d:]
        m = self.noise.shape[1]
        up = np.repeat(upstream / m, m, axis=0)
        g = self.net.backward(self._inputs(rows, x), up).d_input[:, -d:]
        return g.reshape(len(x), m, d).sum(axis=1)


def _clean_q(net, clean_ctx, o, clean_noise):
    if clean_noise is None:
        return net.forward(_stack(clean_ctx, o))
    ctx_noise, o_noise = clean_noise  # (n, m, k), (n, m, d)
    n, m = o_noise.shape[:2]
    inp = _stack((clean_ctx[:, None, :] + ctx_noise).reshape(n * m, -1), (o[:, None, :] + o_noise).reshape(n * m, -1))
    return net.forward(inp).reshape(n, m, -1).mean(axis=1)


def dqn_attack_batch(q_net: MlpNet, clean_ctx, dirty_ctx, o, budgets, cfg: AttackConfig, noise=None,
                     box=None, trace=None):
    """Empirical DQN attack on a batch of observations.

    ``noise`` (smoothed victims only) is ``(dirty_noise, clean_ctx_noise,
    clean_o_noise)`` with shapes ``(n, m, d)``, ``(n, m, k)``, ``(n, m, d)``.
    Returns ``(o_worst, remaining_budget)``.
    """
    o = np.asarray(o, dtype=np.float64)
    n = len(o)
    budgets = np.asarray(budgets, dtype=np.float64).reshape(n)
    dirty_noise, clean_noise = (None, None) if noise is None else (noise[0], (noise[1], noise[2]))
    q_clean_vals = _clean_q(q_net, clean_ctx, o, clean_noise)
    n_actions = q_clean_vals.shape[1]
    q_clean = q_clean_vals.max(axis=1)
    targets = q_clean_vals <= (q_clean - cfg.lambda_q)[:, None]
    iters = np.floor(cfg.nu_mult * budgets / cfg.eta + 1e-9).astype(np.int64)
    q_worst = q_clean.copy()
    o_worst = o.copy()
    dirty_q = _MeanQ(q_net, dirty_ctx, dirty_noise)

    for a in range(n_actions):
        rows = np.flatnonzero(targets[:, a] & (iters > 0))
        if len(rows) == 0:
            continue
        op = o[rows].copy()
        live = np.arange(len(rows))
        for i in range(int(iters[rows].max())):
            live = live[i < iters[rows[live]]]
            if len(live) == 0:
                break
            r = rows[live]
            qd = dirty_q.values(r, op[live])
            flipped = np.argmax(qd, axis=1) == a
            if np.any(flipped):
                fr = r[flipped]
                better = q_clean_vals[fr, a] < q_worst[fr]
                o_worst[fr[better]] = op[live[flipped]][better]
                q_worst[fr[better]] = q_clean_vals[fr[better], a]
            live, r, qd = live[~flipped], r[~flipped], qd[~flipped]
            if len(live) == 0:
                break
            z = qd - qd.max(axis=1, keepdims=True)
            soft = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
            upstream = -soft
            upstream[:, a] += 1.0  # d log softmax_a / dz
            D = dirty_q.grad(r, op[live], upstream)
            dn = _norms(D)
            step = np.where(dn[:, None] > 0, cfg.eta * D / np.where(dn > 0, dn, 1.0)[:, None], 0.0)
            op[live] = project_ball(op[live] + step, o[r], budgets[r], box)
            if trace is not None:
                trace.append((a, r.copy(), op[live].copy()))
    spent = np.einsum("ij,ij->i", o_worst - o, o_worst - o)
    return o_worst, np.sqrt(np.maximum(budgets**2 - spent, 0.0))


def ddpg_attack_batch(critic: MlpNet, actor: MlpNet, clean_ctx, dirty_ctx, o, budgets, cfg: AttackConfig,
                      noise=None, box=None, trace=None):
    """Empirical DDPG attack on a batch of observations; returns ``(o_adv, remaining_budget)``.

    ``noise`` (smoothed victims only) is ``(dirty_noise, clean_ctx_noise,
    clean_o_noise)``; draws on ``o'`` and on ``o`` are independent.
    """
    o = np.asarray(o, dtype=np.float64)
    n, d = o.shape
    budgets = np.asarray(budgets, dtype=np.float64).reshape(n)
    op = o.copy()
    live = np.flatnonzero(budgets > 0)
    if noise is None:
        m = 1
        clean_in = _stack(clean_ctx, o)[:, None, :]
        dnoise = np.zeros((n, 1, d))
    else:
        dnoise, cnoise, onoise = noise
        m = dnoise.shape[1]
        clean_in = np.concatenate([clean_ctx[:, None, :] + cnoise, o[:, None, :] + onoise], axis=2)
    k = dirty_ctx.shape[1]

    for _ in range(cfg.tau_steps):
        if len(live) == 0:
            break
        nl = len(live)
        pi_in = np.concatenate([np.repeat(dirty_ctx[live], m, axis=0),
                                (op[live][:, None, :] + dnoise[live]).reshape(nl * m, d)], axis=1)
        act = actor.forward(pi_in)
        q_in = np.concatenate([clean_in[live].reshape(nl * m, -1), act], axis=1)
        dq_da = critic.backward(q_in, np.full((nl * m, 1), 1.0 / m)).d_input[:, -act.shape[1]:]
        g = actor.backward(pi_in, dq_da).d_input[:, k:]
        D = g.reshape(nl, m, d).sum(axis=1) + 2.0 * cfg.lam * (op[live] - o[live])
        dn = _norms(D)
        on = _norms(op[live])
        stop = (dn == 0) | (dn <= 0.001 * on)
        live, D, dn = live[~stop], D[~stop], dn[~stop]
        if len(live) == 0:
            break
        # descent: the objective is minimized
        op[live] = project_ball(op[live] - cfg.eta * D / dn[:, None], o[live], budgets[live], box)
        if trace is not None:
            trace.append(op[live].copy())
    spent = np.einsum("ij,ij->i", op - o, op - o)
    return op, np.sqrt(np.maximum(budgets**2 - spent, 0.0))


def draw_attack_noise(rng_or_rngs, m: int, sigma: float, k: int, d: int):
    """Fixed smoothing draws for one attack step: dirty ``o'``, clean context, clean ``o``."""
    rngs = rng_or_rngs if isinstance(rng_or_rngs, (list, tuple)) else [rng_or_rngs]
    parts = [rng.standard_normal((m, d + k + d)) * sigma for rng in rngs]
    z = np.stack(parts)
    return z[:, :, :d], z[:, :, d:d + k], z[:, :, d + k:]


def attack_dqn_step(q_net: MlpNet, ctx: AttackContext, o, cfg: AttackConfig, noise=None, box=None):
    """Algorithm-1 attack on one observation; returns ``(o_worst, remaining_budget)``."""
    o = np.asarray(o, dtype=np.float64)
    batch_noise = None if noise is None else tuple(np.asarray(z)[None] for z in noise)
    ow, rem = dqn_attack_batch(q_net, ctx.clean_context[None], ctx.dirty_context[None], o[None],
                               [ctx.remaining], cfg, batch_noise, box)
    return ow[0], float(rem[0])


def attack_ddpg_step(critic: MlpNet, actor: MlpNet, ctx: AttackContext, o, cfg: AttackConfig, noise=None,
                     box=None):
    """Algorithm-2 attack on one observation; returns ``(o_adv, remaining_budget)``."""
    o = np.asarray(o, dtype=np.float64)
    batch_noise = None if noise is None else tuple(np.asarray(z)[None] for z in noise)
    oa, rem = ddpg_attack_batch(critic, actor, ctx.clean_context[None], ctx.dirty_context[None], o[None],
                                [ctx.remaining], cfg, batch_noise, box)
    return oa[0], float(rem[0])


def attack_smoothed_step(nets, ctx: AttackContext, o, cfg: AttackConfig, rng: np.random.Generator, box=None):
    """Attack a smoothed agent: ``nets`` is a Q-net (DQN) or ``(critic, actor)`` (DDPG).

    Draws ``cfg.m`` noise vectors once and reuses them for every iteration.
    """
    if cfg.m < 1:
        raise BadConfig("smoothed attacks need m >= 1")
    o = np.asarray(o, dtype=np.float64)
    dn, cn, on = draw_attack_noise(rng, cfg.m, cfg.sigma, ctx.clean_context.shape[0], o.shape[0])
    noise = (dn[0], cn[0], on[0])
    if isinstance(nets, MlpNet):
        return attack_dqn_step(nets, ctx, o, cfg, noise, box)
    critic, actor = nets
    return attack_ddpg_step(critic, actor, ctx, o, cfg, noise, box)


class EpisodeAttacker:
    """Adversary callback for ``smoothing.run_episodes`` wrapping the per-step attacks."""

    def __init__(self, agent, cfg: AttackConfig, spec: EnvSpec | None = None, clip_box: bool | None = None):
        self.agent = agent
        self.cfg = cfg
        # box constraints only where the environment itself clips
        self.box = _box(spec) if clip_box in (None, True) else None

    def _noise(self, view: AdversaryView, k: int, d: int):
        if self.cfg.m < 1:
            return None
        rngs = [np.random.default_rng([self.cfg.seed, int(e), view.t, 1]) for e in view.episode_indices]
        return draw_attack_noise(rngs, self.cfg.m, self.cfg.sigma, k, d)

    def perturb(self, view: AdversaryView) -> np.ndarray:
        o = view.clean_frame
        cc, dc = view.clean_context, view.dirty_context
        noise = self._noise(view, cc.shape[1], o.shape[1])
        if self.agent.kind == "dqn":
            ow, _ = dqn_attack_batch(self.agent.q_net, cc, dc, o, view.remaining, self.cfg, noise, self.box)
        else:
            ow, _ = ddpg_attack_batch(self.agent.critic, self.agent.actor, cc, dc, o, view.remaining, self.cfg,
                                      noise, self.box)
        return ow - o


def attack_episodes(env: Environment, agent, cfg: AttackConfig, n_episodes: int, seed: int = 0,
                    first_index: int = 0, threads: int | None = 1) -> list[SmoothedRollout]:
    """Attacked smoothed episodes; the victim's own sigma and frame depth are used."""
    smooth = SmoothingConfig(agent.sigma, agent.frames, seed)
    attacker = EpisodeAttacker(agent, cfg, env.spec)
    return run_episodes(env, agent.act, smooth, n_episodes, attacker, cfg.budget, first_index, threads)


def attack_episode(env: Environment, agent, cfg: AttackConfig, seed: int = 0, episode_index: int = 0):
    return attack_episodes(env, agent, cfg, 1, seed, episode_index)[0]


@dataclass
class CurveRow:
    budget: float
    lam: float | None  # None marks the pointwise minimum over lambda
    mean_reward: float
    std_error: float
    n: int


def robustness_curve(env: Environment, agent, budgets, lambdas, n_episodes: int, base: AttackConfig,
                     seed: int = 0, threads: int | None = 1) -> list[CurveRow]:
    """Mean attacked reward per (budget, lambda) plus a pointwise-minimum row per budget."""
    rows = []
    key = "lambda_q" if agent.kind == "dqn" else "lam"
    for b in budgets:
        per_b = []
        for lam in lambdas:
            cfg = replace(base, budget=float(b), **{key: float(lam)})
            rew = np.array([r.total_reward for r in attack_episodes(env, agent, cfg, n_episodes, seed,
                                                                      threads=threads)])
            se = float(rew.std(ddof=1) / math.sqrt(len(rew))) if len(rew) > 1 else 0.0
            per_b.append(CurveRow(float(b), float(lam), float(rew.mean()), se, len(rew)))
        rows.extend(per_b)
        worst = min(per_b, key=lambda r: r.mean_reward)
        rows.append(CurveRow(float(b), None, worst.mean_reward, worst.std_error, worst.n))
    return rows
