import math

import numpy as np
import pytest

from policy_smoothing.certify import std_normal_cdf
from policy_smoothing.env import CartPole, EnvState, WorstCase
from policy_smoothing.errors import BadConfig, BudgetExceeded, DimMismatch
from policy_smoothing.smoothing import (BudgetLedger, FrameBuffer, SmoothedRollout, SmoothingConfig, episode_rng,
                                        monte_carlo, observe, read_total_rewards, read_transcripts, rollout,
                                        run_episodes, total_rewards, write_transcripts)


def lean_right(x):
    return (x[:, -2] + 0.5 * x[:, -1] > 0).astype(int)


class Recorder:
    """Policy wrapper keeping every stacked observation it is shown."""

    def __init__(self, policy):
        self.policy, self.seen = policy, []

    def __call__(self, x):
        self.seen.append(x.copy())
        return self.policy(x)


class RandomSpender:
    """Spends a random fraction of the remaining budget in a random direction each step."""

    def __init__(self, seed):
        self.rng = np.random.default_rng(seed)

    def perturb(self, view):
        n, d = view.clean_frame.shape
        u = self.rng.normal(size=(n, d))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        return u * (view.remaining * self.rng.uniform(0, 1, size=n))[:, None]


def test_zero_noise_zero_offset_gives_clean_stack():
    buf = FrameBuffer(2, 3)
    cfg = SmoothingConfig(0.0, 3)
    rng = np.random.default_rng(0)
    for t in range(5):
        frame = np.array([t, -t], dtype=float)
        out = observe(buf, frame, None, cfg, rng)
        assert np.array_equal(out, buf.clean_stacked())
    assert np.array_equal(out, [2, -2, 3, -3, 4, -4])


def test_stack_is_zero_padded_oldest_first():
    buf = FrameBuffer(1, 3)
    out = observe(buf, np.array([5.0]), None, SmoothingConfig(0.0, 3), np.random.default_rng(0))
    assert np.array_equal(out, [0.0, 0.0, 5.0])


def test_observe_checks_dims_and_budget():
    buf = FrameBuffer(2, 1)
    rng = np.random.default_rng(0)
    cfg = SmoothingConfig(0.1, 1)
    with pytest.raises(DimMismatch):
        observe(buf, np.zeros(3), None, cfg, rng)
    with pytest.raises(DimMismatch):
        observe(buf, np.zeros(2), np.zeros(3), cfg, rng, BudgetLedger(1.0))
    with pytest.raises(BudgetExceeded):
        observe(buf, np.zeros(2), np.array([0.1, 0.0]), cfg, rng)
    led = BudgetLedger(0.5)
    observe(buf, np.zeros(2), np.array([0.3, 0.0]), cfg, rng, led)
    observe(buf, np.zeros(2), np.array([0.0, 0.4]), cfg, rng, led)  # exactly exhausts 0.5
    assert led.remaining == pytest.approx(0.0, abs=1e-7)
    with pytest.raises(BudgetExceeded):
        observe(buf, np.zeros(2), np.array([1e-5, 0.0]), cfg, rng, led)


def test_ledger_bookkeeping():
    led = BudgetLedger(1.0)
    led.debit(np.array([0.6, 0.0]))
    assert led.remaining == pytest.approx(0.8)
    assert led.used == pytest.approx(0.6) and led.norms == [0.6]
    with pytest.raises(BudgetExceeded):
        led.debit(np.array([0.0, 0.81]))
    with pytest.raises(BadConfig):
        BudgetLedger(-1.0)


def test_config_validation():
    with pytest.raises(BadConfig):
        SmoothingConfig(-0.1)
    with pytest.raises(BadConfig):
        SmoothingConfig(0.1, frames=0)


def test_noise_std_moment():
    buf = FrameBuffer(3, 1)
    cfg = SmoothingConfig(0.7, 1)
    rng = np.random.default_rng(1)
    for _ in range(100_000):
        observe(buf, np.zeros(3), None, cfg, rng)
    std = np.std(np.array(buf.deltas), axis=0)
    assert np.all(np.abs(std / 0.7 - 1) < 0.01)


def test_each_frame_noised_once():
    frames = 4
    rec = Recorder(lean_right)
    r = rollout(CartPole(), rec, SmoothingConfig(0.3, frames, 2), episode_index=0)
    noisy = r.noisy
    assert r.length > frames
    # frame s sits at slot (frames-1) - (t-s) of the stack shown at step t
    for s in range(r.length):
        copies = []
        for t in range(s, min(s + frames, r.length)):
            slot = frames - 1 - (t - s)
            copies.append(rec.seen[t][0, slot * 4:(slot + 1) * 4].tobytes())
        assert len(set(copies)) == 1
        assert copies[0] == noisy[s].tobytes()
    # and the padding before the first frames is zero
    assert np.all(rec.seen[0][0, :(frames - 1) * 4] == 0)


def test_noise_stream_layout():
    cfg = SmoothingConfig(0.25, 2, 9)
    r = rollout(CartPole(), lean_right, cfg, episode_index=17)
    rng = episode_rng(9, 17)
    start = rng.uniform(-0.05, 0.05, size=4)
    noise = 0.25 * rng.standard_normal((200, 4))
    assert np.array_equal(r.clean[0], start)
    assert np.array_equal(r.delta, noise[:r.length])


def test_chunking_and_threads_do_not_change_results():
    env = CartPole()
    cfg = SmoothingConfig(0.2, 3, 4)
    a = run_episodes(env, lean_right, cfg, 40, threads=1)
    b = run_episodes(env, lean_right, cfg, 40, threads=4, chunk=7)
    c = [rollout(env, lean_right, cfg, episode_index=i) for i in range(40)]
    for x, y, z in zip(a, b, c):
        assert x.to_json() == y.to_json() == z.to_json()


def test_sigma_zero_matches_plain_loop():
    env = CartPole()
    r = rollout(env, lean_right, SmoothingConfig(0.0, 2, 3), episode_index=5)
    st = env.reset(episode_rng(3, 5))
    buf = FrameBuffer(4, 2)
    total = 0.0
    obs = observe(buf, st.features, None, SmoothingConfig(0.0, 2), np.random.default_rng(0))
    while not st.done:
        st, rew = env.step(st, int(lean_right(obs[None])[0]))
        total += rew
        if not st.done:
            obs = observe(buf, st.features, None, SmoothingConfig(0.0, 2), np.random.default_rng(0))
    assert r.total_reward == total


def test_total_reward_is_survival_time():
    for r in run_episodes(CartPole(), lean_right, SmoothingConfig(0.5, 1, 0), 30):
        assert r.total_reward == r.length == len(r.actions)


def test_budget_invariant_random_adversary():
    budgets = np.linspace(0.0, 2.0, 64)
    rolls = run_episodes(CartPole(), lean_right, SmoothingConfig(0.1, 2, 0), 64, RandomSpender(0), budgets)
    for r, b in zip(rolls, budgets):
        assert np.sum(r.eps**2) <= b**2 + 1e-12
        assert r.budget == b


def test_overspending_adversary_raises():
    class Greedy:
        def perturb(self, view):
            return np.full(view.clean_frame.shape, 1.0)

    with pytest.raises(BudgetExceeded):
        run_episodes(CartPole(), lean_right, SmoothingConfig(0.1, 1, 0), 3, Greedy(), 1.0)


def test_adversary_sees_only_the_past():
    seen = []

    class Spy:
        def perturb(self, view):
            seen.append((view.t, view.noisy_history.shape[1], view.clean_context.shape, view.dirty_context.shape))
            return np.zeros_like(view.clean_frame)

    rollout(CartPole(), lean_right, SmoothingConfig(0.1, 3, 0), Spy(), 1.0)
    for t, hist, cc, dc in seen:
        assert hist == t and cc == dc == (1, 8)


def test_worstcase_threshold_success_rate():
    # a1 iff the perceived observation is at most omega; P = Phi((omega - o1) / sigma)
    sigma, omega, o1 = 0.5, 0.3, 0.1
    env = WorstCase(1.0, 1, [o1])
    pol = lambda x: np.where(x[:, 0] <= omega, 0, 1)
    n = 1_000_000
    rate = monte_carlo(env, pol, SmoothingConfig(sigma, 1, 0), n)[0].totals.mean()
    p = float(std_normal_cdf((omega - o1) / sigma))
    assert abs(rate - p) <= 3 * math.sqrt(p * (1 - p) / n)


def test_transcript_round_trip(tmp_path):
    rolls = run_episodes(CartPole(), lean_right, SmoothingConfig(0.2, 2, 1), 5, RandomSpender(1), 0.5)
    path = tmp_path / "t.jsonl"
    write_transcripts(path, rolls)
    back = read_transcripts(path)
    for a, b in zip(rolls, back):
        assert a.to_json() == b.to_json()
        assert np.array_equal(a.eps, b.eps) and np.array_equal(a.delta, b.delta)
    assert np.array_equal(read_total_rewards(path), total_rewards(rolls))


def test_monte_carlo_batches_match_engine_semantics():
    env = CartPole()
    batches = monte_carlo(env, lean_right, SmoothingConfig(0.2, 2, 0), 1000, chunk=300)
    assert [len(b.lengths) for b in batches] == [300, 300, 300, 100]
    for b in batches:
        assert np.array_equal(b.totals, b.lengths.astype(float))
    with pytest.raises(BadConfig):
        monte_carlo(env, lean_right, SmoothingConfig(0.2, 2, 0), 0)
