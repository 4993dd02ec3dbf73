"""Monte Carlo checks of the smoothing bound on small games where the answer is known.

* ``tightness_experiment``: a one-step game with a threshold policy and an
  adversary that dumps the whole budget on the first coordinate. Its success
  rate equals the bound exactly, so the bound cannot be improved.
* ``soundness_search``: a two-step 1-D game attacked by every strategy in a grid
  of deterministic adaptive adversaries (the second offset may depend on the
  first noisy observation). No strategy should push success below the bound.
* ``nonisometry_demo``: an adaptive second offset makes the joint law of the
  smoothed observations non-Gaussian, which is why the bound needs more than a
  direct appeal to isotropic Gaussian smoothing.

All comparisons are statistical; tolerances are multiples of binomial standard errors.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .certify import std_normal_cdf, std_normal_ppf, theorem1_lower
from .env import TOY_PREDICATES, ToyTwoStep, WorstCase
from .errors import BadConfig, GridInfeasible, InvalidSigma
from .smoothing import LEDGER_TOL, AdversaryView, SmoothingConfig, monte_carlo

MODES = ("tightness", "soundness", "nonisometry")


@dataclass
class ThresholdPolicy:
    """Action ``a1`` iff the perceived first coordinate is at most ``omega``, else ``a2``."""

    omega: float
    o1: float = 0.0
    actions: tuple[int, int] = (0, 1)

    @classmethod
    def for_probability(cls, p: float, sigma: float, o1: float = 0.0, actions=(0, 1)) -> "ThresholdPolicy":
        """Threshold ``o1 + sigma * Phi^-1(p)``: clean probability of ``a1`` is exactly ``p``."""
        return cls(o1 + sigma * float(std_normal_ppf(p)), o1, tuple(actions))

    def __call__(self, stacked) -> np.ndarray:
        x = np.asarray(stacked, dtype=np.float64)
        first = x[:, 0] if x.ndim == 2 else x[:1]
        return np.where(first <= self.omega, self.actions[0], self.actions[1])


@dataclass
class StructuredAdversary:
    """Spends the whole budget on the first coordinate of the first offset."""

    budget: float

    def perturb(self, view: AdversaryView) -> np.ndarray:
        eps = np.zeros_like(view.clean_frame)
        if view.t == 0:
            eps[:, 0] = self.budget
        return eps


def _binom_se(p, n):
    return math.sqrt(max(p * (1.0 - p), 0.0) / n)


@dataclass
class TightnessResult:
    p: float
    budget: float
    sigma: float
    n: int
    rate: float
    bound: float

    @property
    def std_error(self) -> float:
        return _binom_se(self.bound, self.n)

    @property
    def z(self) -> float:
        se = self.std_error
        return 0.0 if se == 0 else (self.rate - self.bound) / se

    @property
    def passed(self) -> bool:
        return abs(self.rate - self.bound) <= 3.0 * self.std_error + 1e-15


def tightness_experiment(p: float, budget: float, sigma: float, n_episodes: int = 1_000_000,
                         seed: int = 0, obs_dim: int = 1, o1: float = 0.0,
                         threads: int | None = 1) -> TightnessResult:
    """Success rate of the threshold policy under the structured adversary, and the bound it should hit."""
    if not 0 < p < 1:
        raise BadConfig("p must be in (0, 1)")
    if not sigma > 0:
        raise InvalidSigma("sigma must be > 0")
    clean = np.zeros(obs_dim)
    clean[0] = o1
    env = WorstCase(1.0, obs_dim, clean)
    policy = ThresholdPolicy.for_probability(p, sigma, o1)
    adv = StructuredAdversary(budget) if budget > 0 else None
    batches = monte_carlo(env, policy, SmoothingConfig(sigma, 1, seed), n_episodes, adv, budget, threads=threads)
    wins = sum(int(np.sum(b.totals == 1.0)) for b in batches)
    return TightnessResult(p, budget, sigma, n_episodes, wins / n_episodes, float(theorem1_lower(p, budget, sigma)))


# ---------------------------------------------------------------------------
# soundness on the two-step toy game


@dataclass
class AdaptiveAdversaryGrid:
    """One deterministic 2-step strategy: fixed ``eps1``, then ``eps2`` looked up by history bucket.

    The history is the first offset ``eta1 = eps1 + delta1``; buckets are cut at
    ``edges`` (one fewer than the table length).
    """

    budget: float
    eps1: float
    edges: np.ndarray
    table: np.ndarray

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=np.float64)
        self.table = np.asarray(self.table, dtype=np.float64)
        if len(self.table) != len(self.edges) + 1:
            raise BadConfig("need one table entry per bucket")
        if self.eps1**2 + np.max(self.table**2) > self.budget**2 + LEDGER_TOL:
            raise GridInfeasible(f"strategy exceeds budget {self.budget}")

    def bucket(self, eta1) -> np.ndarray:
        return np.searchsorted(self.edges, eta1, side="right")

    def perturb(self, view: AdversaryView) -> np.ndarray:
        n = len(view.rows)
        if view.t == 0:
            return np.full((n, 1), self.eps1)
        eta1 = view.noisy_history[:, 0, 0] - view.clean_history[:, 0, 0]
        return self.table[self.bucket(eta1)].reshape(n, 1)


def strategy_grid(budget: float, sigma: float, eps1_points: int = 21, eps2_points: int = 11,
                  buckets: int = 8):
    """The candidate values: ``eps1`` choices, and for each the bucket edges and ``eps2`` choices."""
    if budget < 0:
        raise BadConfig("budget must be >= 0")
    out = []
    for e1 in np.linspace(-budget, budget, eps1_points):
        rem = math.sqrt(max(budget**2 - e1**2, 0.0))
        e2 = np.linspace(-rem, rem, eps2_points)
        if e1**2 + np.max(e2**2) > budget**2 + LEDGER_TOL:
            raise GridInfeasible(f"grid point eps1={e1} exceeds budget {budget}")
        # equal-probability buckets of eta1 ~ N(eps1, sigma^2)
        edges = e1 + sigma * std_normal_ppf(np.arange(1, buckets) / buckets)
        out.append((float(e1), edges, e2))
    return out


@dataclass
class SoundnessResult:
    predicate: str
    budget: float
    sigma: float
    theta: float
    p0: float  # clean success, fresh sample
    bound: float
    search_min: float  # min over the full grid on the search sample (optimistic for the adversary)
    search_min_static: float  # same, restricted to strategies ignoring the history
    min_rate: float  # the selected strategy re-run on a fresh sample
    n_search: int
    n_eval: int
    strategy: AdaptiveAdversaryGrid | None = None
    grid_size: int = 0

    @property
    def combined_error(self) -> float:
        """Standard error of ``min_rate - bound``, with the bound's error by the delta method."""
        se_rate = _binom_se(self.min_rate, self.n_eval)
        p = min(max(self.p0, 1e-12), 1 - 1e-12)
        z = float(std_normal_ppf(p))
        slope = stats.norm.pdf(z - self.budget / self.sigma) / stats.norm.pdf(z)
        se_bound = slope * _binom_se(self.p0, self.n_eval)
        return math.sqrt(se_rate**2 + se_bound**2)

    @property
    def passed(self) -> bool:
        return self.min_rate >= self.bound - 3.0 * self.combined_error


def _toy_policy(theta):
    return ThresholdPolicy(theta, 0.0, (1, 0))


def soundness_search(predicate: str = "and", budget: float = 0.5, sigma: float = 0.5, theta: float = 0.0,
                     n_episodes: int = 200_000, eps1_points: int = 21, eps2_points: int = 11,
                     buckets: int = 8, seed: int = 0, threads: int | None = 1) -> SoundnessResult:
    """Search the adaptive grid for the strategy minimizing success, then re-measure it.

    The toy policy plays action 1 at each step iff the perceived observation is
    at most ``theta``; clean observations are both 0. The grid is separable by
    bucket, so the exhaustive minimum over all ``eps2_points ** buckets`` tables
    per ``eps1`` is found bucket by bucket with common random numbers. Picking
    the minimum biases that estimate toward the adversary, so the chosen
    strategy, and the clean success ``p0``, are re-estimated through the full
    rollout engine on fresh noise.
    """
    if not sigma > 0:
        raise InvalidSigma("sigma must be > 0")
    pred = TOY_PREDICATES[predicate] if isinstance(predicate, str) else predicate
    rng = np.random.default_rng([seed, 0x50])
    d1 = sigma * rng.standard_normal(n_episodes)
    d2 = sigma * rng.standard_normal(n_episodes)

    best = None
    best_static = math.inf
    grid = strategy_grid(budget, sigma, eps1_points, eps2_points, buckets)
    for e1, edges, e2 in grid:
        eta1 = e1 + d1
        a1 = (eta1 <= theta).astype(int)
        b = np.searchsorted(edges, eta1, side="right")
        # wins[j, k]: successes in bucket k when eps2 = e2[j]
        wins = np.stack([np.bincount(b, weights=pred(a1, ((c + d2) <= theta).astype(int)), minlength=buckets)
                         for c in e2])
        pick = np.argmin(wins, axis=0)
        total = float(wins[pick, np.arange(buckets)].sum()) / n_episodes
        best_static = min(best_static, float(wins.sum(axis=1).min()) / n_episodes)
        if best is None or total < best[0]:
            best = (total, AdaptiveAdversaryGrid(budget, e1, edges, e2[pick]))

    search_min, strategy = best
    env = ToyTwoStep(predicate if isinstance(predicate, str) else pred)
    cfg = SmoothingConfig(sigma, 1, seed + 1)
    policy = _toy_policy(theta)
    clean = monte_carlo(env, policy, cfg, n_episodes, threads=threads)
    p0 = sum(float(b.totals.sum()) for b in clean) / n_episodes
    attacked = monte_carlo(env, policy, cfg, n_episodes, strategy, budget, threads=threads)
    rate = sum(float(b.totals.sum()) for b in attacked) / n_episodes
    bound = float(theorem1_lower(p0, budget, sigma))
    name = predicate if isinstance(predicate, str) else getattr(predicate, "__name__", "custom")
    return SoundnessResult(name, budget, sigma, theta, p0, bound, search_min, best_static, rate,
                           n_episodes, n_episodes, strategy, len(grid) * eps2_points**buckets)


# ---------------------------------------------------------------------------
# non-isometry of adaptive smoothing


class SignRule:
    """``eps2 = c * sign(eta1 - E[eta1])``; ``E[eta1] = 0`` as the first offset is zero."""

    def __init__(self, c: float):
        self.c = float(c)

    def perturb(self, view: AdversaryView) -> np.ndarray:
        n = len(view.rows)
        if view.t == 0:
            return np.zeros((n, 1))
        eta1 = view.noisy_history[:, 0, 0] - view.clean_history[:, 0, 0]
        return (self.c * np.where(eta1 >= 0, 1.0, -1.0)).reshape(n, 1)


class IndependentRule:
    """``eps2 = c * s`` with a random sign ``s`` drawn independently of the noise."""

    def __init__(self, c: float, seed: int = 0):
        self.c = float(c)
        self.seed = seed

    def perturb(self, view: AdversaryView) -> np.ndarray:
        n = len(view.rows)
        if view.t == 0:
            return np.zeros((n, 1))
        rng = np.random.default_rng([self.seed, int(view.episode_indices[0]), 0x51])
        return (self.c * rng.choice([-1.0, 1.0], size=n)).reshape(n, 1)


RULES = {"sign": SignRule, "independent": IndependentRule}


@dataclass
class NonIsometryResult:
    sigma: float
    c: float
    rule: str
    samples: np.ndarray  # (n, 2) perceived observations
    covariance: np.ndarray
    expected_offdiag: float
    kurtosis_second: float
    expected_kurtosis_second: float
    extra: dict = field(default_factory=dict)

    @property
    def offdiag(self) -> float:
        return float(self.covariance[0, 1])

    @property
    def offdiag_std_error(self) -> float:
        x = self.samples - self.samples.mean(axis=0)
        return float(np.std(x[:, 0] * x[:, 1]) / math.sqrt(len(x)))


def mixture_kurtosis(c: float, sigma: float) -> float:
    """Kurtosis of an equal mixture of ``N(-c, s^2)`` and ``N(c, s^2)``."""
    num = c**4 + 6 * c**2 * sigma**2 + 3 * sigma**4
    return num / (c**2 + sigma**2) ** 2


def nonisometry_demo(sigma: float = 1.0, c: float = 1.0, rule: str = "sign", n_samples: int = 100_000,
                     seed: int = 0) -> NonIsometryResult:
    """Perceived ``(o1 + eta1, o2 + eta2)`` on the toy game with clean observations 0, under ``rule``."""
    if not sigma > 0:
        raise InvalidSigma("sigma must be > 0")
    if rule not in RULES:
        raise BadConfig(f"unknown rule {rule!r}; choose from {tuple(RULES)}")
    adv = SignRule(c) if rule == "sign" else IndependentRule(c, seed)
    env = ToyTwoStep("and")
    batches = monte_carlo(env, lambda x: np.zeros(len(x), dtype=np.int64), SmoothingConfig(sigma, 1, seed),
                          n_samples, adv, abs(c))
    samples = np.concatenate([b.noisy[:, :, 0] for b in batches])
    cov = np.cov(samples.T)
    expected = c * sigma * math.sqrt(2.0 / math.pi) if rule == "sign" else 0.0
    kurt = float(stats.kurtosis(samples[:, 1], fisher=False))
    return NonIsometryResult(sigma, c, rule, samples, cov, expected, kurt, mixture_kurtosis(c, sigma))


def clean_success_toy(predicate: str, theta: float, sigma: float) -> float:
    """Exact clean success of the toy game (independent steps)."""
    q = float(std_normal_cdf(theta / sigma))
    a = np.array([[0, 0], [0, 1], [1, 0], [1, 1]])
    probs = np.where(a == 1, q, 1 - q).prod(axis=1)
    return float(np.sum(probs * TOY_PREDICATES[predicate](a[:, 0], a[:, 1])))
