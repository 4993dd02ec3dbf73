"""Lower bounds on expected episode reward under any budget-B adaptive observation adversary.

The core fact: if a 0/1 episode outcome happens with probability at least ``p``
under Gaussian smoothing with std ``sigma``, then against any adversary whose
perturbations over the whole episode have l2 norm at most ``B`` it still happens
with probability at least ``Phi(Phi^-1(p) - B/sigma)``.

Applying that to threshold events ``{reward >= x}`` bounds the adversarial
reward CDF from above, and integrating ``1 - F`` gives a lower bound on the
expected reward. Three ways to get the clean-side probability bounds are
provided: a single Clopper-Pearson bound for two-valued rewards, a DKW band on
the whole CDF, and per-threshold Clopper-Pearson bounds with a Bonferroni split.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import special, stats

from .errors import BadConfig, EmptySamples, InvalidCounts, InvalidSigma, UnboundedReward

P_CLAMP = 1e-12
# certified expectations are floored to this grid before being reported
OUTPUT_RESOLUTION = 1e-10

METHODS = ("BernoulliCP", "CdfDkw", "PerThresholdCP")


def std_normal_cdf(x):
    return special.ndtr(x)


def std_normal_ppf(p):
    return special.ndtri(p)


def _check_sigma(sigma):
    if not np.all(np.asarray(sigma) > 0):
        raise InvalidSigma("sigma must be > 0")


def _shifted(p, shift):
    p = np.asarray(p, dtype=np.float64)
    clamped = np.clip(p, P_CLAMP, 1.0 - P_CLAMP)
    out = special.ndtr(special.ndtri(clamped) + shift)
    out = np.where(p <= 0.0, 0.0, np.where(p >= 1.0, 1.0, out))
    return out if out.ndim else float(out)


def theorem1_lower(p, budget, sigma):
    """``Phi(Phi^-1(p) - B/sigma)``: the adversarial floor on a 0/1 outcome of clean probability ``p``.

    ``p`` is clamped to ``[1e-12, 1 - 1e-12]`` before inversion; ``p`` of exactly
    0 or 1 is returned unchanged. Vectorizes over array arguments.
    """
    _check_sigma(sigma)
    return _shifted(p, -np.asarray(budget, dtype=np.float64) / sigma)


def theorem1_upper(p, budget, sigma):
    """``Phi(Phi^-1(p) + B/sigma)``, the matching adversarial ceiling."""
    _check_sigma(sigma)
    return _shifted(p, np.asarray(budget, dtype=np.float64) / sigma)


def clopper_pearson_lower(k, n, alpha):
    """One-sided exact binomial lower confidence bound at level ``1 - alpha``."""
    k = np.asarray(k)
    n = np.asarray(n)
    if np.any(n < 1) or np.any(k < 0) or np.any(k > n):
        raise InvalidCounts(f"need 0 <= k <= n and n >= 1, got k={k}, n={n}")
    if not 0 < alpha <= 1:
        raise BadConfig("alpha must be in (0, 1]")
    with np.errstate(invalid="ignore"):
        lo = stats.beta.ppf(alpha, np.maximum(k, 1), n - k + 1)
    lo = np.where(k == 0, 0.0, lo)
    return lo if lo.ndim else float(lo)


def clopper_pearson_upper(k, n, alpha):
    k = np.asarray(k)
    n = np.asarray(n)
    if np.any(n < 1) or np.any(k < 0) or np.any(k > n):
        raise InvalidCounts(f"need 0 <= k <= n and n >= 1, got k={k}, n={n}")
    with np.errstate(invalid="ignore"):
        hi = stats.beta.ppf(1 - alpha, k + 1, np.maximum(n - k, 1))
    hi = np.where(k == n, 1.0, hi)
    return hi if hi.ndim else float(hi)


def dkw_half_width(m: int, alpha: float) -> float:
    return math.sqrt(math.log(2.0 / alpha) / (2.0 * m))


@dataclass
class CdfEnvelope:
    """Step-function band ``[lower(x), upper(x)]`` around an empirical CDF.

    Values are stored at the sorted distinct sample values; both bands are
    right-continuous and constant between them.
    """

    thresholds: np.ndarray
    empirical: np.ndarray
    half_width: float

    @property
    def lower_values(self) -> np.ndarray:
        return np.clip(self.empirical - self.half_width, 0.0, 1.0)

    @property
    def upper_values(self) -> np.ndarray:
        return np.clip(self.empirical + self.half_width, 0.0, 1.0)

    def _at(self, x, values, below):
        idx = np.searchsorted(self.thresholds, np.asarray(x, dtype=np.float64), side="right") - 1
        return np.where(idx >= 0, values[np.maximum(idx, 0)], below)

    def empirical_cdf(self, x):
        return self._at(x, self.empirical, 0.0)

    def lower(self, x):
        return self._at(x, self.lower_values, 0.0)

    def upper(self, x):
        return self._at(x, self.upper_values, min(self.half_width, 1.0))


def dkw_envelope(samples, alpha: float) -> CdfEnvelope:
    x = np.sort(np.asarray(samples, dtype=np.float64).ravel())
    if x.size == 0:
        raise EmptySamples("no samples")
    if not 0 < alpha <= 1:
        raise BadConfig("alpha must be in (0, 1]")
    thresholds, counts = np.unique(x, return_counts=True)
    return CdfEnvelope(thresholds, np.cumsum(counts) / x.size, dkw_half_width(x.size, alpha))


@dataclass
class BoundInputs:
    samples: np.ndarray
    alpha: float = 0.05
    sigma: float = 0.2
    budgets: Sequence[float] = (0.0,)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).ravel()
        if self.samples.size == 0:
            raise EmptySamples("no episode rewards to certify")
        if not 0 < self.alpha <= 1:
            raise BadConfig("alpha must be in (0, 1]")
        _check_sigma(self.sigma)
        self.budgets = [float(b) for b in self.budgets]
        if any(not b >= 0 for b in self.budgets):
            raise BadConfig("budgets must be >= 0")

    @property
    def n(self) -> int:
        return int(self.samples.size)


@dataclass
class Certificate:
    method: str
    budgets: np.ndarray
    lower_bounds: np.ndarray
    # per budget: thresholds x_k and the adversarial CDF ceiling at them
    envelope_thresholds: np.ndarray
    envelope_upper: list[np.ndarray] = field(default_factory=list)
    n: int = 0
    alpha: float = 0.05
    sigma: float = 0.0
    empirical_mean: float = 0.0
    reward_min: float = 0.0
    reward_max: float = 0.0

    @property
    def confidence(self) -> float:
        return 1.0 - self.alpha

    def bound_at(self, budget: float) -> float:
        i = int(np.flatnonzero(np.isclose(self.budgets, budget))[0])
        return float(self.lower_bounds[i])


def _floor_output(x):
    return np.floor(np.asarray(x) / OUTPUT_RESOLUTION) * OUTPUT_RESOLUTION


def _check_bounds(samples, reward_min, reward_max):
    if reward_min is None or reward_max is None or not (math.isfinite(reward_min) and math.isfinite(reward_max)):
        raise UnboundedReward("certification needs finite reward bounds")
    if reward_max < reward_min:
        raise BadConfig("reward_max < reward_min")
    if samples.min() < reward_min or samples.max() > reward_max:
        raise BadConfig("samples fall outside the declared reward bounds")


def certify_expected_reward(inputs: BoundInputs, method: str, reward_min: float | None,
                            reward_max: float | None) -> Certificate:
    """Certified lower bound on expected total reward, one value per budget.

    ``BernoulliCP`` needs two-valued rewards in ``{reward_min, reward_max}``.
    ``PerThresholdCP`` needs integer rewards and uses one Clopper-Pearson bound
    per unit threshold, each at level ``1 - alpha/T``. ``CdfDkw`` works for any
    bounded reward. All are exact step-function integrals (no quadrature).
    """
    x = inputs.samples
    _check_bounds(x, reward_min, reward_max)
    n, alpha, sigma = inputs.n, inputs.alpha, inputs.sigma
    budgets = np.asarray(inputs.budgets, dtype=np.float64)
    span = reward_max - reward_min
    uppers = []

    if method == "BernoulliCP":
        if not np.all((x == reward_min) | (x == reward_max)):
            raise BadConfig("BernoulliCP needs rewards in {reward_min, reward_max}")
        k = int(np.sum(x == reward_max)) if span > 0 else n
        p_lo = clopper_pearson_lower(k, n, alpha)
        adv = np.array([theorem1_lower(p_lo, b, sigma) for b in budgets])
        bounds = reward_min + span * adv
        thresholds = np.array([reward_min])
        uppers = [np.array([1.0 - a]) for a in adv]

    elif method == "PerThresholdCP":
        if not (np.all(x == np.round(x)) and float(reward_min).is_integer() and float(reward_max).is_integer()):
            raise BadConfig("PerThresholdCP needs integer rewards and integer bounds")
        levels = np.arange(reward_min + 1, reward_max + 1)  # events {R >= t}
        T = len(levels)
        if T == 0:
            bounds = np.full(len(budgets), float(reward_min))
            thresholds = np.array([reward_min])
            uppers = [np.array([1.0]) for _ in budgets]
        else:
            xs = np.sort(x)
            counts = n - np.searchsorted(xs, levels, side="left")
            p_lo = clopper_pearson_lower(counts, n, alpha / T)
            thresholds = levels - 1.0  # P(R <= t-1) = 1 - P(R >= t)
            bounds = []
            for b in budgets:
                adv = theorem1_lower(p_lo, b, sigma)
                bounds.append(reward_min + float(np.sum(adv)))
                uppers.append(1.0 - adv)
            bounds = np.array(bounds)

    elif method == "CdfDkw":
        env = dkw_envelope(x, alpha)
        # grid [reward_min, x_1, ..., x_K, reward_max]; ceiling is constant on each piece
        cuts = np.concatenate([[reward_min], env.thresholds, [reward_max]])
        widths = np.diff(cuts)
        left_upper = np.concatenate([[float(env.upper(reward_min))], env.upper_values])
        thresholds = cuts[:-1]
        bounds = []
        for b in budgets:
            f_adv = np.minimum(1.0, theorem1_upper(left_upper, b, sigma))
            bounds.append(reward_min + float(np.sum(widths * (1.0 - f_adv))))
            uppers.append(f_adv)
        bounds = np.array(bounds)

    else:
        raise BadConfig(f"unknown certification method {method!r}; choose from {METHODS}")

    bounds = np.maximum(_floor_output(bounds), reward_min)
    return Certificate(method, budgets, bounds, np.asarray(thresholds, dtype=np.float64), uppers, n, alpha,
                       sigma, float(x.mean()), float(reward_min), float(reward_max))


def default_method(reward_kind: str, samples=None, reward_min=0.0, reward_max=1.0) -> str:
    if reward_kind == "survival":
        return "PerThresholdCP"
    if samples is not None and np.all((np.asarray(samples) == reward_min) | (np.asarray(samples) == reward_max)):
        return "BernoulliCP"
    return "CdfDkw"


def default_budget_grid(sigma: float, points: int = 8) -> list[float]:
    """Zero plus a geometric grid ending at ``4 sigma``."""
    top = 4.0 * sigma
    return [0.0] + [float(v) for v in np.geomspace(top / 2 ** (points - 1), top, points)]
