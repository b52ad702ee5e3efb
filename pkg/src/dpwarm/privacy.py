"""Composition arithmetic, Gaussian noise calibration, covering nets and the
exponential mechanism."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import brentq

from .core import PrivacyBudget, RngStream

# slack for float round-off when comparing recomputed totals against a budget
_REL_SLACK = 1e-9


class OverBudgetError(ValueError):
    pass


class CalibrationError(ValueError):
    pass


class FeasibilityError(ValueError):
    pass


# composition ----------------------------------------------------------------


def basic_compose(a: PrivacyBudget, b: PrivacyBudget) -> PrivacyBudget:
    eps, delta = a.epsilon + b.epsilon, a.delta + b.delta
    if delta >= 1:
        raise OverBudgetError(f"composed delta {delta} is not below 1")
    return PrivacyBudget(eps, delta)


def advanced_compose(per_step: PrivacyBudget, T: int, delta_prime: float) -> PrivacyBudget:
    """T-fold adaptive composition of an (eps, delta)-DP step.

    Returns (sqrt(2T ln(1/delta')) eps + T eps (e^eps - 1), T delta + delta').
    """
    if not 0 < delta_prime < 1:
        raise ValueError("delta_prime must lie in (0, 1)")
    if T < 0:
        raise ValueError("T must be nonnegative")
    eps = per_step.epsilon
    eps_total = math.sqrt(2 * T * math.log(1 / delta_prime)) * eps + T * eps * math.expm1(eps)
    delta_total = T * per_step.delta + delta_prime
    if delta_total >= 1:
        raise OverBudgetError(f"composed delta {delta_total} is not below 1")
    return PrivacyBudget(eps_total, delta_total)


def invert_advanced(target_eps: float, T: int, delta_prime: float) -> float:
    """Largest per-step epsilon whose T-fold advanced composition is <= target_eps."""
    if target_eps <= 0 or T <= 0:
        return 0.0
    c = math.sqrt(2 * T * math.log(1 / delta_prime))

    def total(e):
        return c * e + T * e * math.expm1(e)

    hi = target_eps / c
    e = brentq(lambda x: total(x) - target_eps, 0.0, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps)
    # step down until the forward formula is within budget despite rounding
    while total(e) > target_eps:
        e = np.nextafter(e, 0.0)
    return float(e)


# ledger ---------------------------------------------------------------------


RULES = ("basic", "advanced")


@dataclass(frozen=True)
class LedgerEntry:
    """One stage's privacy spend.

    ``budget`` is what the stage claims. When ``steps`` is set the stage is a
    ``steps``-fold composition of ``per_step`` under ``rule`` (with
    ``delta_prime`` for the advanced rule), and the claim is rechecked from
    those parts.
    """

    stage: str
    budget: PrivacyBudget
    rule: str = "basic"
    steps: int = 1
    per_step: Optional[PrivacyBudget] = None
    delta_prime: float = 0.0

    def recompute(self) -> PrivacyBudget:
        if self.rule not in RULES:
            raise ValueError(f"unknown composition rule {self.rule!r}")
        if self.per_step is None:
            return self.budget
        if self.rule == "basic":
            return PrivacyBudget(self.steps * self.per_step.epsilon, min(self.steps * self.per_step.delta, 1 - 1e-300))
        return advanced_compose(self.per_step, self.steps, self.delta_prime)

    def rule_label(self) -> str:
        if self.per_step is None:
            return self.rule
        label = f"{self.rule}:T={self.steps}:eps_step={self.per_step.epsilon!r}:delta_step={self.per_step.delta!r}"
        if self.rule == "advanced":
            label += f":delta_prime={self.delta_prime!r}"
        return label


@dataclass(frozen=True)
class SpendLedger:
    """Stage entries composed with each other by basic composition."""

    entries: tuple = ()
    global_budget: Optional[PrivacyBudget] = None
    total: PrivacyBudget = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        eps = sum(e.budget.epsilon for e in self.entries)
        delta = sum(e.budget.delta for e in self.entries)
        object.__setattr__(self, "total", PrivacyBudget(eps, min(delta, np.nextafter(1.0, 0))))

    @property
    def over_budget(self) -> bool:
        g = self.global_budget
        return g is not None and not _within(self.total, g)

    def extend(self, *others: "SpendLedger | LedgerEntry", prefix: str = "") -> "SpendLedger":
        entries = list(self.entries)
        for o in others:
            items = o.entries if isinstance(o, SpendLedger) else (o,)
            for e in items:
                entries.append(LedgerEntry(prefix + e.stage, e.budget, e.rule, e.steps, e.per_step, e.delta_prime))
        return SpendLedger(tuple(entries), self.global_budget)

    def to_text(self) -> str:
        lines = ["stage, epsilon, delta, rule"]
        for e in self.entries:
            lines.append(f"{e.stage}, {e.budget.epsilon!r}, {e.budget.delta!r}, {e.rule_label()}")
        lines.append(f"total, {self.total.epsilon!r}, {self.total.delta!r}, basic")
        return "\n".join(lines) + "\n"


def _within(a: PrivacyBudget, b: PrivacyBudget) -> bool:
    return (a.epsilon <= b.epsilon * (1 + _REL_SLACK) + 1e-15
            and a.delta <= b.delta * (1 + _REL_SLACK) + 1e-300)


def verify_budget(ledger: SpendLedger, global_budget: PrivacyBudget) -> bool:
    """Recompute every entry from its parts and compare the total to ``global_budget``.

    Fails if any stage's recomputed spend exceeds its claim or if the basic
    composition of the stage claims exceeds the global budget.
    """
    eps = delta = 0.0
    for e in ledger.entries:
        spent = e.recompute()
        if not _within(spent, e.budget):
            return False
        eps += e.budget.epsilon
        delta += e.budget.delta
    if delta >= 1:
        return False
    return _within(PrivacyBudget(eps, delta), global_budget)


# Gaussian calibration ---------------------------------------------------------


def calibrate_sgd_noise(L: float, T: int, n: int, budget: PrivacyBudget) -> float:
    """Per-coordinate noise variance 1000 L^2 T ln(1/delta) / (eps^2 n^2)."""
    if budget.delta <= 0:
        raise ValueError("delta must be positive for Gaussian noise calibration")
    if L < 0 or T <= 0 or n <= 0 or budget.epsilon <= 0:
        raise ValueError("L must be >= 0 and T, n, epsilon positive")
    return 1000.0 * L * L * T * math.log(1.0 / budget.delta) / (budget.epsilon ** 2 * n * n)


def gaussian_multiplier(step: PrivacyBudget) -> float:
    """Noise std per unit of l2 sensitivity for an (eps, delta)-DP Gaussian mechanism.

    Classical bound sqrt(2 ln(1.25/delta)) / eps, valid for eps < 1.
    """
    if not 0 < step.epsilon < 1:
        raise CalibrationError(
            f"per-step epsilon {step.epsilon:.4g} outside (0, 1); use more iterations or a smaller budget")
    if step.delta <= 0:
        raise CalibrationError("per-step delta must be positive")
    return math.sqrt(2.0 * math.log(1.25 / step.delta)) / step.epsilon


def split_steps(budget: PrivacyBudget, T: int):
    """Per-step budget for T adaptive Gaussian steps and the entry recording it.

    Half of delta goes to the advanced-composition slack delta', the other half
    is shared across steps. The per-step epsilon is the larger of the basic and
    advanced inversions.
    """
    if budget.epsilon <= 0:
        raise CalibrationError("no finite Gaussian noise achieves epsilon = 0")
    if not 0 < budget.delta < 1:
        raise CalibrationError("Gaussian calibration needs delta in (0, 1)")
    if T < 1:
        raise CalibrationError("need at least one step")
    delta_prime = budget.delta / 2
    adv = invert_advanced(budget.epsilon, T, delta_prime)
    basic = budget.epsilon / T
    if adv > basic:
        step = PrivacyBudget(adv, budget.delta / (2 * T))
        rule = "advanced"
    else:
        step = PrivacyBudget(basic, budget.delta / T)
        rule = "basic"
        delta_prime = 0.0
    return step, rule, delta_prime


def gaussian_steps_entry(stage: str, budget: PrivacyBudget, T: int):
    """(noise multiplier, ledger entry) for T Gaussian steps sharing ``budget``."""
    step, rule, delta_prime = split_steps(budget, T)
    mult = gaussian_multiplier(step)
    return mult, LedgerEntry(stage, budget, rule, T, step, delta_prime)


def calibrate_sgd_accountant(L: float, T: int, b: int, n: int, budget: PrivacyBudget, stage="dp_sgd"):
    """Noise variance for T minibatch steps with l2 sensitivity 2L/min(b, n), via the ledger."""
    mult, entry = gaussian_steps_entry(stage, budget, T)
    sens = 2.0 * L / min(b, n)
    return (sens * mult) ** 2, entry


@dataclass(frozen=True)
class SpiderNoise:
    sigma1_sq: float
    sigma2_sq: float
    sigma2hat_sq: float
    entry: LedgerEntry


def calibrate_spider_noise(L: float, beta: float, cfg, n: int, budget: PrivacyBudget, stage="dp_spider") -> SpiderNoise:
    """Noise variances for every step of the variance-reduced loop.

    Each of the T steps is a Gaussian mechanism with the same per-step budget.
    Restart steps average b1 gradients bounded by L (sensitivity 2L/b1).
    Increment steps average gradient differences whose sensitivity is
    2 beta |w_t - w_{t-1}| / b2 by smoothness and at most 4L/b2 by
    Lipschitzness; the second bound is the cap sigma2hat.
    """
    mult, entry = gaussian_steps_entry(stage, budget, cfg.T)
    b1, b2 = min(cfg.b1, n), min(cfg.b2, n)
    sigma1 = 2.0 * L / b1 * mult
    sigma2 = 2.0 * beta / b2 * mult
    sigma2hat = 4.0 * L / b2 * mult
    return SpiderNoise(sigma1 ** 2, sigma2 ** 2, sigma2hat ** 2, entry)


# covering nets ----------------------------------------------------------------


@dataclass(frozen=True)
class CandidateNet:
    points: np.ndarray
    radius: float
    ball_radius: float

    def __len__(self):
        return self.points.shape[0]


DEFAULT_NET_CAP = 10 ** 6


def net_grid_size(ball_radius: float, granularity: float, d: int) -> int:
    spacing = 2.0 * granularity / math.sqrt(d)
    per_axis = 2 * int(math.floor((ball_radius + granularity) / spacing)) + 1
    return per_axis ** d


def build_net(ball_radius: float, granularity: float, d: int, cap: int = DEFAULT_NET_CAP) -> CandidateNet:
    """Grid net covering the closed ball of radius ``ball_radius`` at ``granularity``.

    Grid spacing is 2 r / sqrt(d), so every point is within r of a grid node.
    Nodes just outside the ball (norm <= R + r) are projected onto it, which
    keeps the covering property since projection onto a convex set is
    nonexpansive.
    """
    if granularity <= 0 or ball_radius <= 0:
        raise ValueError("granularity and ball_radius must be positive")
    if d < 1:
        raise ValueError("d must be positive")
    if granularity >= ball_radius:
        return CandidateNet(np.zeros((1, d)), granularity, ball_radius)
    size = net_grid_size(ball_radius, granularity, d)
    if size > cap:
        raise FeasibilityError(f"net needs {size} grid nodes before filtering, above the cap of {cap}")
    spacing = 2.0 * granularity / math.sqrt(d)
    k = int(math.floor((ball_radius + granularity) / spacing))
    axis = np.arange(-k, k + 1) * spacing
    grid = np.array(list(itertools.product(axis, repeat=d)), dtype=np.float64).reshape(-1, d)
    norms = np.linalg.norm(grid, axis=1)
    grid = grid[norms <= ball_radius + granularity]
    norms = np.linalg.norm(grid, axis=1)
    outside = norms > ball_radius
    grid[outside] *= (ball_radius / norms[outside])[:, None]
    grid = np.unique(np.round(grid, 12), axis=0)
    return CandidateNet(grid, granularity, ball_radius)


# exponential mechanism -----------------------------------------------------------


def exp_mech_probabilities(scores, sensitivity: float, epsilon: float) -> np.ndarray:
    """Selection probabilities proportional to exp(-eps * score / (2 * sensitivity))."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    if s.size == 0:
        raise ValueError("scores must be non-empty")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    if sensitivity <= 0:
        raise ValueError("sensitivity must be positive")
    if epsilon < 0:
        raise ValueError("epsilon must be nonnegative")
    logits = -epsilon * (s - s.min()) / (2.0 * sensitivity)
    p = np.exp(logits)
    return p / p.sum()


def exp_mech_sample(scores, sensitivity: float, epsilon: float, rng: RngStream, size=None):
    """Draw index(es) with lower scores favoured; inverse-CDF categorical sampling."""
    p = exp_mech_probabilities(scores, sensitivity, epsilon)
    cdf = np.cumsum(p)
    cdf[-1] = 1.0
    u = rng.generator().random(size)
    idx = np.searchsorted(cdf, u, side="right")
    idx = np.minimum(idx, p.size - 1)
    return int(idx) if size is None else idx


def exp_mech_sample_gumbel(scores, sensitivity: float, epsilon: float, rng: RngStream, size=None):
    """Gumbel-max variant; same distribution, used as a cross-check."""
    p = exp_mech_probabilities(scores, sensitivity, epsilon)
    with np.errstate(divide="ignore"):
        logp = np.log(p)
    shape = (p.size,) if size is None else (size, p.size)
    g = rng.generator().gumbel(size=shape)
    return int(np.argmax(logp + g)) if size is None else np.argmax(logp + g, axis=-1)
