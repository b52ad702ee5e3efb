"""DP-SGD, DP-SPIDER, exponential-mechanism warm starts, the two-stage
warm-start driver and confidence boosting."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Union

import numpy as np

from .core import Dataset, PrivacyBudget, RngStream
from .losses import LossModel
from .privacy import (
    CandidateNet,
    LedgerEntry,
    SpendLedger,
    calibrate_sgd_accountant,
    calibrate_sgd_noise,
    calibrate_spider_noise,
    exp_mech_sample,
    verify_budget,
)


class DivergenceError(FloatingPointError):
    def __init__(self, step: int):
        self.step = step
        super().__init__(f"iterate became non-finite at step {step}")


class BudgetConfigError(ValueError):
    pass


def project_ball(w, radius: float) -> np.ndarray:
    """Euclidean projection onto the centred ball of the given radius."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    w = np.asarray(w, dtype=np.float64)
    nrm = float(np.linalg.norm(w))
    if nrm <= radius:
        return w
    return w * (radius / nrm)


@dataclass(frozen=True)
class SgdConfig:
    T: int
    b: int
    eta: float
    sigma_sq: float
    w_init: np.ndarray
    project_radius: Optional[float] = None
    selection: str = "uniform"
    privacy: Optional[LedgerEntry] = None

    def __post_init__(self):
        object.__setattr__(self, "w_init", np.asarray(self.w_init, dtype=np.float64).reshape(-1))
        if self.T < 1 or self.b < 1 or not self.eta >= 0 or self.sigma_sq < 0:
            raise ValueError("SgdConfig needs T >= 1, b >= 1, eta >= 0 and sigma_sq >= 0")
        if self.selection not in ("uniform", "last"):
            raise ValueError(f"unknown selection {self.selection!r}")


@dataclass(frozen=True)
class SpiderConfig:
    T: int
    q: int
    b1: int
    b2: int
    eta: float
    sigma1_sq: float
    sigma2_sq: float
    sigma2hat_sq: float
    w_init: np.ndarray
    project_radius: Optional[float] = None
    selection: str = "uniform"
    privacy: Optional[LedgerEntry] = None

    def __post_init__(self):
        object.__setattr__(self, "w_init", np.asarray(self.w_init, dtype=np.float64).reshape(-1))
        if self.T < 1 or not 1 <= self.q <= max(self.T, 1):
            raise ValueError("SpiderConfig needs T >= 1 and 1 <= q <= T")
        if self.b1 < 1 or self.b2 < 1 or not self.eta >= 0:
            raise ValueError("batch sizes must be >= 1 and eta >= 0")
        if min(self.sigma1_sq, self.sigma2_sq, self.sigma2hat_sq) < 0:
            raise ValueError("noise variances must be nonnegative")
        if self.selection not in ("uniform", "last"):
            raise ValueError(f"unknown selection {self.selection!r}")


@dataclass(frozen=True)
class RunRecord:
    """Iterates of one run, the returned point and the privacy it spent.

    ``trace`` holds the initial point followed by one row per update.
    ``output_index`` points into ``trace`` (or is -1 when the output is the
    warm-start point itself).
    """

    trace: np.ndarray
    output: np.ndarray
    selection: str
    ledger: SpendLedger
    output_index: int = -1
    warm_start_point: Optional[np.ndarray] = None
    stages: tuple = field(default=())


def run_record_csv(record: RunRecord, loss: Optional[LossModel] = None, data: Optional[Dataset] = None) -> str:
    """CSV of the trace: ``step, grad_norm, iterate_norm``.

    ``grad_norm`` is the empirical gradient norm when ``loss`` and ``data``
    are given and left blank otherwise.
    """
    lines = ["step,grad_norm,iterate_norm"]
    for t, w in enumerate(record.trace):
        g = "" if loss is None or data is None else repr(float(np.linalg.norm(loss.grad(w, data))))
        lines.append(f"{t},{g},{float(np.linalg.norm(w))!r}")
    return "\n".join(lines) + "\n"


def write_run_record(record: RunRecord, directory, loss: Optional[LossModel] = None,
                     data: Optional[Dataset] = None, name: str = "run") -> Path:
    """Write ``<name>.csv`` and ``<name>_ledger.txt`` into ``directory``."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{name}.csv"
    path.write_text(run_record_csv(record, loss, data))
    (out / f"{name}_ledger.txt").write_text(record.ledger.to_text())
    return path


def _draw_batch(gen: np.random.Generator, n: int, b: int):
    # b >= n means the deterministic full batch
    if b >= n:
        return None
    return gen.integers(0, n, size=b)


def _ledger_for(entry: Optional[LedgerEntry]) -> SpendLedger:
    return SpendLedger(() if entry is None else (entry,))


def _select(gen, trace, first, last, selection):
    # "last" is the final computed iterate
    if selection == "last":
        return trace.shape[0] - 1
    return first + int(gen.integers(0, last - first + 1))


def dp_sgd(loss: LossModel, data: Dataset, cfg: SgdConfig, rng: RngStream) -> RunRecord:
    """Noisy minibatch gradient descent.

    Each step draws a batch of ``cfg.b`` rows uniformly with replacement (the
    whole dataset when ``b >= n``), adds N(0, sigma_sq I) to the mean
    gradient and moves by ``-eta``; iterates are projected when
    ``project_radius`` is set. The output is uniform over w_1..w_T, where w_1
    is the initial point.
    """
    gen = rng.generator()
    d = data.d
    w = cfg.w_init.copy()
    if w.size != d:
        raise ValueError(f"w_init has dimension {w.size}, data has {d}")
    if cfg.project_radius is not None:
        w = project_ball(w, cfg.project_radius)
    sigma = math.sqrt(cfg.sigma_sq)
    trace = np.empty((cfg.T + 1, d))
    trace[0] = w
    for t in range(cfg.T):
        idx = _draw_batch(gen, data.n, cfg.b)
        noise = gen.standard_normal(d) * sigma
        w = w - cfg.eta * (loss.grad(w, data, idx) + noise)
        if cfg.project_radius is not None:
            w = project_ball(w, cfg.project_radius)
        if not np.all(np.isfinite(w)):
            raise DivergenceError(t + 1)
        trace[t + 1] = w
    k = _select(gen, trace, 0, cfg.T - 1, cfg.selection)
    return RunRecord(trace, trace[k].copy(), cfg.selection, _ledger_for(cfg.privacy), k)


def spider_noise_variance(sigma2_sq: float, sigma2hat_sq: float, step_sq: float) -> float:
    """Per-coordinate variance of increment-step noise: min(sigma2^2 |dw|^2, cap)."""
    return min(sigma2_sq * step_sq, sigma2hat_sq)


def dp_spider(loss: LossModel, data: Dataset, cfg: SpiderConfig, rng: RngStream) -> RunRecord:
    """Noisy SPIDER: fresh noisy batch gradients every ``q`` steps, noisy
    gradient increments in between, output uniform over w_1..w_T."""
    gen = rng.generator()
    d = data.d
    w = cfg.w_init.copy()
    if w.size != d:
        raise ValueError(f"w_init has dimension {w.size}, data has {d}")
    if cfg.project_radius is not None:
        w = project_ball(w, cfg.project_radius)
    sigma1 = math.sqrt(cfg.sigma1_sq)
    trace = np.empty((cfg.T + 1, d))
    trace[0] = w
    w_prev = w
    est = None
    for t in range(cfg.T):
        if t % cfg.q == 0:
            idx = _draw_batch(gen, data.n, cfg.b1)
            noise = gen.standard_normal(d) * sigma1
            est = loss.grad(w, data, idx) + noise
        else:
            idx = _draw_batch(gen, data.n, cfg.b2)
            step = w - w_prev
            var = spider_noise_variance(cfg.sigma2_sq, cfg.sigma2hat_sq, float(step @ step))
            noise = gen.standard_normal(d) * math.sqrt(var)
            est = est + (loss.grad(w, data, idx) - loss.grad(w_prev, data, idx) + noise)
        w_prev = w
        w = w - cfg.eta * est
        if cfg.project_radius is not None:
            w = project_ball(w, cfg.project_radius)
        if not np.all(np.isfinite(w)):
            raise DivergenceError(t + 1)
        trace[t + 1] = w
    k = _select(gen, trace, 1, cfg.T, cfg.selection)
    return RunRecord(trace, trace[k].copy(), cfg.selection, _ledger_for(cfg.privacy), k)


# calibrated configurations ----------------------------------------------------


def default_sgd_eta(D: float, T: int, L: float, d: int, sigma_sq: float) -> float:
    """Step size D / sqrt(T (L^2 + d sigma^2)) used for quasar-convex risk bounds."""
    return D / math.sqrt(T * (L * L + d * sigma_sq))


def sgd_config(loss: LossModel, n: int, d: int, budget: PrivacyBudget, T: int, b: int, w_init,
               eta: Optional[float] = None, project_radius: Optional[float] = None,
               calibration: str = "accountant", selection: str = "uniform", stage: str = "dp_sgd") -> SgdConfig:
    """SgdConfig with noise calibrated to ``budget``.

    ``calibration="accountant"`` composes T Gaussian steps of sensitivity
    2L/min(b, n) through the ledger; ``"formula"`` uses the closed-form
    variance 1000 L^2 T ln(1/delta) / (eps^2 n^2).
    """
    L = loss.metadata.L
    if calibration == "accountant":
        sigma_sq, entry = calibrate_sgd_accountant(L, T, b, n, budget, stage=stage)
    elif calibration == "formula":
        sigma_sq = calibrate_sgd_noise(L, T, n, budget)
        entry = LedgerEntry(stage, budget, "basic")
    else:
        raise ValueError(f"unknown calibration {calibration!r}")
    if eta is None:
        eta = default_sgd_eta(loss.metadata.D, T, L, d, sigma_sq)
    return SgdConfig(T, b, eta, sigma_sq, w_init, project_radius, selection, entry)


def spider_config(loss: LossModel, n: int, budget: PrivacyBudget, T: int, q: int, b1: int, b2: int,
                  eta: float, w_init, project_radius: Optional[float] = None,
                  selection: str = "uniform", stage: str = "dp_spider") -> SpiderConfig:
    probe = SpiderConfig(T, min(q, T), b1, b2, eta, 0.0, 0.0, 0.0, w_init, project_radius, selection)
    noise = calibrate_spider_noise(loss.metadata.L, loss.metadata.beta, probe, n, budget, stage=stage)
    return replace(probe, sigma1_sq=noise.sigma1_sq, sigma2_sq=noise.sigma2_sq,
                   sigma2hat_sq=noise.sigma2hat_sq, privacy=noise.entry)


# warm starts --------------------------------------------------------------------


def erm_sensitivity(loss: LossModel, n: int) -> float:
    """Score sensitivity 2 L D / n of the empirical loss under one replaced sample."""
    return 2.0 * loss.metadata.L * loss.metadata.D / n


def exp_mech_warm_start(loss: LossModel, data: Dataset, net: CandidateNet, epsilon: float, rng: RngStream) -> np.ndarray:
    """Pick a net point with probability proportional to exp(-eps n F(w) / (4 L D))."""
    if len(net) == 0:
        raise ValueError("candidate net is empty")
    scores = loss.values_at(net.points, data)
    i = exp_mech_sample(scores, erm_sensitivity(loss, data.n), epsilon, rng)
    return net.points[i].copy()


@dataclass(frozen=True)
class SgdStage:
    T: int
    eta: Optional[float] = None
    b: Optional[int] = None
    project_radius: Optional[float] = None
    calibration: str = "accountant"
    selection: str = "uniform"


@dataclass(frozen=True)
class SpiderStage:
    T: int
    q: int
    eta: float
    b1: Optional[int] = None
    b2: Optional[int] = None
    project_radius: Optional[float] = None
    selection: str = "uniform"


@dataclass(frozen=True)
class ExpMechStage:
    net: CandidateNet


Stage = Union[SgdStage, SpiderStage, ExpMechStage, None]


def run_stage(stage: Stage, loss: LossModel, data: Dataset, budget: PrivacyBudget, w_init, rng: RngStream,
              label: str) -> RunRecord:
    """Run one calibrated stage; ``T == 0`` stages return ``w_init`` and spend nothing."""
    w_init = np.asarray(w_init, dtype=np.float64).reshape(-1)
    if stage is None or (not isinstance(stage, ExpMechStage) and stage.T == 0):
        ledger = SpendLedger((LedgerEntry(label, PrivacyBudget(0.0, 0.0), "basic"),))
        return RunRecord(w_init[None, :].copy(), w_init.copy(), "none", ledger)
    if isinstance(stage, ExpMechStage):
        point = exp_mech_warm_start(loss, data, stage.net, budget.epsilon, rng)
        ledger = SpendLedger((LedgerEntry(label, PrivacyBudget(budget.epsilon, 0.0), "basic"),))
        return RunRecord(point[None, :], point, "exp_mech", ledger, 0)
    if isinstance(stage, SgdStage):
        cfg = sgd_config(loss, data.n, data.d, budget, stage.T, stage.b or data.n, w_init, stage.eta,
                         stage.project_radius, stage.calibration, stage.selection, stage=label)
        return dp_sgd(loss, data, cfg, rng)
    if isinstance(stage, SpiderStage):
        cfg = spider_config(loss, data.n, budget, stage.T, stage.q, stage.b1 or data.n, stage.b2 or data.n,
                            stage.eta, w_init, stage.project_radius, stage.selection, stage=label)
        return dp_spider(loss, data, cfg, rng)
    raise TypeError(f"unsupported stage {stage!r}")


def warm_start(loss: LossModel, data: Dataset, stage_a: Stage, stage_b: Union[SgdStage, SpiderStage],
               split, rng: RngStream, w_init=None, global_budget: Optional[PrivacyBudget] = None) -> RunRecord:
    """Run stage A under (epsA, deltaA), then stage B from its output under (epsB, deltaB).

    ``split`` is ``(epsA, deltaA, epsB, deltaB)``. Stage A draws from
    ``rng.substream(1)`` and stage B from ``rng.substream(2)``, so disabling
    stage A leaves stage B's randomness untouched.
    """
    eps_a, delta_a, eps_b, delta_b = split
    budget_a, budget_b = PrivacyBudget(eps_a, delta_a), PrivacyBudget(eps_b, delta_b)
    planned = SpendLedger((LedgerEntry("warm_start_A", budget_a), LedgerEntry("warm_start_B", budget_b)))
    if global_budget is None:
        global_budget = planned.total
    if not verify_budget(planned, global_budget):
        raise BudgetConfigError(f"split {tuple(split)} exceeds the global budget {tuple(global_budget)}")
    if w_init is None:
        w_init = np.zeros(data.d)

    rec_a = run_stage(stage_a, loss, data, budget_a, w_init, rng.substream(1), "warm_start_A")
    w0 = rec_a.output
    rec_b = run_stage(stage_b, loss, data, budget_b, w0, rng.substream(2), "warm_start_B")

    ledger = SpendLedger((_collapse(rec_a.ledger, "warm_start_A"), _collapse(rec_b.ledger, "warm_start_B")),
                         global_budget)
    return RunRecord(rec_b.trace, rec_b.output, rec_b.selection, ledger, rec_b.output_index, w0.copy(),
                     stages=(rec_a, rec_b))


def _collapse(ledger: SpendLedger, label: str) -> LedgerEntry:
    if len(ledger.entries) == 1:
        e = ledger.entries[0]
        return LedgerEntry(label, e.budget, e.rule, e.steps, e.per_step, e.delta_prime)
    return LedgerEntry(label, ledger.total, "basic")


# confidence boosting ----------------------------------------------------------------


def boost_rounds(zeta: float) -> int:
    """k = ceil(log2(2 / zeta))."""
    if not 0 < zeta < 1:
        raise ValueError("zeta must lie in (0, 1)")
    return max(1, math.ceil(math.log2(2.0 / zeta) - 1e-12))


def boost_confidence(runner: Callable[[PrivacyBudget, RngStream], object], zeta: float, budget: PrivacyBudget,
                     rng: RngStream, loss: LossModel, data: Dataset) -> RunRecord:
    """Run ``runner`` k times at (eps/2k, delta/2k) and pick one output with an
    eps/2 exponential mechanism on the empirical loss.

    ``runner(budget, rng)`` returns a RunRecord or a parameter vector. The
    returned record's trace holds the k candidates.
    """
    k = boost_rounds(zeta)
    per_run = PrivacyBudget(budget.epsilon / (2 * k), budget.delta / (2 * k))
    if per_run.epsilon <= 0:
        raise BudgetConfigError("boosting needs a positive epsilon")
    candidates, entries = [], []
    for i in range(k):
        out = runner(per_run, rng.substream(1, i))
        if isinstance(out, RunRecord):
            point = out.output
            if not verify_budget(out.ledger, per_run):
                raise BudgetConfigError(f"boosting run {i} spent more than {tuple(per_run)}")
        else:
            point = np.asarray(out, dtype=np.float64).reshape(-1)
        candidates.append(point)
        entries.append(LedgerEntry(f"boost_run_{i}", per_run))
    cand = np.array(candidates)
    select_eps = budget.epsilon / 2
    scores = loss.values_at(cand, data)
    i = exp_mech_sample(scores, erm_sensitivity(loss, data.n), select_eps, rng.substream(2))
    entries.append(LedgerEntry("boost_select", PrivacyBudget(select_eps, 0.0)))
    ledger = SpendLedger(tuple(entries), budget)
    return RunRecord(cand, cand[i].copy(), "exp_mech", ledger, i)
