"""Experiment harness: the synthetic sine-bowl comparison, hyperparameter grid
search and the gradient-norm vs n scaling sweep."""

from __future__ import annotations

import csv
import io
import itertools
import math
import os
import re
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .core import Dataset, PrivacyBudget, RngStream, sample_unit_ball
from .evaluation import grad_norm
from .losses import LossModel, get_loss, label_glm_data
from .optimizers import (
    BudgetConfigError,
    SgdStage,
    SpiderStage,
    run_stage,
    warm_start,
)
from .privacy import verify_budget

SEED_ENV = "DPWARM_SEED"
ALGORITHMS = ("sgd", "spider", "warm_start")

# Tuned values per epsilon for the n = d = 100 sine-bowl problem.
TUNED_HYPERPARAMS = {
    0.1: {"sgd": {"eta": 0.0005}, "spider": {"eta": 0.005, "q": 10},
          "warm_start": {"T1": 50, "q": 100, "eta_sgd": 0.0005, "eta_spider": 0.005, "eps1_frac": 1 / 2}},
    0.25: {"sgd": {"eta": 0.0005}, "spider": {"eta": 0.001, "q": 5},
           "warm_start": {"T1": 50, "q": 5, "eta_sgd": 0.05, "eta_spider": 0.0005, "eps1_frac": 1 / 4}},
    1.0: {"sgd": {"eta": 0.0025}, "spider": {"eta": 0.0025, "q": 10},
          "warm_start": {"T1": 1, "q": 10, "eta_sgd": 0.001, "eta_spider": 0.0005, "eps1_frac": 1 / 4}},
    2.0: {"sgd": {"eta": 0.0025}, "spider": {"eta": 0.0025, "q": 5},
          "warm_start": {"T1": 50, "q": 5, "eta_sgd": 0.0025, "eta_spider": 0.0025, "eps1_frac": 1 / 4}},
    4.0: {"sgd": {"eta": 0.005}, "spider": {"eta": 0.005, "q": 5},
          "warm_start": {"T1": 25, "q": 5, "eta_sgd": 0.005, "eta_spider": 0.005, "eps1_frac": 1 / 100}},
}

HYPER_KEYS = {
    "sgd": ("eta",),
    "spider": ("eta", "q"),
    "warm_start": ("T1", "q", "eta_sgd", "eta_spider", "eps1_frac"),
}


class ConfigError(ValueError):
    pass


# configuration ----------------------------------------------------------------


def parse_delta_rule(rule: str, n: int) -> float:
    """Evaluate ``n^<p>`` (e.g. ``n^-1.5``) or a plain number."""
    text = str(rule).replace(" ", "")
    m = re.fullmatch(r"n\^\(?(-?[0-9.]+(?:e-?[0-9]+)?)\)?", text)
    if m:
        value = float(n) ** float(m.group(1))
    else:
        m = re.fullmatch(r"1/n\^\(?([0-9.]+)\)?", text)
        value = float(n) ** -float(m.group(1)) if m else float(text)
    if not 0 < value < 1:
        raise ConfigError(f"delta rule {rule!r} gives {value}, outside (0, 1)")
    return value


@dataclass
class ExperimentConfig:
    n: int = 100
    d: int = 100
    delta_rule: str = "n^-1.5"
    epsilons: tuple = (0.1, 0.25, 1.0, 2.0, 4.0)
    trials: int = 10
    algorithms: tuple = ALGORITHMS
    hyper: dict = field(default_factory=dict)
    hyper_grid: dict = field(default_factory=dict)
    seed: int = 0
    output_dir: str = "results"
    loss: str = "sine_bowl"
    radius: float = 2.0
    batch: Optional[int] = None
    baseline_T: int = 100
    warm_total_T: int = 50
    test_size: Optional[int] = None
    calibration: str = "accountant"
    w_init: str = "zero"
    grid_repeats: int = 10
    workers: int = 1

    def __post_init__(self):
        self.epsilons = tuple(float(e) for e in self.epsilons)
        self.algorithms = tuple(self.algorithms)
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if not self.epsilons or min(self.epsilons) <= 0:
            raise ConfigError("epsilons must be a nonempty list of positive values")
        bad = set(self.algorithms) - set(ALGORITHMS)
        if bad or not self.algorithms:
            raise ConfigError(f"unknown algorithms {sorted(bad)}; choose from {ALGORITHMS}")
        if self.n < 2 or self.d < 1:
            raise ConfigError("need n >= 2 and d >= 1")
        if self.w_init not in ("zero", "boundary"):
            raise ConfigError("w_init must be 'zero' or 'boundary'")
        self.delta  # validates the rule

    @property
    def delta(self) -> float:
        return parse_delta_rule(self.delta_rule, self.n)

    def hyperparameters(self, eps: float, alg: str) -> dict:
        """Tuned table entry for ``eps`` (nearest tabulated epsilon) with overrides."""
        key = min(TUNED_HYPERPARAMS, key=lambda e: abs(math.log(e / eps)))
        params = dict(TUNED_HYPERPARAMS[key][alg])
        params.update(self.hyper.get(alg, {}))
        params.update(self.hyper.get((eps, alg), {}))
        return params


def _parse_value(text: str):
    text = text.strip()
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def _parse_list(text: str):
    return [_parse_value(t) for t in text.split(",") if t.strip()]


def read_config_text(path) -> dict:
    """Read a flat ``key = value`` file; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def load_experiment_config(path) -> ExperimentConfig:
    raw = read_config_text(path)
    kwargs, hyper, grid = {}, {}, {}
    for key, value in raw.items():
        if key.startswith("grid."):
            _, alg, name = key.split(".", 2)
            grid.setdefault(alg, {})[name] = _parse_list(value)
        elif key.count(".") == 1 and key.split(".")[0] in ALGORITHMS:
            alg, name = key.split(".")
            hyper.setdefault(alg, {})[name] = _parse_value(value)
        elif key in ("epsilons",):
            kwargs[key] = tuple(float(v) for v in _parse_list(value))
        elif key == "algorithms":
            kwargs[key] = tuple(str(v) for v in _parse_list(value))
        elif key in ("n", "d", "trials", "seed", "baseline_T", "warm_total_T", "grid_repeats", "workers"):
            kwargs[key] = int(value)
        elif key in ("batch", "test_size"):
            kwargs[key] = None if value.lower() in ("none", "n", "") else int(value)
        elif key == "radius":
            kwargs[key] = float(value)
        elif key in ("delta_rule", "output_dir", "loss", "calibration", "w_init"):
            kwargs[key] = value
        else:
            raise ConfigError(f"unknown config key {key!r}")
    for alg, params in list(hyper.items()) + list(grid.items()):
        unknown = set(params) - set(HYPER_KEYS[alg])
        if unknown:
            raise ConfigError(f"unknown {alg} hyperparameters {sorted(unknown)}")
    cfg = ExperimentConfig(hyper=hyper, hyper_grid=grid, **kwargs)
    return apply_seed_override(cfg)


def apply_seed_override(cfg):
    env = os.environ.get(SEED_ENV)
    if env:
        cfg = replace(cfg, seed=int(env))
    return cfg


# single runs -------------------------------------------------------------------


def _w_init(cfg: ExperimentConfig, rng: RngStream) -> np.ndarray:
    if cfg.w_init == "zero":
        return np.zeros(cfg.d)
    g = rng.generator().standard_normal(cfg.d)
    return cfg.radius * g / np.linalg.norm(g)


def _draw_data(cfg: ExperimentConfig, loss: LossModel, rng: RngStream, size: int) -> Dataset:
    data = sample_unit_ball(cfg.d, size, rng.substream(0))
    if loss.needs_labels:
        w_true = sample_unit_ball(cfg.d, 1, RngStream(cfg.seed, 1)).samples[0]
        data = label_glm_data(data, w_true, rng.substream(1))
    return data


def validate_hyperparameters(cfg: ExperimentConfig, alg: str, eps: float, params: dict):
    if alg == "warm_start":
        frac, T1 = params["eps1_frac"], int(params["T1"])
        if not 0 <= frac <= 1:
            raise BudgetConfigError(f"eps1_frac={frac} splits epsilon={eps} outside the budget")
        if not 0 <= T1 <= cfg.warm_total_T:
            raise ConfigError(f"T1={T1} must lie in [0, {cfg.warm_total_T}]")
    if "q" in params and int(params["q"]) < 1:
        raise ConfigError("phase length q must be >= 1")
    for key in ("eta", "eta_sgd", "eta_spider"):
        if key in params and params[key] < 0:
            raise ConfigError(f"{key} must be nonnegative")


def run_algorithm(cfg: ExperimentConfig, loss: LossModel, data: Dataset, alg: str, eps: float, params: dict,
                  rng: RngStream, w_init: np.ndarray):
    """Run one algorithm under the global (eps, delta); returns its RunRecord."""
    delta = cfg.delta
    budget = PrivacyBudget(eps, delta)
    b = cfg.batch or data.n
    R = cfg.radius
    if alg == "sgd":
        stage = SgdStage(cfg.baseline_T, params["eta"], b, R, cfg.calibration)
        rec = run_stage(stage, loss, data, budget, w_init, rng, "dp_sgd")
    elif alg == "spider":
        stage = SpiderStage(cfg.baseline_T, min(int(params["q"]), cfg.baseline_T), params["eta"], b, b, R)
        rec = run_stage(stage, loss, data, budget, w_init, rng, "dp_spider")
    else:
        T1 = int(params["T1"])
        T2 = cfg.warm_total_T - T1
        eps1 = eps * params["eps1_frac"]
        stage_a = SgdStage(T1, params["eta_sgd"], b, R, cfg.calibration)
        stage_b = SpiderStage(T2, max(1, min(int(params["q"]), T2)), params["eta_spider"], b, b, R)
        rec = warm_start(loss, data, stage_a, stage_b, (eps1, delta / 2, eps - eps1, delta / 2), rng,
                         w_init=w_init, global_budget=budget)
    if not verify_budget(rec.ledger, budget):
        raise BudgetConfigError(f"{alg} at epsilon={eps} overspent its budget")
    return rec


def _trial_job(args):
    cfg, eps_index, eps, trial, algs = args
    loss = get_loss(cfg.loss, cfg.radius)
    base = RngStream(cfg.seed, 0, (eps_index, trial))
    train = _draw_data(cfg, loss, base.substream(0), cfg.n)
    test = _draw_data(cfg, loss, base.substream(1), cfg.test_size or cfg.n)
    w0 = _w_init(cfg, base.substream(2))
    rows, ledgers = [], []
    for alg in algs:
        params = cfg.hyperparameters(eps, alg)
        t0 = time.perf_counter()
        rec = run_algorithm(cfg, loss, train, alg, eps, params, base.substream(3, ALGORITHMS.index(alg)), w0)
        wall = time.perf_counter() - t0
        rows.append({
            "epsilon": eps, "algorithm": alg, "trial": trial,
            "grad_norm_train": grad_norm(loss, train, rec.output),
            "grad_norm_test": grad_norm(loss, test, rec.output),
            "hyperparameters": format_params(params),
            "wall_time": wall,
        })
        ledgers.append(((eps, alg, trial), rec.ledger))
    return rows, ledgers


def format_params(params: dict) -> str:
    return ";".join(f"{k}={params[k]!r}" for k in sorted(params))


# experiment -------------------------------------------------------------------------


RESULT_FIELDS = ["epsilon", "algorithm", "trial", "grad_norm_train", "grad_norm_test", "hyperparameters"]
SUMMARY_FIELDS = ["epsilon", "algorithm", "trials", "mean_train", "std_train", "se_train",
                  "mean_test", "std_test", "se_test"]


@dataclass
class ExperimentResult:
    rows: list
    summary: list
    ledgers: dict
    runtime: float

    def mean(self, eps, alg, column="grad_norm_train"):
        vals = [r[column] for r in self.rows if r["epsilon"] == eps and r["algorithm"] == alg]
        return float(np.mean(vals))


def summarize(rows) -> list:
    out = []
    keys = sorted({(r["epsilon"], r["algorithm"]) for r in rows}, key=lambda k: (k[0], ALGORITHMS.index(k[1])))
    for eps, alg in keys:
        sel = [r for r in rows if r["epsilon"] == eps and r["algorithm"] == alg]
        sel.sort(key=lambda r: r["trial"])
        tr = np.array([r["grad_norm_train"] for r in sel])
        te = np.array([r["grad_norm_test"] for r in sel])
        k = len(sel)
        sd_tr = float(np.std(tr, ddof=1)) if k > 1 else 0.0
        sd_te = float(np.std(te, ddof=1)) if k > 1 else 0.0
        out.append({
            "epsilon": eps, "algorithm": alg, "trials": k,
            "mean_train": float(np.mean(tr)), "std_train": sd_tr, "se_train": sd_tr / math.sqrt(k),
            "mean_test": float(np.mean(te)), "std_test": sd_te, "se_test": sd_te / math.sqrt(k),
        })
    return out


def run_experiment(cfg: ExperimentConfig, write: bool = True) -> ExperimentResult:
    """Run every (epsilon, algorithm, trial) and optionally write the report files.

    Each trial draws fresh training data and a fresh test set of
    ``test_size`` (default n) points; all algorithms of a trial share them.
    """
    t0 = time.perf_counter()
    for eps in cfg.epsilons:
        for alg in cfg.algorithms:
            validate_hyperparameters(cfg, alg, eps, cfg.hyperparameters(eps, alg))
    jobs = [(cfg, i, eps, t, cfg.algorithms) for i, eps in enumerate(cfg.epsilons) for t in range(cfg.trials)]
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            outs = list(pool.map(_trial_job, jobs))
    else:
        outs = [_trial_job(j) for j in jobs]
    rows, ledgers = [], {}
    for r, l in outs:
        rows.extend(r)
        ledgers.update(dict(l))
    rows.sort(key=lambda r: (r["epsilon"], ALGORITHMS.index(r["algorithm"]), r["trial"]))
    result = ExperimentResult(rows, summarize(rows), ledgers, time.perf_counter() - t0)
    if write:
        write_experiment(cfg, result)
    return result


def _csv_text(fields, rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=fields, extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def hyperparams_listing(cfg: ExperimentConfig, chosen=None) -> str:
    """Per-epsilon listing of the hyperparameters used (or selected)."""
    lines = []
    for eps in cfg.epsilons:
        lines.append(f"epsilon = {eps!r}")
        for alg in cfg.algorithms:
            params = chosen[(eps, alg)] if chosen else cfg.hyperparameters(eps, alg)
            for k in HYPER_KEYS[alg]:
                lines.append(f"  {alg}.{k} = {params[k]!r}")
        lines.append("")
    return "\n".join(lines)


def write_experiment(cfg: ExperimentConfig, result: ExperimentResult):
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "results.csv").write_text(_csv_text(RESULT_FIELDS, result.rows))
    (out / "summary.csv").write_text(_csv_text(SUMMARY_FIELDS, result.summary))
    (out / "timings.csv").write_text(_csv_text(["epsilon", "algorithm", "trial", "wall_time"], result.rows))
    (out / "hyperparams.txt").write_text(hyperparams_listing(cfg))
    blocks = [f"# global delta = {cfg.delta!r}"]
    for (eps, alg, trial), ledger in sorted(result.ledgers.items(),
                                            key=lambda kv: (kv[0][0], ALGORITHMS.index(kv[0][1]), kv[0][2])):
        blocks.append(f"# epsilon={eps!r} algorithm={alg} trial={trial}\n" + ledger.to_text())
    (out / "ledger.txt").write_text("\n".join(blocks))


# grid search ---------------------------------------------------------------------


def grid_points(grid: dict) -> list:
    """Cartesian product in lexicographic order of the given key and value order."""
    keys = list(grid)
    for k in keys:
        if len(grid[k]) == 0:
            raise ConfigError(f"grid list for {k!r} is empty")
    return [dict(zip(keys, vals)) for vals in itertools.product(*(grid[k] for k in keys))]


def grid_search(cfg: ExperimentConfig, grid: Optional[dict] = None, validation_rng: Optional[RngStream] = None,
                write: bool = True) -> dict:
    """Select, per (epsilon, algorithm), the grid point with the lowest mean
    validation gradient norm over ``cfg.grid_repeats`` fresh datasets.

    Grid entries missing for an algorithm fall back to the tabulated value.
    Ties go to the earlier grid point.
    """
    grid = cfg.hyper_grid if grid is None else grid
    if validation_rng is None:
        validation_rng = RngStream(cfg.seed, 7)
    loss = get_loss(cfg.loss, cfg.radius)
    chosen, scores = {}, {}
    for i, eps in enumerate(cfg.epsilons):
        for alg in cfg.algorithms:
            base = cfg.hyperparameters(eps, alg)
            points = grid_points(grid.get(alg, {}))
            best, best_score = None, math.inf
            for pt in points:
                params = {**base, **pt}
                validate_hyperparameters(cfg, alg, eps, params)
                vals = []
                for r in range(cfg.grid_repeats):
                    stream = validation_rng.substream(i, r)
                    data = _draw_data(cfg, loss, stream.substream(0), cfg.n)
                    w0 = _w_init(cfg, stream.substream(2))
                    # every grid point sees the same data and noise stream
                    rec = run_algorithm(cfg, loss, data, alg, eps, params,
                                        stream.substream(3, ALGORITHMS.index(alg)), w0)
                    vals.append(grad_norm(loss, data, rec.output))
                score = float(np.mean(vals))
                if score < best_score:
                    best, best_score = params, score
            chosen[(eps, alg)] = best
            scores[(eps, alg)] = best_score
    if write:
        out = Path(cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "hyperparams.txt").write_text(hyperparams_listing(cfg, chosen))
    return chosen


# scaling sweep -----------------------------------------------------------------------


@dataclass
class SweepConfig:
    loss: str = "quadratic_pl"
    dims: tuple = (5,)
    ns: tuple = (200, 400, 800, 1600, 3200)
    epsilon: float = 1.0
    delta: float = 1e-5
    trials: int = 20
    seed: int = 0
    radius: float = 2.0
    T1: int = 5
    T2: int = 2
    q: int = 2
    eta_a: float = 0.5
    eta_b: Optional[float] = None
    noiseless: bool = False
    w_init: Optional[tuple] = None
    output_dir: str = "results"


@dataclass
class SweepReport:
    d: int
    ns: tuple
    mean_grad_norms: tuple
    slope: float
    r2: float


def loglog_fit(ns, values):
    x, y = np.log(np.asarray(ns, float)), np.log(np.asarray(values, float))
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid ** 2)) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), r2


def _noiseless_run(loss, data, scfg: SweepConfig, eta_b, w0, rng):
    from .optimizers import SgdConfig, SpiderConfig, dp_sgd, dp_spider

    # exact full-batch descent returning its last iterate
    if scfg.T1 > 0:
        cfg_a = SgdConfig(scfg.T1, data.n, scfg.eta_a, 0.0, w0, scfg.radius, selection="last")
        w0 = dp_sgd(loss, data, cfg_a, rng.substream(1)).output
    cfg = SpiderConfig(scfg.T2, min(scfg.q, scfg.T2), data.n, data.n, eta_b, 0.0, 0.0, 0.0, w0, scfg.radius,
                       selection="last")
    return dp_spider(loss, data, cfg, rng.substream(2)).output


def sweep_scaling(scfg: SweepConfig, loss: Optional[LossModel] = None) -> list:
    """Mean output gradient norm of the warm start vs n, with a log-log slope per dimension."""
    ns = tuple(int(n) for n in scfg.ns)
    if len(set(ns)) != len(ns):
        raise ValueError("ns contains duplicate values")
    if len(ns) < 3:
        raise ValueError("need at least 3 distinct n values")
    loss = loss or get_loss(scfg.loss, scfg.radius)
    eta_b = scfg.eta_b if scfg.eta_b is not None else 1.0 / loss.metadata.beta
    budget = PrivacyBudget(scfg.epsilon, scfg.delta)
    half = (scfg.epsilon / 2, scfg.delta / 2, scfg.epsilon / 2, scfg.delta / 2)
    reports = []
    for d in scfg.dims:
        w0 = np.zeros(d) if scfg.w_init is None else np.resize(np.asarray(scfg.w_init, float), d)
        means = []
        for n in ns:
            norms = []
            for t in range(scfg.trials):
                base = RngStream(scfg.seed, 0, (d, n, t))
                data = sample_unit_ball(d, n, base.substream(0))
                if scfg.noiseless:
                    out = _noiseless_run(loss, data, scfg, eta_b, w0, base.substream(1))
                else:
                    stage_a = SgdStage(scfg.T1, scfg.eta_a, project_radius=scfg.radius) if scfg.T1 > 0 else None
                    stage_b = SpiderStage(scfg.T2, min(scfg.q, scfg.T2), eta_b, project_radius=scfg.radius)
                    rec = warm_start(loss, data, stage_a, stage_b, half, base.substream(1), w_init=w0,
                                     global_budget=budget)
                    if not verify_budget(rec.ledger, budget):
                        raise BudgetConfigError("sweep run overspent its budget")
                    out = rec.output
                norms.append(grad_norm(loss, data, out))
            means.append(float(np.mean(norms)))
        slope, r2 = loglog_fit(ns, means)
        reports.append(SweepReport(d, ns, tuple(means), slope, r2))
    return reports


def load_sweep_config(path) -> SweepConfig:
    raw = read_config_text(path)
    kw = {}
    for key, value in raw.items():
        if key in ("dims", "ns"):
            kw[key] = tuple(int(v) for v in _parse_list(value))
        elif key == "w_init":
            kw[key] = tuple(float(v) for v in _parse_list(value))
        elif key in ("trials", "seed", "T1", "T2", "q"):
            kw[key] = int(value)
        elif key in ("epsilon", "delta", "radius", "eta_a", "eta_b"):
            kw[key] = float(value)
        elif key == "noiseless":
            kw[key] = value.lower() in ("1", "true", "yes")
        elif key in ("loss", "output_dir"):
            kw[key] = value
        else:
            raise ConfigError(f"unknown sweep key {key!r}")
    return apply_seed_override(SweepConfig(**kw))


def sweep_report_text(reports) -> str:
    lines = ["d, n, mean_grad_norm"]
    for rep in reports:
        for n, m in zip(rep.ns, rep.mean_grad_norms):
            lines.append(f"{rep.d}, {n}, {m!r}")
    lines.append("")
    lines.append("d, slope, r2")
    for rep in reports:
        lines.append(f"{rep.d}, {rep.slope!r}, {rep.r2!r}")
    return "\n".join(lines) + "\n"
