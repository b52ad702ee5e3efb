import csv
import subprocess
import sys
from dataclasses import replace

import numpy as np
import pytest

from dpwarm import bench, cli
from dpwarm.bench import (
    TUNED_HYPERPARAMS,
    ConfigError,
    ExperimentConfig,
    SweepConfig,
    grid_search,
    load_experiment_config,
    parse_delta_rule,
    run_experiment,
    sweep_scaling,
)
from dpwarm.optimizers import BudgetConfigError


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture
def small_cfg(tmp_path):
    return ExperimentConfig(n=30, d=5, epsilons=(0.5, 2.0), trials=2, output_dir=str(tmp_path / "out"))


def test_default_experiment_row_counts(tmp_path):
    cfg = ExperimentConfig(output_dir=str(tmp_path))
    result = run_experiment(cfg)
    assert len(result.rows) == 150
    assert len(result.summary) == 15
    rows = read_csv(tmp_path / "results.csv")
    assert list(rows[0]) == bench.RESULT_FIELDS
    assert len(rows) == 150
    assert len(read_csv(tmp_path / "summary.csv")) == 15
    for name in ("ledger.txt", "hyperparams.txt", "timings.csv"):
        assert (tmp_path / name).exists()
    assert all(np.isfinite(float(r["grad_norm_train"])) for r in rows)
    keys = [(float(r["epsilon"]), bench.ALGORITHMS.index(r["algorithm"]), int(r["trial"])) for r in rows]
    assert keys == sorted(keys)


def test_single_row_experiment(tmp_path):
    cfg = ExperimentConfig(epsilons=(1.0,), trials=1, algorithms=("sgd",), output_dir=str(tmp_path))
    run_experiment(cfg)
    assert len(read_csv(tmp_path / "results.csv")) == 1


def test_identical_seed_identical_bytes(tmp_path, small_cfg):
    a, b = tmp_path / "a", tmp_path / "b"
    run_experiment(replace(small_cfg, output_dir=str(a)))
    run_experiment(replace(small_cfg, output_dir=str(b)))
    for name in ("results.csv", "summary.csv", "ledger.txt", "hyperparams.txt"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    run_experiment(replace(small_cfg, seed=1, output_dir=str(tmp_path / "c")))
    assert (a / "results.csv").read_bytes() != (tmp_path / "c" / "results.csv").read_bytes()


def test_over_budget_aborts_before_sampling(monkeypatch, small_cfg):
    def boom(*args, **kwargs):
        raise AssertionError("data was sampled")

    monkeypatch.setattr(bench, "_draw_data", boom)
    cfg = replace(small_cfg, hyper={"warm_start": {"eps1_frac": 1.5}})
    with pytest.raises(BudgetConfigError):
        run_experiment(cfg, write=False)


def test_ledgers_in_report_verify(small_cfg):
    from dpwarm.core import PrivacyBudget
    from dpwarm.privacy import verify_budget

    result = run_experiment(small_cfg, write=False)
    for (eps, alg, trial), ledger in result.ledgers.items():
        assert verify_budget(ledger, PrivacyBudget(eps, small_cfg.delta))


def test_workers_do_not_change_summary(small_cfg):
    serial = run_experiment(small_cfg, write=False)
    pooled = run_experiment(replace(small_cfg, workers=2), write=False)
    assert serial.summary == pooled.summary


def test_delta_rule():
    assert parse_delta_rule("n^-1.5", 100) == pytest.approx(1e-3)
    assert parse_delta_rule("1/n^1.5", 100) == pytest.approx(1e-3)
    assert parse_delta_rule("1e-5", 100) == 1e-5
    with pytest.raises(ConfigError):
        parse_delta_rule("n^1", 100)


def test_tuned_table_lookup():
    cfg = ExperimentConfig()
    assert cfg.hyperparameters(0.1, "warm_start") == TUNED_HYPERPARAMS[0.1]["warm_start"]
    assert cfg.hyperparameters(0.3, "sgd") == TUNED_HYPERPARAMS[0.25]["sgd"]
    over = ExperimentConfig(hyper={"sgd": {"eta": 0.1}})
    assert over.hyperparameters(4.0, "sgd") == {"eta": 0.1}


def test_config_file_parsing(tmp_path, monkeypatch):
    path = tmp_path / "c.cfg"
    path.write_text("n = 20  # rows\nd = 3\nepsilons = 0.5, 1\ntrials = 2\nsgd.eta = 0.01\n"
                    "grid.spider.q = 1, 2\nseed = 4\n")
    monkeypatch.delenv(bench.SEED_ENV, raising=False)
    cfg = load_experiment_config(path)
    assert (cfg.n, cfg.d, cfg.epsilons, cfg.seed) == (20, 3, (0.5, 1.0), 4)
    assert cfg.hyper == {"sgd": {"eta": 0.01}}
    assert cfg.hyper_grid == {"spider": {"q": [1, 2]}}
    monkeypatch.setenv(bench.SEED_ENV, "99")
    assert load_experiment_config(path).seed == 99
    path.write_text("colour = blue\n")
    with pytest.raises(ConfigError):
        load_experiment_config(path)


def test_config_validation():
    with pytest.raises(ConfigError):
        ExperimentConfig(trials=0)
    with pytest.raises(ConfigError):
        ExperimentConfig(epsilons=())
    with pytest.raises(ConfigError):
        ExperimentConfig(algorithms=("adam",))


def test_grid_search_singleton_and_tuned_values(tmp_path):
    cfg = ExperimentConfig(n=30, d=5, epsilons=(0.1,), trials=1, algorithms=("warm_start",),
                           grid_repeats=2, output_dir=str(tmp_path))
    block = TUNED_HYPERPARAMS[0.1]["warm_start"]
    grid = {"warm_start": {k: [v] for k, v in block.items()}}
    chosen = grid_search(cfg, grid)
    assert chosen[(0.1, "warm_start")] == block
    assert "warm_start.T1 = 50" in (tmp_path / "hyperparams.txt").read_text()


def test_grid_search_ties_pick_first(tmp_path):
    # with T1 equal to the whole horizon stage B is empty, so eta_spider has no effect
    cfg = ExperimentConfig(n=30, d=5, epsilons=(0.25,), trials=1, algorithms=("warm_start",),
                           grid_repeats=2, output_dir=str(tmp_path))
    grid = {"warm_start": {"T1": [50], "eta_spider": [0.3, 0.001, 0.02]}}
    assert grid_search(cfg, grid, write=False)[(0.25, "warm_start")]["eta_spider"] == 0.3
    dup = {"sgd": {"eta": [0.001, 0.001]}}
    cfg_sgd = replace(cfg, algorithms=("sgd",))
    assert grid_search(cfg_sgd, dup, write=False)[(0.25, "sgd")]["eta"] == 0.001


def test_grid_search_prefers_better_step(tmp_path):
    cfg = ExperimentConfig(n=50, d=3, epsilons=(4.0,), trials=1, algorithms=("sgd",), loss="quadratic_pl",
                           grid_repeats=3, w_init="boundary", output_dir=str(tmp_path))
    chosen = grid_search(cfg, {"sgd": {"eta": [0.0, 0.05]}}, write=False)
    assert chosen[(4.0, "sgd")]["eta"] == 0.05


def test_grid_search_empty_list():
    cfg = ExperimentConfig(n=30, d=5, epsilons=(1.0,), algorithms=("sgd",))
    with pytest.raises(ConfigError):
        grid_search(cfg, {"sgd": {"eta": []}}, write=False)


def test_sweep_argument_errors():
    with pytest.raises(ValueError):
        sweep_scaling(SweepConfig(ns=(200, 200, 400), trials=1))
    with pytest.raises(ValueError):
        sweep_scaling(SweepConfig(ns=(200, 400), trials=1))


def test_sweep_noiseless_control_is_flat():
    scfg = SweepConfig(noiseless=True, eta_b=0.5, w_init=(1.0, -0.5, 0.3, 0.2, 0.4), trials=5)
    rep = sweep_scaling(scfg)[0]
    assert abs(rep.slope) < 0.1


def test_glm_experiment_runs(tmp_path):
    cfg = ExperimentConfig(n=30, d=4, epsilons=(1.0,), trials=1, loss="glm_sigmoid_sq", output_dir=str(tmp_path))
    assert len(run_experiment(cfg).rows) == 3


def _write_cfg(tmp_path, text):
    p = tmp_path / "exp.cfg"
    p.write_text(text)
    return str(p)


def test_cli_run_experiment(tmp_path, capsys):
    cfg = _write_cfg(tmp_path, "n = 20\nd = 3\nepsilons = 1\ntrials = 2\n")
    assert cli.main(["run-experiment", "--config", cfg, "--output-dir", str(tmp_path / "o")]) == 0
    assert len(read_csv(tmp_path / "o" / "results.csv")) == 6
    assert "summary.csv" in capsys.readouterr().out


def test_cli_grid_and_sweep(tmp_path):
    cfg = _write_cfg(tmp_path, "n = 20\nd = 3\nepsilons = 1\nalgorithms = sgd\ngrid_repeats = 1\n"
                               "grid.sgd.eta = 0.001, 0.01\n")
    assert cli.main(["grid-search", "--config", cfg, "--output-dir", str(tmp_path / "g")]) == 0
    assert (tmp_path / "g" / "hyperparams.txt").exists()
    sw = tmp_path / "sweep.cfg"
    sw.write_text("ns = 100, 200, 400\ntrials = 2\n")
    assert cli.main(["sweep", "--config", str(sw), "--output-dir", str(tmp_path / "s")]) == 0
    assert (tmp_path / "s" / "sweep.csv").read_text().startswith("d, n, mean_grad_norm")


def test_cli_certify(capsys):
    assert cli.main(["certify", "--loss", "sine_bowl", "--radius", "2", "--samples", "500"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 2


def test_cli_bad_config_exit_code(tmp_path, capsys):
    cfg = _write_cfg(tmp_path, "trials = 0\n")
    assert cli.main(["run-experiment", "--config", cfg]) == 2
    assert "error" in capsys.readouterr().err


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "dpwarm", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    assert "run-experiment" in out.stdout
