import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dpwarm.core import Dataset, PrivacyBudget, RngStream, sample_unit_ball
from dpwarm.losses import custom_loss, quadratic_pl, sine_bowl
from dpwarm.privacy import CandidateNet, build_net, verify_budget
from dpwarm.optimizers import (
    BudgetConfigError,
    DivergenceError,
    ExpMechStage,
    SgdConfig,
    SgdStage,
    SpiderConfig,
    SpiderStage,
    boost_confidence,
    boost_rounds,
    dp_sgd,
    dp_spider,
    exp_mech_warm_start,
    project_ball,
    run_record_csv,
    run_stage,
    sgd_config,
    spider_config,
    spider_noise_variance,
    warm_start,
    write_run_record,
)


@pytest.fixture
def quad_data(rng):
    return sample_unit_ball(3, 40, rng.substream(7))


def test_project_ball_examples():
    w = np.array([0.5, -0.5])
    assert np.array_equal(project_ball(w, 2.0), w)
    assert np.array_equal(project_ball([3.0, 0.0], 2.0), [2.0, 0.0])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=6), st.floats(1e-3, 1e3))
def test_project_ball_norm_bound(w, r):
    assert np.linalg.norm(project_ball(w, r)) <= r * (1 + 1e-12)


def test_sgd_single_gd_step_lands_on_mean(quad_data):
    cfg = SgdConfig(1, quad_data.n, 1.0, 0.0, np.zeros(3))
    rec = dp_sgd(quadratic_pl(), quad_data, cfg, RngStream(1))
    assert np.allclose(rec.trace[1], quad_data.samples.mean(axis=0), atol=1e-15)
    assert any(np.array_equal(rec.output, p) for p in rec.trace[:2])


def test_sgd_zero_step_does_not_move(quad_data):
    cfg = SgdConfig(10, 5, 0.0, 1.0, np.ones(3) * 0.2)
    rec = dp_sgd(sine_bowl(), quad_data, cfg, RngStream(2))
    assert np.all(rec.trace == rec.trace[0])


def test_noiseless_gd_descends_convex_quadratic(quad_data):
    loss = quadratic_pl()
    cfg = SgdConfig(25, quad_data.n, 1.0 / loss.metadata.beta, 0.0, np.array([2.0, -1.0, 0.5]))
    rec = dp_sgd(loss, quad_data, cfg, RngStream(3))
    vals = [loss.value(w, quad_data) for w in rec.trace]
    assert all(b <= a + 1e-15 for a, b in zip(vals, vals[1:]))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_sgd_divergence_names_step(quad_data):
    cfg = SgdConfig(5, quad_data.n, 1e308, 1.0, np.ones(3))
    with pytest.raises(DivergenceError) as err:
        dp_sgd(quadratic_pl(), quad_data, cfg, RngStream(0))
    assert err.value.step >= 1


def test_runs_are_deterministic_and_projected(quad_data):
    loss = sine_bowl()
    cfg = SgdConfig(30, 8, 0.5, 4.0, np.zeros(3), project_radius=1.0)
    a = dp_sgd(loss, quad_data, cfg, RngStream(5))
    b = dp_sgd(loss, quad_data, cfg, RngStream(5))
    assert np.array_equal(a.trace, b.trace) and a.output_index == b.output_index
    assert np.all(np.linalg.norm(a.trace, axis=1) <= 1.0 + 1e-12)
    scfg = SpiderConfig(30, 4, 8, 8, 0.5, 4.0, 4.0, 1.0, np.zeros(3), project_radius=1.0)
    c = dp_spider(loss, quad_data, scfg, RngStream(5))
    d = dp_spider(loss, quad_data, scfg, RngStream(5))
    assert np.array_equal(c.trace, d.trace)
    assert np.all(np.linalg.norm(c.trace, axis=1) <= 1.0 + 1e-12)


def test_output_index_ranges(quad_data):
    loss = sine_bowl()
    sgd_idx, spider_idx = set(), set()
    for s in range(200):
        sgd_idx.add(dp_sgd(loss, quad_data, SgdConfig(3, 4, 0.1, 1.0, np.zeros(3)), RngStream(s)).output_index)
        cfg = SpiderConfig(3, 2, 4, 4, 0.1, 1.0, 1.0, 1.0, np.zeros(3))
        spider_idx.add(dp_spider(loss, quad_data, cfg, RngStream(s)).output_index)
    assert sgd_idx == {0, 1, 2}
    assert spider_idx == {1, 2, 3}


def test_spider_q1_matches_gd_bitwise(quad_data):
    loss = sine_bowl()
    w0 = np.array([0.4, 0.1, -0.3])
    sp = dp_spider(loss, quad_data, SpiderConfig(12, 1, quad_data.n, 3, 0.2, 0.0, 5.0, 5.0, w0), RngStream(9))
    gd = dp_sgd(loss, quad_data, SgdConfig(12, quad_data.n, 0.2, 0.0, w0), RngStream(9))
    assert np.array_equal(sp.trace, gd.trace)
    w = w0.copy()
    for t in range(12):
        w = w - 0.2 * loss.grad(w, quad_data)
        assert np.array_equal(sp.trace[t + 1], w)


def test_spider_fixed_point(quad_data):
    loss = quadratic_pl()
    w0 = quad_data.samples.mean(axis=0)
    cfg = SpiderConfig(10, 3, quad_data.n, quad_data.n, 0.3, 0.0, 0.0, 0.0, w0)
    rec = dp_spider(loss, quad_data, cfg, RngStream(0))
    assert np.allclose(rec.trace, w0, atol=1e-15)


def test_spider_increment_variance():
    assert spider_noise_variance(1.0, 1.0, 4.0) == 1.0
    assert spider_noise_variance(1.0, 10.0, 4.0) == 4.0


def test_spider_config_validation():
    with pytest.raises(ValueError):
        SpiderConfig(5, 6, 1, 1, 0.1, 0, 0, 0, np.zeros(1))
    with pytest.raises(ValueError):
        SgdConfig(0, 1, 0.1, 0, np.zeros(1))


def test_calibrated_configs_pass_accountant(quad_data):
    loss = sine_bowl()
    budget = PrivacyBudget(0.5, 1e-5)
    cfg = sgd_config(loss, quad_data.n, 3, budget, 50, quad_data.n, np.zeros(3))
    rec = dp_sgd(loss, quad_data, cfg, RngStream(0))
    assert verify_budget(rec.ledger, budget)
    scfg = spider_config(loss, quad_data.n, budget, 20, 5, quad_data.n, quad_data.n, 0.01, np.zeros(3))
    assert verify_budget(dp_spider(loss, quad_data, scfg, RngStream(0)).ledger, budget)


def test_exp_mech_warm_start_examples(rng):
    loss = quadratic_pl()
    data = Dataset(np.array([[0.5], [-0.5]] * 50))
    single = CandidateNet(np.array([[0.25]]), 0.1, 1.0)
    assert exp_mech_warm_start(loss, data, single, 1.0, rng)[0] == 0.25
    net = build_net(1.0, 0.5, 1)
    hits = sum(exp_mech_warm_start(loss, data, net, 100.0, rng.substream(i))[0] == 0.0 for i in range(1000))
    assert hits >= 990
    with pytest.raises(ValueError):
        exp_mech_warm_start(loss, data, CandidateNet(np.zeros((0, 1)), 0.1, 1.0), 1.0, rng)


def test_exp_mech_warm_start_uniform_on_ties(rng):
    loss = quadratic_pl()
    data = Dataset(np.zeros((10, 1)))
    net = CandidateNet(np.array([[-0.5], [0.5]]), 0.5, 1.0)
    picks = [exp_mech_warm_start(loss, data, net, 1.0, rng.substream(i))[0] for i in range(4000)]
    assert abs(np.mean(np.array(picks) > 0) - 0.5) < 0.03


def test_warm_start_without_stage_a_is_stage_b(quad_data):
    loss = sine_bowl()
    stage_b = SpiderStage(T=10, q=3, eta=0.01)
    rec = warm_start(loss, quad_data, None, stage_b, (0.5, 5e-6, 0.5, 5e-6), RngStream(4))
    alone = run_stage(stage_b, loss, quad_data, PrivacyBudget(0.5, 5e-6), np.zeros(3),
                      RngStream(4).substream(2), "warm_start_B")
    assert np.array_equal(rec.trace, alone.trace)
    assert np.array_equal(rec.output, alone.output)


def test_warm_start_empty_stage_b_returns_w0(quad_data):
    loss = sine_bowl()
    rec = warm_start(loss, quad_data, SgdStage(T=10, eta=0.01), SgdStage(T=0), (0.5, 5e-6, 0.5, 5e-6), RngStream(4))
    assert np.array_equal(rec.output, rec.warm_start_point)
    assert np.array_equal(rec.output, rec.stages[0].output)


def test_warm_start_ledger(quad_data):
    loss = sine_bowl()
    eps, delta = 1.0, 1e-5
    rec = warm_start(loss, quad_data, SgdStage(T=5, eta=0.01), SpiderStage(T=5, q=2, eta=0.01),
                     (eps / 2, delta / 2, eps / 2, delta / 2), RngStream(4))
    assert [e.stage for e in rec.ledger.entries] == ["warm_start_A", "warm_start_B"]
    assert rec.ledger.total.epsilon == pytest.approx(eps)
    assert rec.ledger.total.delta == pytest.approx(delta)
    assert verify_budget(rec.ledger, PrivacyBudget(eps, delta))


def test_warm_start_rejects_over_budget_before_running(quad_data):
    calls = []
    base = sine_bowl()

    def grad(w, x):
        calls.append(1)
        return base.rows(w[None], x[None], None)[1][0]

    loss = custom_loss("spy", base.metadata, lambda w, x: 0.0, grad)
    with pytest.raises(BudgetConfigError):
        warm_start(loss, quad_data, SgdStage(T=5), SgdStage(T=5), (0.8, 0, 0.8, 0), RngStream(0),
                   global_budget=PrivacyBudget(1.0, 1e-5))
    assert calls == []


def test_warm_start_exp_mech_stage(rng):
    loss = quadratic_pl()
    data = sample_unit_ball(1, 100, rng)
    net = build_net(1.0, 0.5, 1)
    rec = warm_start(loss, data, ExpMechStage(net), SgdStage(T=3, eta=0.1), (0.5, 0.0, 0.5, 1e-5), rng)
    assert any(np.array_equal(rec.warm_start_point, p) for p in net.points)


def test_boost_rounds():
    assert boost_rounds(0.5) == 2
    assert boost_rounds(0.1) == 5
    assert boost_rounds(0.99) == 2
    assert boost_rounds(0.25) == 3
    with pytest.raises(ValueError):
        boost_rounds(1.0)


def test_boost_ledger_arithmetic(quad_data):
    loss = sine_bowl()
    budget = PrivacyBudget(1.0, 1e-5)
    seen = []

    def runner(b, r):
        seen.append((b.epsilon, b.delta))
        cfg = sgd_config(loss, quad_data.n, 3, b, 5, quad_data.n, np.zeros(3), eta=0.01)
        return dp_sgd(loss, quad_data, cfg, r)

    rec = boost_confidence(runner, 0.5, budget, RngStream(1), loss, quad_data)
    assert seen == [(0.25, 2.5e-6), (0.25, 2.5e-6)]
    assert rec.ledger.entries[-1].budget.epsilon == 0.5
    assert rec.ledger.total.epsilon == pytest.approx(1.0)
    assert rec.ledger.total.delta == pytest.approx(5e-6)
    assert verify_budget(rec.ledger, budget)
    assert any(np.array_equal(rec.output, c) for c in rec.trace)


def test_boost_identical_candidates(quad_data):
    loss = sine_bowl()
    rec = boost_confidence(lambda b, r: np.ones(3) * 0.1, 0.99, PrivacyBudget(1, 1e-5), RngStream(0), loss, quad_data)
    assert rec.trace.shape[0] == 2
    assert np.array_equal(rec.output, np.ones(3) * 0.1)


@pytest.mark.parametrize("calibration", ["accountant", "formula"])
def test_suboptimality_drops_when_n_doubles(calibration):
    from dpwarm.evaluation import gap_estimate

    loss = quadratic_pl()
    means = []
    for n in (200, 400):
        gaps = []
        for s in range(20):
            r = RngStream(3, 0, (n, s))
            data = sample_unit_ball(3, n, r.substream(0))
            cfg = sgd_config(loss, n, 3, PrivacyBudget(1, 1e-5), 50, n, np.array([1.0, 1.0, 0.0]),
                             project_radius=2, calibration=calibration)
            gaps.append(gap_estimate(loss, data, dp_sgd(loss, data, cfg, r.substream(1)).output))
        means.append(np.mean(gaps))
    assert means[1] < means[0]


def test_last_selection_returns_final_iterate(quad_data):
    cfg = SgdConfig(4, quad_data.n, 0.5, 0.0, np.ones(3), selection="last")
    rec = dp_sgd(quadratic_pl(), quad_data, cfg, RngStream(0))
    assert rec.output_index == 4 and np.array_equal(rec.output, rec.trace[-1])


def test_run_record_serialisation(tmp_path, quad_data):
    loss = quadratic_pl()
    cfg = sgd_config(loss, quad_data.n, 3, PrivacyBudget(1, 1e-5), 5, quad_data.n, np.zeros(3))
    rec = dp_sgd(loss, quad_data, cfg, RngStream(0))
    path = write_run_record(rec, tmp_path, loss, quad_data)
    lines = path.read_text().splitlines()
    assert lines[0] == "step,grad_norm,iterate_norm"
    assert len(lines) == 7
    step, g, nrm = lines[3].split(",")
    assert float(nrm) == np.linalg.norm(rec.trace[2])
    assert float(g) == pytest.approx(np.linalg.norm(loss.grad(rec.trace[2], quad_data)))
    assert (tmp_path / "run_ledger.txt").read_text().startswith("stage, epsilon, delta, rule")
    assert run_record_csv(rec).splitlines()[1] == "0,,0.0"
