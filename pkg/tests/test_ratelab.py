import json

import numpy as np
import pytest

from hmeglm.fit import FitConfig
from hmeglm.gating import Partition
from hmeglm.ratelab import (
    ExperimentConfig,
    fit_slope,
    results_csv,
    run_approx_rate,
    run_consistency,
    run_em_diagnostics,
    run_gates_check,
    run_kl_rate,
    uniform_gate_error,
    write_outputs,
)
from hmeglm.ratelab.experiments import balanced_structure, per_axis_count


def test_fit_slope_exact_power_law():
    x = np.log([4, 8, 16, 32])
    slope, intercept, resid = fit_slope(x, -2 * x + 1)
    assert slope == pytest.approx(-2.0, abs=1e-12)
    assert intercept == pytest.approx(1.0, abs=1e-12)
    assert resid < 1e-12


def test_fit_slope_constant():
    assert fit_slope([0.0, 1.0, 2.0], [3.0, 3.0, 3.0])[0] == pytest.approx(0.0, abs=1e-14)


def test_fit_slope_refuses_short_input():
    with pytest.raises(ValueError):
        fit_slope([0.0, 1.0], [1.0, 2.0])
    with pytest.raises(ValueError):
        fit_slope([0.0, 1.0, 2.0], [1.0, np.nan, 2.0])


def test_fit_slope_after_dropping_flagged_row():
    rng = np.random.default_rng(0)
    x = np.log([2, 4, 8, 16, 32.0])
    y = -1.5 * x + 0.3 + rng.normal(scale=0.05, size=5)
    keep = np.array([True, True, False, True, True])
    xs, ys = x[keep], y[keep]
    xbar, ybar = xs.mean(), ys.mean()
    oracle = ((xs - xbar) * (ys - ybar)).sum() / ((xs - xbar) ** 2).sum()
    assert fit_slope(xs, ys)[0] == pytest.approx(oracle, abs=1e-12)


def test_config_round_trip_and_hash():
    cfg = ExperimentConfig(experiment="kl-rate", family={"family": "truncated_poisson", "K": 30}, m_seq=[4, 8, 16])
    d = json.loads(json.dumps(cfg.to_dict()))
    back = ExperimentConfig.from_dict(d)
    assert back.config_hash() == cfg.config_hash()
    assert back.fit == cfg.fit
    assert ExperimentConfig(seed=1).config_hash() != ExperimentConfig(seed=2).config_hash()
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict({"experiment": "approx-rate", "bogus": 1})
    with pytest.raises(ValueError):
        ExperimentConfig(experiment="nope")


def test_structure_helpers():
    assert per_axis_count(16, 2) == 4
    with pytest.raises(ValueError):
        per_axis_count(8, 2)
    assert balanced_structure(16, 2).layer_sizes == (4, 4)


def test_approx_rate_1d():
    rep = run_approx_rate(ExperimentConfig(target="sine", family="poisson", m_seq=[4, 8, 16, 32]))
    assert rep.passed
    assert rep.slope <= -1.6
    assert all(r["layers"] <= 1 and r["structure"] == str(r["m"]) for r in rep.rows)


def test_approx_rate_monotone_for_nested_partitions():
    rep = run_approx_rate(ExperimentConfig(target="bump", family="poisson", m_seq=[2, 4, 8, 16], tau=1e5))
    errs = [r["error"] for r in rep.rows]
    assert all(b <= a + 1e-6 for a, b in zip(errs[:-1], errs[1:]))


def test_approx_rate_affine_exact_class():
    rep = run_approx_rate(ExperimentConfig(target="affine", family="poisson", m_seq=[4, 8, 16]))
    assert all(r["flagged"] for r in rep.rows)
    assert rep.slope is None
    assert any("exact class" in n for n in rep.notes)


def test_non_subgeometric_sequence_rejected():
    with pytest.raises(ValueError):
        run_approx_rate(ExperimentConfig(m_seq=[4, 4, 8]))


def test_kl_rate_truncated_poisson():
    rep = run_kl_rate(ExperimentConfig(experiment="kl-rate", family="truncated_poisson:30", m_seq=[4, 8, 16, 32]))
    assert all(r["error"] >= 0 for r in rep.rows)
    assert rep.slope <= -3.4
    assert rep.passed


def test_approx_rate_fit_mode_runs():
    cfg = ExperimentConfig(target="sine", family="poisson", m_seq=[2, 4, 8], mode="fit", n_seq=[4000],
                           fit=FitConfig(max_em_iters=15))
    rep = run_approx_rate(cfg)
    assert len(rep.rows) == 3 and all(np.isfinite(r["error"]) for r in rep.rows)


def test_uniform_gate_error_closed_form():
    # 1D with p cells: sqrt((1/p)(1 - 1/p)^2 + (1 - 1/p)(1/p)^2) = sqrt((p - 1) / p^2)
    for p in (2, 4, 8):
        assert uniform_gate_error(Partition.uniform([p]), 2) == pytest.approx(np.sqrt((p - 1) / p**2), rel=1e-14)


def test_gates_check_monotone_and_2d_layers():
    rep = run_gates_check(ExperimentConfig(experiment="gates-check", s=2, m_seq=[16]))
    assert all(r["layers"] == 2 for r in rep.rows)
    mono = [c for c in rep.checks if "decreasing" in c.name]
    assert mono and all(c.passed for c in mono)
    tau0 = [c for c in rep.checks if "tau=0" in c.name]
    assert all(c.passed for c in tau0)


def test_consistency_small():
    cfg = ExperimentConfig(experiment="consistency", family="bernoulli", target="sine", m_seq=[2], n_seq=[200, 3000],
                           reps=4, fit=FitConfig(max_em_iters=40))
    rep = run_consistency(cfg)
    assert len(rep.rows) == 2
    assert all(r["failures"] == 0 for r in rep.rows)
    assert rep.rows[1]["median_mse"] < rep.rows[0]["median_mse"]


def test_consistency_truth_inside_class_beats_smaller_model():
    from hmeglm.expfam import poisson
    from hmeglm.fit import mle
    from hmeglm.gating import GateParams, Structure
    from hmeglm.hme import HMEModel
    from hmeglm.metrics import mse_mean
    from hmeglm.ratelab.experiments import _sample_from

    st = Structure((2,))
    gates = GateParams((np.array([0.0, -5.0]),), (np.array([[0.0], [10.0]]),))
    truth = HMEModel(st, gates, np.array([-0.5, 1.0]), np.array([[0.5], [-0.5]]), poisson())
    rng = np.random.default_rng(8)
    X = rng.random((8000, 1))
    y = _sample_from(truth, X, rng)
    fit2 = mle(st, poisson(), X, y, FitConfig(seed=1, restarts=2, max_em_iters=200)).model
    fit1 = mle(Structure((1,)), poisson(), X, y, FitConfig()).model
    assert mse_mean(fit2, truth) < mse_mean(fit1, truth)


def test_consistency_overfitting_direction_is_reported_not_failed():
    cfg = ExperimentConfig(experiment="consistency", family="bernoulli", target="sine", m_seq=[4, 16], n_seq=[100, 200],
                           reps=3, fit=FitConfig(max_em_iters=30))
    rep = run_consistency(cfg)
    assert {r["m"] for r in rep.rows} == {4, 16}
    # any overfitting observation lives in the notes, never in the checks
    assert not any("overfitting" in c.name for c in rep.checks)


def test_em_diagnostics_small():
    rep = run_em_diagnostics(ExperimentConfig(experiment="em-diagnostics", em_runs=6, grad_configs=6,
                                              fit=FitConfig(max_em_iters=20)))
    assert rep.passed, [c.detail for c in rep.checks]
    assert sum(r["kind"] == "em" for r in rep.rows) == 6


def test_outputs_written_and_deterministic(tmp_path):
    cfg = ExperimentConfig(target="sine", family="poisson", m_seq=[4, 8, 16])
    a = write_outputs(run_approx_rate(cfg), cfg, tmp_path / "a")
    b = write_outputs(run_approx_rate(cfg), cfg, tmp_path / "b", plot=False)
    assert a["results"].read_bytes() == b["results"].read_bytes()
    assert a["metrics"].read_bytes() == b["metrics"].read_bytes()
    assert a["figure"].stat().st_size > 0 and "figure" not in b
    head = a["metrics"].read_text().splitlines()[0]
    assert head == "metric,value,config_hash"
    assert "set logscale xy" in a["gnuplot"].read_text()
    rep = a["report"].read_text()
    assert "[PASS]" in rep and "overall: PASS" in rep


def test_results_csv_header():
    rep = run_approx_rate(ExperimentConfig(m_seq=[4, 8, 16]))
    lines = results_csv(rep).splitlines()
    assert lines[0] == "m,structure,layers,tau,error,flagged" and len(lines) == 4
