import json
import subprocess
import sys

import pytest

from hmeglm.hme import load_model
from hmeglm.ratelab.cli import build_parser, config_from_args, main


def test_flags_override_config_file(tmp_path):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({"family": "bernoulli", "m": [4, 8, 16], "seed": 3, "fit": {"restarts": 2}}))
    args = build_parser().parse_args(["kl-rate", "--config", str(cfg_path), "--seed", "9", "--box", "20"])
    cfg = config_from_args(args)
    assert cfg.experiment == "kl-rate" and cfg.family == "bernoulli"
    assert cfg.m_seq == [4, 8, 16] and cfg.seed == 9
    assert cfg.fit.restarts == 2 and cfg.fit.box_bound == 20.0


def test_approx_rate_exit_code_and_outputs(tmp_path, capsys):
    out = tmp_path / "run"
    code = main(["approx-rate", "--m", "4,8,16,32", "--out", str(out)])
    assert code == 0
    assert {p.name for p in out.iterdir()} >= {"results.csv", "metrics.csv", "report.txt", "plot.gp", "figure.png", "config.json"}
    assert "overall: PASS" in capsys.readouterr().out


def test_failing_check_gives_nonzero_exit(tmp_path):
    # a ladder that stops at tau=16 cannot reach the 0.02 bound
    code = main(["gates-check", "--m", "2,4", "--tau-ladder", "4,16", "--out", str(tmp_path / "g"), "--no-plot"])
    assert code == 1


def test_bad_input_reports_error(tmp_path, capsys):
    code = main(["approx-rate", "--family", "gamma", "--out", str(tmp_path / "x")])
    assert code == 2
    assert "unknown family" in capsys.readouterr().err


def test_sample_and_fit_subcommands(tmp_path):
    data = tmp_path / "data.csv"
    assert main(["sample", "--target", "sine1d", "--family", "poisson", "--n", "300", "--out", str(data)]) == 0
    model = tmp_path / "model.json"
    trace = tmp_path / "trace.csv"
    assert main(["fit", str(data), "--family", "poisson", "--layers", "2", "--max-iters", "10",
                 "--model-out", str(model), "--trace-out", str(trace)]) == 0
    assert load_model(model).m == 2
    assert trace.read_text().startswith("iter,loglik")


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "hmeglm.ratelab", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "approx-rate" in proc.stdout


def test_unknown_subcommand():
    with pytest.raises(SystemExit):
        build_parser().parse_args(["nope"])
