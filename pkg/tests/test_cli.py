import json
import shutil

import pytest

from advknn.core.reports import read_report_csv
from advknn.main import build_parser, main, run_config_from_args
from advknn.models.common_models import Guidance


@pytest.fixture
def run_conf(tmp_path, idx_dir):
    out = tmp_path / "runs"
    path = tmp_path / "small.conf"
    path.write_text("\n".join([
        f"data_dir = {idx_dir}",
        f"out = {out}",
        "calibration_per_class = 2",
        "epochs = 1",
        "batch_size = 40",
        "database_size = 60",
        "k = 5",
        "surrogate_epochs = 1",
        "surrogate_batch_size = 30",
        "epsilon = 0.1",
        "alpha = 0.05",
        "steps = 2",
        "attack_limit = 4",
    ]) + "\n", encoding="utf-8")
    return path, out


def _error(capsys):
    err = capsys.readouterr().err.strip().splitlines()
    lines = [line for line in err if line.startswith("error: ")]
    assert len(lines) == 1
    return json.loads(lines[0][len("error: "):])


def test_flags_map_onto_run_config(tmp_path):
    args = build_parser().parse_args(["attack", "--lambda", "0.7", "--guidance", "dknnb+cl", "--limit", "3",
                                      "--k-show", "2", "--out", str(tmp_path)])
    config = run_config_from_args(args)
    assert config.lambda_weight == 0.7
    assert config.guidance == Guidance.DKNNB_CL
    assert config.attack_limit == 3
    assert config.panel_k_show == 2
    assert config.out == tmp_path


def test_unknown_command_exits_through_argparse():
    with pytest.raises(SystemExit):
        main(["does-not-exist"])


def test_bad_config_file_is_a_usage_error(tmp_path, capsys):
    conf = tmp_path / "bad.conf"
    conf.write_text("k = 3\nwhat = 1\n", encoding="utf-8")
    assert main(["status", "--config", str(conf), "--out", str(tmp_path / "runs")]) == 2
    payload = _error(capsys)
    assert payload["code"] == "config_parse_error"
    assert payload["line"] == 2


def test_status_lists_missing_artifacts(tmp_path, capsys):
    assert main(["status", "--out", str(tmp_path / "runs")]) == 0
    status = json.loads(capsys.readouterr().out)
    assert {a["status"] for a in status["artifacts"]} == {"missing"}
    assert status["ready_commands"] == ["train-base"]


def test_train_surrogate_with_origin_guidance_is_rejected(run_conf, capsys):
    conf, _ = run_conf
    assert main(["train-surrogate", "--config", str(conf), "--guidance", "origin"]) == 2
    assert _error(capsys)["code"] == "configuration_error"


def _pipeline(conf, capsys):
    for command in ("train-base", "build-db", "calibrate"):
        assert main([command, "--config", str(conf)]) == 0, command
    capsys.readouterr()

    assert main(["attack", "--config", str(conf)]) == 3
    payload = _error(capsys)
    assert payload["code"] == "missing_dependency"
    assert "surrogate-" in payload["artifact"]

    for command in ("train-surrogate", "attack", "evaluate", "panel", "tables"):
        assert main([command, "--config", str(conf)]) == 0, command
    capsys.readouterr()


def test_small_pipeline_end_to_end_is_reproducible(run_conf, capsys):
    conf, out = run_conf
    _pipeline(conf, capsys)

    metrics = sorted(out.glob("metrics-*.csv"))
    detection = sorted(out.glob("detection-*.csv"))
    clean = sorted(out.glob("clean-*.csv"))
    assert len(metrics) == len(detection) == len(clean) == 1
    frame, echo = read_report_csv(metrics[0])
    assert echo["k"] == 5 and echo["guidance"] == "dknnb-cl"
    assert frame.loc[0, "samples"] == 4
    assert 0.0 <= frame.loc[0, "dknn_accuracy"] <= 1.0
    assert frame.loc[0, "mean_linf"] <= 0.1 + 1e-6
    assert len(list((out / "panels").glob("*.pgm"))) >= 4
    assert sorted(out.glob("table-attacks-*.csv"))

    panel_csvs = sorted((out / "panels").glob("panel-*.csv"))
    assert panel_csvs
    for path in panel_csvs:
        _, panel_echo = read_report_csv(path)
        assert panel_echo["k"] == 5 and panel_echo["panel_k_show"] == 5
    emitted = {p: (p.read_bytes(), p.stat().st_mtime_ns) for p in (out / "panels").iterdir()}
    emitted.update({p: (p.read_bytes(), p.stat().st_mtime_ns) for p in out.glob("table-*.csv")})
    assert main(["panel", "--config", str(conf)]) == 0
    assert main(["tables", "--config", str(conf)]) == 0
    capsys.readouterr()
    for path, (content, mtime) in emitted.items():
        assert path.read_bytes() == content and path.stat().st_mtime_ns == mtime

    assert main(["status", "--config", str(conf)]) == 0
    status = json.loads(capsys.readouterr().out)
    assert {a["status"] for a in status["artifacts"]} == {"present"}

    first = {p.name: p.read_bytes() for p in out.glob("*.csv") if not p.name.startswith("table-")}
    shutil.rmtree(out)
    _pipeline(conf, capsys)
    second = {p.name: p.read_bytes() for p in out.glob("*.csv") if not p.name.startswith("table-")}
    assert first == second
