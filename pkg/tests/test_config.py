import pytest

from advknn import config as config_module
from advknn.config import Settings, load_run_config, parse_config_file
from advknn.core.exceptions import ConfigParseError
from advknn.models.common_models import Guidance
from advknn.models.run_models import RunConfig


def _write(tmp_path, text):
    path = tmp_path / "run.conf"
    path.write_text(text, encoding="utf-8")
    return path


def test_config_file_values_and_comments(tmp_path):
    path = _write(tmp_path, "# experiment\nk = 50\n\nepsilon = 0.3   # budget\nlambda = 0.5\nguidance = dknnb+cl\n")
    config = load_run_config(path)
    assert config.k == 50
    assert config.epsilon == 0.3
    assert config.lambda_weight == 0.5
    assert config.guidance == Guidance.DKNNB_CL


def test_dashed_keys_are_accepted(tmp_path):
    values, lines = parse_config_file(_write(tmp_path, "attack-limit = 10\n"))
    assert values == {"attack_limit": "10"}
    assert lines == {"attack_limit": 1}


def test_unknown_key_reports_its_line(tmp_path):
    with pytest.raises(ConfigParseError) as excinfo:
        parse_config_file(_write(tmp_path, "k = 3\nbogus = 1\n"))
    assert excinfo.value.line == 2
    assert "bogus" in str(excinfo.value)


def test_duplicate_key_is_rejected(tmp_path):
    with pytest.raises(ConfigParseError) as excinfo:
        parse_config_file(_write(tmp_path, "k = 3\nseed = 1\nk = 4\n"))
    assert excinfo.value.line == 3


def test_line_without_equals_sign(tmp_path):
    with pytest.raises(ConfigParseError) as excinfo:
        parse_config_file(_write(tmp_path, "k 3\n"))
    assert excinfo.value.line == 1


def test_invalid_value_points_at_the_offending_line(tmp_path):
    with pytest.raises(ConfigParseError) as excinfo:
        load_run_config(_write(tmp_path, "seed = 1\nk = -4\n"))
    assert excinfo.value.line == 2


def test_flags_override_the_file(tmp_path):
    path = _write(tmp_path, "k = 50\nepsilon = 0.3\n")
    config = load_run_config(path, {"k": 9, "epsilon": None})
    assert config.k == 9
    assert config.epsilon == 0.3


def test_alpha_above_epsilon_is_rejected():
    with pytest.raises(ConfigParseError):
        load_run_config(None, {"epsilon": 0.01, "alpha": 0.05})


def test_list_and_none_values_from_text(tmp_path):
    config = load_run_config(_write(tmp_path, "dknn_layers = 2, 3\nsweep_grid = 0.1,0.2\nattack_limit = all\n"))
    assert config.dknn_layers == [2, 3]
    assert config.sweep_grid == [0.1, 0.2]
    assert config.attack_limit is None


def test_missing_file_is_a_parse_error(tmp_path):
    with pytest.raises(ConfigParseError):
        parse_config_file(tmp_path / "absent.conf")


def test_stage_fingerprints_track_only_their_inputs():
    base = RunConfig()
    assert base.fingerprint("checkpoint") == RunConfig(epsilon=0.3).fingerprint("checkpoint")
    assert base.fingerprint("records") != RunConfig(epsilon=0.3).fingerprint("records")
    assert base.fingerprint("databases") != RunConfig(seed=1).fingerprint("databases")
    assert base.fingerprint("calibration") == RunConfig(lambda_weight=0.9).fingerprint("calibration")
    assert base.fingerprint("surrogate") != RunConfig(lambda_weight=0.9).fingerprint("surrogate")
    assert base.fingerprint() != RunConfig(workers=4).fingerprint()
    assert base.fingerprint("records") == RunConfig(workers=4).fingerprint("records")


def test_origin_guidance_ignores_surrogate_settings():
    origin = RunConfig(guidance=Guidance.ORIGIN)
    assert origin.fingerprint("records") == RunConfig(guidance=Guidance.ORIGIN, lambda_weight=0.9).fingerprint("records")


def test_settings_read_prefixed_environment(monkeypatch):
    monkeypatch.setenv("ADVKNN_ATTACK_CHUNK_SIZE", "7")
    monkeypatch.setenv("ADVKNN_DEBUG", "true")
    settings = Settings()
    assert settings.attack_chunk_size == 7
    assert settings.check_finite is True


def test_settings_ignore_case_and_unknown_variables(monkeypatch):
    monkeypatch.setenv("advknn_knn_block_size", "33")
    monkeypatch.setenv("ADVKNN_NOT_A_SETTING", "x")
    settings = Settings()
    assert settings.knn_block_size == 33
    assert not hasattr(settings, "not_a_setting")


def test_settings_directories_seed_the_run_config(monkeypatch, tmp_path):
    monkeypatch.setattr(config_module.settings, "output_dir", tmp_path / "elsewhere")
    assert load_run_config().out == tmp_path / "elsewhere"
    assert load_run_config(overrides={"out": tmp_path}).out == tmp_path
