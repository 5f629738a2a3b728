import pytest

from utils.config import (
    PipelineConfig, apply_overrides, config_lines, environment_overrides, load_config, parse_assignments,
    write_resolved,
)
from utils.errors import ConfigError


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "pipeline.conf"
    path.write_text("# comment\nSEED=1\nMINING_DELTA1=0.4\nRUN_ENV=no\n")
    return str(path)


def test_defaults_validate():
    cfg = load_config(environ={})
    assert cfg.seed == 0
    assert cfg.run_env is True


def test_precedence(config_file):
    assert load_config(config_file, environ={}).seed == 1
    assert load_config(config_file, environ={"GMAP_SEED": "2"}).seed == 2
    assert load_config(config_file, {"SEED": "3"}, environ={"GMAP_SEED": "2"}).seed == 3


def test_file_values_reach_nested_sections(config_file):
    cfg = load_config(config_file, environ={})
    assert cfg.mining.delta1 == 0.4
    assert cfg.run_env is False


def test_tuple_and_float_coercion():
    cfg = load_config(overrides={"RENDER_BACKGROUND": "0.1, 0.2, 0.3", "RENDER_ALPHA_MIN": "0.001"}, environ={})
    assert cfg.render.background == (0.1, 0.2, 0.3)
    assert cfg.render.alpha_min == 0.001


def test_keys_are_case_insensitive():
    assert load_config(overrides={"distill_steps": "12"}, environ={}).distill_steps == 12


def test_unknown_key_names_its_source():
    with pytest.raises(ConfigError, match="unknown configuration key NOPE \\(from environment\\)"):
        load_config(environ={"GMAP_NOPE": "1"})


def test_invalid_value():
    with pytest.raises(ConfigError, match="invalid value for RUN_ENV"):
        load_config(overrides={"RUN_ENV": "maybe"}, environ={})
    with pytest.raises(ConfigError, match="SEED"):
        load_config(overrides={"SEED": "1.5"}, environ={})


def test_out_of_range_value_fails_validation():
    with pytest.raises(ConfigError, match="delta1"):
        load_config(overrides={"MINING_DELTA1": "1.5"}, environ={})


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(str(tmp_path / "absent.conf"), environ={})


def test_environment_prefix_is_stripped():
    assert environment_overrides({"GMAP_SEED": "4", "HOME": "/root"}) == {"SEED": "4"}


def test_parse_assignments():
    assert parse_assignments(["SEED=5", "DATASET_DIR=a=b"]) == {"SEED": "5", "DATASET_DIR": "a=b"}
    with pytest.raises(ConfigError, match="KEY=VALUE"):
        parse_assignments(["SEED"])


def test_none_values_are_skipped():
    cfg = apply_overrides(PipelineConfig(), {"SEED": None})
    assert cfg.seed == 0


def test_resolved_config_round_trips(tmp_path):
    cfg = load_config(overrides={"SEED": "7", "RENDER_BACKGROUND": "0.5,0.25,0.0", "RUN_MINE": "false"},
                      environ={})
    lines = config_lines(cfg)
    assert list(lines) == sorted(lines)
    assert "SEED=7" in lines
    assert "RUN_MINE=false" in lines
    path = str(tmp_path / "config.resolved")
    write_resolved(cfg, path)
    assert config_lines(load_config(path, environ={})) == lines


def test_training_settings_carry_worker_count():
    cfg = load_config(overrides={"WORKERS": "3", "SEED": "2"}, environ={})
    settings = cfg.training_settings()
    assert settings.render.workers == 3
    assert settings.seed == 2
    assert cfg.render_settings().workers == 3
    assert cfg.render.workers == 1


def test_reference_area_accepts_fractional_values():
    cfg = load_config(overrides={"MINING_REFERENCE_AREA": "19800.5"}, environ={})
    assert cfg.mining.reference_area == 19800.5
    assert load_config(environ={}).mining.reference_area == 19800.0
