from pathlib import Path

import pytest

from wafermd.config import Settings, build_run_config, parse_int_list, read_config_file


def test_defaults_follow_settings():
    config = build_run_config(Settings())
    assert config.cells == (6, 6, 6)
    assert (config.grid_width, config.grid_height) == (920, 920)
    assert config.cost_per_hop == 32
    assert config.cost_per_arrival == 1
    assert config.engine == "wafer"


def test_environment_overrides(monkeypatch):
    monkeypatch.setenv("WAFERMD_FABRIC_COST_PER_HOP", "48")
    monkeypatch.setenv("WAFERMD_RUN_STEPS", "7")
    config = build_run_config(Settings())
    assert config.cost_per_hop == 48
    assert config.steps == 7


def test_flags_win_over_config_file(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text('cores_per_atom = 2\nskin = 0.3\n\n[mapping]\nremap_radius = 6\n')
    config = build_run_config(Settings(), path, {"cores_per_atom": 4, "skin": None})
    assert config.cores_per_atom == 4
    assert config.skin == 0.3
    assert config.remap_radius == 6


def test_invalid_values_raise_value_error():
    with pytest.raises(ValueError, match="Invalid run configuration"):
        build_run_config(Settings(), overrides={"cores_per_atom": 0})
    with pytest.raises(ValueError, match="exceeds grid width"):
        build_run_config(Settings(), overrides={"grid_width": 3, "cores_per_atom": 4})


def test_config_file_errors(tmp_path):
    with pytest.raises(ValueError, match="not found"):
        read_config_file(tmp_path / "missing.toml")
    bad = tmp_path / "bad.toml"
    bad.write_text("cells = [6, 6\n")
    with pytest.raises(ValueError, match="not valid TOML"):
        read_config_file(Path(bad))


def test_parse_int_list():
    assert parse_int_list("1,2, 3") == [1, 2, 3]
    assert parse_int_list("") == []
    assert parse_int_list(None) == []
