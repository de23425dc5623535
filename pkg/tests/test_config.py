import pytest

from mixedcap.config import OUTPUT_ENV, RunConfig, apply_overrides, load_config
from mixedcap.errors import ConfigError
from mixedcap.interaction import ROBOT_WEIGHTS


def test_defaults_describe_reference_scenario():
    cfg = RunConfig()
    assert (cfg.params.L, cfg.params.h, cfg.params.h_bar, cfg.params.n) == (4.0, 30.0, 11.0, 2)
    assert cfg.vehicle_count == 20 and cfg.budgets.total == 200


def test_round_trip(tmp_path):
    cfg = apply_overrides(RunConfig(), ["alpha_bar=0.3", "controller.horizon=4", "weights.human.lane_center=2.5"])
    path = tmp_path / "run.yaml"
    path.write_text(cfg.to_yaml())
    again = load_config(path)
    assert again == cfg
    assert again.to_yaml() == cfg.to_yaml()


def test_partial_sections_keep_defaults():
    cfg = RunConfig.from_yaml("weights:\n  robot:\n    target_speed: 20\nroad:\n  n: 3\nvehicle_count: 21\n")
    assert cfg.weights.robot.target_speed == 20.0
    assert cfg.weights.robot.target_lane == ROBOT_WEIGHTS.target_lane
    assert cfg.params.n == 3 and cfg.geometry.lane_count == 3


@pytest.mark.parametrize("text,field", [
    ("road:\n  h: 5\n", "road"),
    ("alpha_bar: 1.5\n", "alpha_bar"),
    ("vehicle_count: 1\n", "vehicle_count"),
    ("road:\n  lanes: 2\n", "road.lanes"),
    ("controller:\n  horizon: 0\n", "controller"),
    ("controller:\n  horizon: two\n", "controller.horizon"),
    ("init_mode: poisson\n", "init_mode"),
    ("- 1\n- 2\n", "root"),
    ("road: [1\n", "YAML"),
])
def test_errors_name_the_field(text, field):
    with pytest.raises(ConfigError, match=field):
        RunConfig.from_yaml(text)


def test_override_errors():
    with pytest.raises(ConfigError):
        apply_overrides(RunConfig(), ["alpha_bar"])
    with pytest.raises(ConfigError):
        apply_overrides(RunConfig(), ["nope.x=1"])
    with pytest.raises(ConfigError):
        apply_overrides(RunConfig(), ["road.width=1"])


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.yaml")


def test_output_env(monkeypatch, tmp_path):
    monkeypatch.delenv(OUTPUT_ENV, raising=False)
    assert str(RunConfig(output_dir="somewhere").output_path()) == "somewhere"
    monkeypatch.setenv(OUTPUT_ENV, str(tmp_path))
    assert RunConfig(output_dir="somewhere").output_path() == tmp_path
