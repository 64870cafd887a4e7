import pytest
import torch

from viewmi.config import (
    Config,
    ConfigError,
    FlowSettings,
    PointSettings,
    ProbeCommandSettings,
    SynthSettings,
    config_from_dict,
    load_config,
)
from viewmi.experiments import (
    FactorStudySettings,
    FrequencySweepSettings,
    PatchSweepSettings,
)


def test_defaults_load_without_a_file():
    cfg = load_config(None)
    assert cfg.dataset.canvas == 64
    assert cfg.encoder.in_channels == 3
    assert cfg.flow.mode == "VP"
    assert cfg.view_learning.mode == "unsupervised"
    assert isinstance(cfg.sweep_settings(), FrequencySweepSettings)


def test_yaml_round_trip(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text(
        "dataset: {canvas: 48, digit: 20}\n"
        "flow: {mode: NVP, depth: 4}\n"
        "sweep:\n"
        "  experiment: patch_distance\n"
        "  distances: [0, 32, 64]\n"
        "  seeds: [7]\n"
    )
    cfg = load_config(p)
    assert cfg.dataset.canvas == 48
    assert cfg.flow.mode == "NVP" and cfg.flow.depth == 4
    s = cfg.sweep_settings()
    assert isinstance(s, PatchSweepSettings)
    assert s.distances == (0, 32, 64)
    assert s.seeds == (7,)


def test_sweep_seed_override_replaces_seed_grid():
    cfg = config_from_dict({"sweep": {"experiment": "frequency", "seeds": [0, 1, 2]}})
    assert cfg.sweep_settings().seeds == (0, 1, 2)
    assert cfg.sweep_settings(seed_override=9).seeds == (9,)


def test_nested_dataset_section_builds_the_dataset_config():
    cfg = config_from_dict(
        {"sweep": {"experiment": "moving_mnist_factors", "dataset": {"canvas": 32, "digit": 14}}}
    )
    s = cfg.sweep_settings()
    assert isinstance(s, FactorStudySettings)
    assert s.dataset.canvas == 32 and s.dataset.digit == 14


def test_unknown_section_rejected_with_name():
    with pytest.raises(ConfigError, match="flows"):
        config_from_dict({"flows": {"depth": 3}})


def test_unknown_field_rejected_with_path():
    with pytest.raises(ConfigError, match=r"flow: unknown field.*depht"):
        config_from_dict({"flow": {"depht": 3}})
    with pytest.raises(ConfigError, match=r"sweep\.dataset"):
        config_from_dict(
            {"sweep": {"experiment": "moving_mnist_factors", "dataset": {"canvs": 9}}}
        )


def test_invalid_field_value_carries_section_path():
    with pytest.raises(ConfigError, match="dataset"):
        config_from_dict({"dataset": {"canvas": 8, "digit": 28}})  # digit > canvas


def test_unknown_experiment_rejected():
    cfg = Config(sweep_experiment="nope")
    with pytest.raises(ConfigError, match="nope"):
        cfg.sweep_settings()
    with pytest.raises(ConfigError, match="nope"):
        config_from_dict({"sweep": {"experiment": "nope"}})


def test_section_must_be_mapping():
    with pytest.raises(ConfigError, match="expected a mapping"):
        config_from_dict({"flow": [1, 2]})
    with pytest.raises(ConfigError, match="mapping"):
        config_from_dict([1, 2])


def test_missing_file_and_bad_yaml(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "absent.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("flow: {mode: [unclosed\n")
    with pytest.raises(ConfigError, match="invalid YAML"):
        load_config(bad)


def test_theory_tables_validation():
    assert config_from_dict({"theory_tables": 10}).theory_tables == 10
    for bad in (0, -3, "many"):
        with pytest.raises(ConfigError, match="theory_tables"):
            config_from_dict({"theory_tables": bad})


def test_flow_settings_build_is_invertible():
    g = FlowSettings(mode="NVP", depth=3, width=8, seed=4).build()
    x = torch.randn(2, 3, 6, 6)
    assert torch.allclose(g.inverse(g(x)), x, atol=1e-4)


def test_small_section_validation():
    with pytest.raises(ValueError):
        SynthSettings(samples=0)
    with pytest.raises(ValueError):
        SynthSettings(singles=-1)
    with pytest.raises(ValueError):
        ProbeCommandSettings(task="segmentation")
    with pytest.raises(ValueError):
        PointSettings(experiment="moving_mnist_factors")
