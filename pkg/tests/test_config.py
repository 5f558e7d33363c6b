import pytest
import yaml

from facadescope.config import ConfigError, PipelineConfig, config_from_dict, dump_config, load_config
from facadescope.quality import DEFAULT_SEVERITY_TABLE


def test_defaults_validate():
    cfg = config_from_dict({})
    assert cfg.visibility.radius_m == 50.0 and cfg.split.ratio == [6.0, 1.0, 3.0]
    assert cfg.corruption == {k: list(v) for k, v in DEFAULT_SEVERITY_TABLE.items()}


def test_dump_load_round_trip(tmp_path):
    cfg = config_from_dict(
        {
            "visibility": {"radius_m": 40},
            "detector": {"kind": "http", "endpoint": "http://x/detect"},
            "evaluation": {"age_reference_year": 2024},
            "corruption": {"occlusion": [0.05, 0.1, 0.2]},
            "seed": 3,
        }
    )
    p = tmp_path / "c.yaml"
    p.write_text(dump_config(cfg))
    again = load_config(p)
    assert again.to_dict() == cfg.to_dict()
    assert again.base_dir == str(tmp_path)
    assert "base_dir" not in yaml.safe_load(p.read_text())


def test_partial_corruption_table_merges():
    cfg = config_from_dict({"corruption": {"gaussian_noise": [5, 6, 7]}})
    assert cfg.corruption["gaussian_noise"] == [5.0, 6.0, 7.0]
    assert cfg.corruption["occlusion"] == list(DEFAULT_SEVERITY_TABLE["occlusion"])


@pytest.mark.parametrize(
    "data,field",
    [
        ({"visibility": {"radius_m": -1}}, "visibility.radius_m"),
        ({"visibility": {"radius": 10}}, "visibility.radius"),
        ({"ingest": {"min_quality": "high"}}, "ingest.min_quality"),
        ({"detector": {"kind": "fixture"}}, "detector.fixture_dir"),
        ({"detector": {"kind": "magic"}}, "detector.kind"),
        ({"split": {"ratio": [1, 1]}}, "split.ratio"),
        ({"corruption": {"fog": [1, 2, 3]}}, "corruption.fog"),
        ({"corruption": {"motion_blur": [5.5, 11, 21]}}, "corruption.motion_blur"),
        ({"evaluation": {"age_reference_year": 24}}, "evaluation.age_reference_year"),
        ({"seed": True}, "seed"),
        ({"paths": "here"}, "paths"),
    ],
)
def test_validation_names_field(data, field):
    with pytest.raises(ConfigError) as err:
        config_from_dict(data)
    assert err.value.field == field
    assert f"'{field}'" in str(err.value)


def test_bad_yaml(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("a: [1, 2\n")
    with pytest.raises(ConfigError):
        load_config(p)
    p.write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError, match="mapping"):
        load_config(p)


def test_resolve_relative_to_config(tmp_path):
    cfg = config_from_dict({}, base_dir=tmp_path)
    assert cfg.resolve("a/b.json") == tmp_path / "a/b.json"
    assert cfg.resolve("/abs/x") .as_posix() == "/abs/x"
    assert cfg.resolve(None) is None


def test_validate_is_chainable():
    assert isinstance(PipelineConfig().validate(), PipelineConfig)
