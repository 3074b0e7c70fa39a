import pytest
import yaml

from pcdf.config import ConfigError, build_config, load_config


def test_defaults_and_desk_profile():
    paper = build_config()
    assert paper.detector.image_size == (640, 512) and paper.detector.num_classes == 11
    assert paper.prompt.tau == 0.15 and paper.loss.cmd_order == 5
    desk = build_config({"profile": "desk"})
    assert desk.detector.image_size == (64, 64) and desk.detector.num_classes == 3


def test_precedence_file_then_overrides(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text(yaml.safe_dump({"profile": "desk", "seed": 3, "detector": {"epochs": 4}}))
    cfg = load_config(p, {"detector": {"epochs": 2}})
    assert cfg.seed == 3 and cfg.detector.epochs == 2 and cfg.detector.channels == 32


def test_dump_round_trip(tmp_path):
    cfg = build_config({"profile": "desk", "ablate": {"pcd": True}})
    cfg.dump(tmp_path / "x.yaml")
    again = load_config(tmp_path / "x.yaml")
    assert again.digest() == cfg.digest()


@pytest.mark.parametrize(
    "bad",
    [
        {"detector": {"epochs": "many"}},
        {"detektor": {}},
        {"fusion": {"mode": "max"}},
        {"loss": {"lambda1": -1}},
        {"profile": "laptop"},
        {"prompt": {"tau": 2.0}},
        {"ablate": {"pcd": "yes"}},
        {"detector": {"stride": 16}},
    ],
)
def test_invalid_configs(bad):
    with pytest.raises(ConfigError):
        build_config(bad)


def test_active_ablations():
    assert build_config({"ablate": {"l_dt": True, "scpt": True}}).ablate.active() == ["scpt", "l_dt"]
