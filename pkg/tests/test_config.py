import pytest

from adrf.config import DESK_OVERRIDES, PAPER, SCHEMA, ConfigError, load_config


def test_paper_scale_uses_published_hyperparameters():
    cfg = load_config(scale="paper")
    assert cfg["imu.epochs"] == 500 and cfg["imu.lr"] == 0.01 and cfg["imu.batch"] == 1
    assert cfg["imu.autoencoder_hidden"] == (128, 64)
    assert cfg["vision.lambda"] == 100.0
    assert cfg["vision.cgan_epochs"] == 20 and cfg["vision.cgan_lr"] == 1e-4
    assert cfg["vision.codec_epochs"] == 100 and cfg["corpus.frame_size"] == 128
    assert cfg["calibration.confidence"] == 0.95
    assert cfg["calibration.candidates"][0] == "birnbaum_saunders"


def test_desk_overrides_only_listed_keys():
    desk, paper = load_config(scale="desk"), load_config(scale="paper")
    for section, keys in SCHEMA.items():
        for k in keys:
            if k in DESK_OVERRIDES.get(section, {}):
                continue
            assert desk[f"{section}.{k}"] == paper[f"{section}.{k}"]
    assert desk["corpus.frame_size"] == 32


def test_schema_and_defaults_agree():
    assert {s: set(v) for s, v in PAPER.items()} == {s: set(v) for s, v in SCHEMA.items()}


def test_file_overrides(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text("[imu]\nepochs = 3\n[vision]\nmirror = no\n")
    cfg = load_config(p)
    assert cfg["imu.epochs"] == 3 and cfg["vision.mirror"] is False


@pytest.mark.parametrize("text,needle", [
    ("[imu]\nepoch = 3\n", "imu.epoch"),
    ("[training]\nepochs = 3\n", "training"),
    ("[imu]\nepochs = many\n", "imu.epochs"),
    ("[vision]\nmirror = maybe\n", "vision.mirror"),
    ("epochs = 3\n", "c.ini"),
])
def test_bad_files_name_the_problem(tmp_path, text, needle):
    p = tmp_path / "c.ini"
    p.write_text(text)
    with pytest.raises(ConfigError, match=needle):
        load_config(p)


def test_unknown_key_lookup_and_scale():
    cfg = load_config()
    with pytest.raises(ConfigError, match="unknown"):
        cfg["imu.nope"]
    with pytest.raises(ConfigError):
        load_config(scale="huge")


def test_ini_round_trip(tmp_path):
    cfg = load_config(scale="paper")
    p = tmp_path / "dump.ini"
    p.write_text(cfg.to_ini())
    again = load_config(p, scale="desk")
    for section, keys in SCHEMA.items():
        for k in keys:
            assert again[f"{section}.{k}"] == cfg[f"{section}.{k}"]
