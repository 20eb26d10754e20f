import pytest

from flowdistill import config
from flowdistill.config import ConfigError, ExperimentConfig


def test_defaults_validate_and_round_trip(tmp_path):
    cfg = ExperimentConfig()
    cfg.validate()
    text = config.dumps(cfg)
    assert config.loads(text) == cfg
    path = tmp_path / "c.toml"
    config.save(cfg, path)
    assert config.load(path, env={}) == cfg


def test_round_trip_preserves_edits():
    cfg = ExperimentConfig(seed=7)
    cfg.ccd.sampler.kind = "uniform"
    cfg.dataset.weights = [0.1, 0.2, 0.3, 0.4]
    cfg.ta_rounds = [[16, 8], [8, 4], [4, 2]]
    back = config.loads(config.dumps(cfg))
    assert back == cfg
    assert back.ccd.sampler.kind == "uniform"


def test_preference_defaults_unchanged():
    cfg = config.loads(config.dumps(ExperimentConfig()))
    assert cfg.ta.beta == 2500.0
    assert cfg.ta.lambda_rf == 2.0
    assert cfg.ccd.ema_mu == 0.95 and cfg.ccd.norm_c == 0.1 and cfg.ccd.warmup_H == 1000
    assert cfg.ta_round(4, 2).steps_w == 4 and cfg.ta_round(4, 2).beta == 2500.0


def test_unknown_key_is_named():
    with pytest.raises(ConfigError, match="ccd.lrr"):
        config.loads("[ccd]\nlrr = 1.0\n")
    with pytest.raises(ConfigError, match="bogus"):
        config.loads("bogus = 1\n")


@pytest.mark.parametrize(
    "text",
    [
        "seed = 'x'\n",
        "[ccd]\nlr = true\n",
        "[ccd]\nwarmup_H = 1.5\n",
        "[dataset]\nweights = 3\n",
        "ta_rounds = [[4, 8]]\n",
        "deploy = 'both'\n",
        "version = '0'\n",
        "[ccd]\nwarmup_H = 99999\n",
        "[eval]\nsteps_list = [4, 2]\n",
        "seed = \n",
    ],
)
def test_bad_values_raise_config_error(text):
    with pytest.raises(ConfigError):
        config.loads(text)


def test_int_accepted_for_float():
    assert config.loads("[ccd]\nlr = 1\n").ccd.lr == 1.0


def test_env_overrides(tmp_path):
    path = tmp_path / "c.toml"
    config.save(ExperimentConfig(), path)
    env = {
        "FLOWDISTILL_SEED": "5",
        "FLOWDISTILL_CCD__LR": "3e-4",
        "FLOWDISTILL_CCD__SAMPLER__KIND": "uniform",
        "FLOWDISTILL_DEPLOY": "ema",
        "OTHER": "ignored",
    }
    cfg = config.load(path, env=env)
    assert cfg.seed == 5 and cfg.ccd.lr == 3e-4 and cfg.ccd.sampler.kind == "uniform" and cfg.deploy == "ema"
    with pytest.raises(ConfigError, match="ccd.nope"):
        config.load(path, env={"FLOWDISTILL_CCD__NOPE": "1"})


def test_missing_file_is_config_error(tmp_path):
    with pytest.raises(ConfigError):
        config.load(tmp_path / "absent.toml", env={})


def test_schema_lists_every_key():
    lines = config.schema()
    names = [ln.split(":")[0] for ln in lines]
    assert "ta.beta" in names and "ccd.sampler.kind" in names and "dataset.weights" in names
    assert any(ln.startswith("ta.beta: float = 2500.0") for ln in lines)
    assert any(ln.startswith("dataset.weights:") and ln.endswith("unset") for ln in lines)
