import pytest

from dxtk import config as cfgmod
from dxtk.config import ConfigError, RunConfig


def test_default_snapshot_round_trip():
    cfg = RunConfig()
    assert cfgmod.parse_text(cfgmod.to_text(cfg)) == cfg


def test_modified_snapshot_round_trip():
    cfg = cfgmod.parse_text("[flywheel]\nstage_sizes = 3, 4, 5\nseed = 11\ndemo_threshold = 50\n"
                            "[ppo]\nlr = 0.001\n[paths]\nrun_dir = out/x\n")
    assert cfg.flywheel.stage_sizes == (3, 4, 5) and cfg.seed == 11
    assert cfg.flywheel.demo_threshold == 50.0 and cfg.ppo.lr == 0.001 and cfg.paths.run_dir == "out/x"
    assert cfgmod.parse_text(cfgmod.to_text(cfg)) == cfg
    assert cfg.with_seed(4).seed == 4


@pytest.mark.parametrize("text", [
    "[nosuch]\na = 1\n",
    "[ppo]\nnosuch = 1\n",
    "[ppo]\nenvs = 1.5\n",
    "[ppo]\nenvs = many\n",
    "[flywheel]\nstage_sizes = 1, 0, 1\n",
    "[sim]\ndt = True\n",
    "not an ini file",
])
def test_bad_configs_raise(text):
    with pytest.raises(ConfigError):
        cfgmod.parse_text(text)


def test_load_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        cfgmod.load(tmp_path / "absent.ini")
    path = tmp_path / "run.ini"
    path.write_text("[flywheel]\nseed = 2\n")
    assert cfgmod.load(path).seed == 2


def test_presets_keep_seed():
    cfg = cfgmod.with_preset(RunConfig().with_seed(9), "full")
    assert cfg.flywheel.stage_sizes == (100, 100, 200) and cfg.seed == 9
    with pytest.raises(ConfigError):
        cfgmod.with_preset(RunConfig(), "huge")


def test_run_dir_from_environment(monkeypatch):
    monkeypatch.delenv(cfgmod.RUN_DIR_ENV, raising=False)
    assert cfgmod.apply_env(RunConfig()).paths.run_dir == "runs/default"
    monkeypatch.setenv(cfgmod.RUN_DIR_ENV, "/tmp/elsewhere")
    assert cfgmod.apply_env(RunConfig()).paths.run_dir == "/tmp/elsewhere"
