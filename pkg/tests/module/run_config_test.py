import json
from pathlib import Path

import pytest

from distillkit.config import LossKind
from distillkit.runConfig import build_run_config, load_run_variables
from utils.exceptions import ConfigError

CONFIG_DIR = Path(__file__).resolve().parents[2] / "configFiles"


def test_defaults_without_variables():
    run = build_run_config({}, None)
    assert run.train.loss == LossKind.CONTRASTIVE
    assert run.student.conv_layers[0] == (5, 1, 256)
    assert run.features.fbank.window_ms == 25.0
    assert run.augment is run.train.augment


def test_sections_and_overrides(tmp_path):
    variables = {
        "seed": 7,
        "workers": 2,
        "features": {"window_ms": 20.0, "cmn_window_s": 2.0},
        "vad": {"absolute_floor": -10.0},
        "augment": {"crop_min_s": 1.0, "crop_max_s": 1.5},
        "student": {"preset": "tdnn-tiny"},
        "train": {"loss": "mse", "epochs": 3},
        "aam": {"margin": 0.2},
        "synth": {"n_speakers": 5},
    }
    path = tmp_path / "run.json"
    path.write_text(json.dumps(variables))
    overrides = {'train': {'epochs': 9, 'batch_size': None}, 'student': {'pooling': 'gap'}, 'seed': None}
    run = build_run_config(load_run_variables(str(path)), overrides)

    assert run.seed == 7 and run.workers == 2
    assert run.features.fbank.window_ms == 20.0
    assert run.features.cmn_window_s == 2.0
    assert run.features.vad.absolute_floor == -10.0
    assert run.augment.crop_max_s == 1.5
    assert run.student.conv_layers[0] == (5, 1, 64)
    assert run.student.pooling == "gap"
    assert run.student.seed == run.train.seed == run.synth.seed == 7
    assert run.train.loss == LossKind.MSE
    assert run.train.epochs == 9
    assert run.train.batch_size == 64
    assert run.train.workers == 2
    assert run.train.aam.margin == 0.2
    assert run.synth.n_speakers == 5


def test_shipped_config_files_load():
    for name in ("default_run.json", "desk_tiny.json"):
        run = build_run_config(load_run_variables(str(CONFIG_DIR / name)))
        assert run.train.epochs >= 1
    tiny = build_run_config(load_run_variables(str(CONFIG_DIR / "desk_tiny.json")))
    assert tiny.student.conv_layers[-1] == (1, 1, 128)


def test_rejects_unknown_keys_and_bad_values(tmp_path):
    with pytest.raises(ConfigError) as error:
        build_run_config({"train": {"learning_rate": 0.1}})
    assert "learning_rate" in error.value.message
    with pytest.raises(ConfigError):
        build_run_config({"optimizer": {}})
    with pytest.raises(ConfigError):
        build_run_config({"train": {"loss": "bogus"}})
    with pytest.raises(ConfigError):
        build_run_config({"student": {"preset": "huge"}})
    with pytest.raises(ConfigError):
        build_run_config({"workers": 0})


def test_config_file_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_run_variables(str(tmp_path / "missing.json"))
    broken = tmp_path / "broken.json"
    broken.write_text("{not json")
    with pytest.raises(ConfigError):
        load_run_variables(str(broken))
    listing = tmp_path / "list.json"
    listing.write_text("[1, 2]")
    with pytest.raises(ConfigError):
        load_run_variables(str(listing))


@pytest.mark.parametrize("variables", [{"seed": "abc"}, {"workers": "many"}, {"seed": None}])
def test_non_numeric_seed_or_workers_is_a_config_error(variables):
    with pytest.raises(ConfigError) as error:
        build_run_config(variables)
    print(f"Rejected {variables}: {error.value.message}")
    assert "seed" in error.value.message
