"""Environment settings and experiment file validation."""

import re
from pathlib import Path

import pytest
import yaml

from attacks import BIM, FGSM, PGD, PGD_R
from config import (PROFILES, Settings, build_experiment_config, load_experiment_config,
                    setup_logging)
from exceptions import ConfigurationError

SETTINGS = Settings(data_dir="/data/cmapss", run_dir="/runs/x", workers=2)


def test_settings_from_env(monkeypatch):
    monkeypatch.setenv("LOG_LEVEL", "debug")
    monkeypatch.setenv("CMAPSS_DATA_DIR", "/tmp/cmapss")
    monkeypatch.setenv("RUN_DIR", "/tmp/run")
    monkeypatch.setenv("WORKERS", "4")
    settings = Settings.from_env()
    assert (settings.log_level, settings.data_dir, settings.run_dir, settings.workers) == (
        "DEBUG", "/tmp/cmapss", "/tmp/run", 4)
    monkeypatch.setenv("WORKERS", "many")
    with pytest.raises(ConfigurationError, match="WORKERS"):
        Settings.from_env()


def test_desk_defaults():
    experiment = build_experiment_config({}, SETTINGS)
    assert experiment.profile == "desk"
    assert list(experiment.models) == ["CNN", "LSTM", "GRU", "BiLSTM"]
    assert {name: spec.epochs for name, spec in experiment.models.items()} == {
        "CNN": 30, "LSTM": 25, "GRU": 38, "BiLSTM": 25}
    assert experiment.models["GRU"].hidden_sizes == (100, 100, 100)
    assert [attack.kind for attack in experiment.attacks] == [FGSM, BIM, PGD, PGD_R]
    assert experiment.attack(PGD_R).restarts == 10
    assert experiment.attack(PGD).iterations == 40
    assert experiment.attack(BIM).alpha is None
    assert experiment.attack(BIM).step_size == pytest.approx(0.003)
    assert experiment.attack(PGD).step_size == 0.003
    assert experiment.defense.epochs == PROFILES["desk"].defense_epochs
    assert experiment.data.data_dir == "/data/cmapss"
    assert experiment.run.run_dir == "/runs/x" and experiment.run.workers == 2


def test_bim_step_follows_epsilon():
    bim = build_experiment_config({}, SETTINGS).attack(BIM)
    assert bim.with_epsilon(1.3).step_size == pytest.approx(0.013)
    assert bim.with_epsilon(0.9).step_size == pytest.approx(0.009)
    explicit = build_experiment_config({"attacks": [{"kind": "BIM", "alpha": 0.01}]}, SETTINGS)
    assert explicit.attack(BIM).with_epsilon(1.3).step_size == 0.01


def test_full_profile_override():
    experiment = build_experiment_config({"profile": "desk"}, SETTINGS, profile="full")
    assert experiment.models["GRU"].epochs == 150
    assert experiment.attack(PGD_R).restarts == 30
    assert experiment.attack(PGD_R).iterations == 100
    assert experiment.defense.train_subsample is None


def test_explicit_values_win():
    document = {
        "models": {"small": {"architecture": "GRU", "hidden_sizes": [8], "sequence_length": 20, "epochs": 8}},
        "attacks": [{"kind": "PGD_R", "restarts": 3, "epsilon": 0.5}],
        "sweep": {"models": ["small"]},
        "run": {"seed": 9},
    }
    experiment = build_experiment_config(document, SETTINGS)
    spec = experiment.models["small"]
    assert (spec.hidden_sizes, spec.sequence_length, spec.epochs, spec.seed) == ((8,), 20, 2, 9)
    attack = experiment.attack(PGD_R)
    assert (attack.restarts, attack.epsilon, attack.seed) == (3, 0.5, 9)
    with pytest.raises(ConfigurationError, match="no 'FGSM' attack"):
        experiment.attack(FGSM)


@pytest.mark.parametrize("document, key", [
    ({"modells": {}}, "'modells'"),
    ({"models": {"GRU": {"hiden_sizes": [4]}}}, "'models.GRU.hiden_sizes'"),
    ({"attacks": [{"kind": "FGSM", "eps": 0.1}]}, "'attacks[0].eps'"),
    ({"defense": {"epoch": 3}}, "'defense.epoch'"),
])
def test_unknown_keys_are_rejected(document, key):
    with pytest.raises(ConfigurationError, match=re.escape(f"unknown key {key}")):
        build_experiment_config(document, SETTINGS)


@pytest.mark.parametrize("document", [
    {"profile": "huge"},
    {"attacks": [{"kind": "CW"}]},
    {"attacks": []},
    {"models": {"GRU": {"hidden_sizes": []}}},
    {"defense": {"epsilon_grid": [0.3, 0.1]}},
    {"defense": {"modes": ["certified"]}},
    {"sweep": {"models": ["Transformer"]}},
    {"run": {"workers": 0}},
])
def test_invalid_values_are_rejected(document):
    with pytest.raises(ConfigurationError):
        build_experiment_config(document, SETTINGS)


def test_load_yaml_file(tmp_path):
    path = tmp_path / "experiment.yaml"
    path.write_text(yaml.safe_dump({"profile": "full", "defense": {"epsilon_grid": [0.1, 0.3]}}))
    experiment = load_experiment_config(path, SETTINGS)
    assert experiment.profile == "full"
    assert experiment.defense.epsilon_grid == [0.1, 0.3]
    assert experiment.defense.defense_config(experiment.attacks, "plain").mode == "plain"

    with pytest.raises(ConfigurationError, match="not found"):
        load_experiment_config(tmp_path / "missing.yaml", SETTINGS)
    path.write_text("profile: [unclosed")
    with pytest.raises(ConfigurationError, match="cannot parse"):
        load_experiment_config(path, SETTINGS)


def test_example_file_is_valid():
    experiment = load_experiment_config(Path(__file__).parent.parent / "experiment.example.yaml", SETTINGS)
    assert experiment.to_dict() == build_experiment_config({}, Settings(
        data_dir="data/CMAPSS", run_dir="runs/default")).to_dict()


def test_setup_logging_rejects_unknown_level():
    with pytest.raises(ConfigurationError):
        setup_logging("chatty")
