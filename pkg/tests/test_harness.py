"""Attack impact, transferability, sweeps and the robustness report."""

import numpy as np
import numpy.testing as npt
import pytest

from attacks import BIM, FGSM, PGD, AttackConfig
from cmapss import window
from defense import DefenseConfig, harden
from exceptions import ConfigurationError, MissingArtifactError, UsageError
from harness import (RobustnessReport, attack_signature, defense_epsilon_sweep, defense_report,
                     epsilon_sweep, eval_attack_impact, replay_on_timeline, transferability)
from models import build, evaluate, train
from tests.conftest import tiny_spec

ATTACKS = (
    AttackConfig(FGSM, epsilon=0.2),
    AttackConfig(BIM, epsilon=0.2, iterations=3),
    AttackConfig(PGD, epsilon=0.2, iterations=3, alpha=0.05, seed=1),
)


@pytest.fixture
def two_models():
    return {"GRU": build(tiny_spec("GRU", sequence_length=6)),
            "LSTM": build(tiny_spec("LSTM", sequence_length=8, hidden=(3,)))}


def test_attack_impact(gru_model, windows):
    impact = eval_attack_impact(gru_model, windows, ATTACKS)
    assert impact.clean_rmse == pytest.approx(evaluate(gru_model, windows))
    assert [row.kind for row in impact.rows] == [FGSM, BIM, PGD]
    assert set(impact.examples) == {config.label for config in ATTACKS}
    assert impact.rows[0].multiplier == pytest.approx(impact.rows[0].rmse / impact.clean_rmse)
    frame = impact.to_frame()
    assert list(frame.columns) == ["model", "clean_rmse", "attack", "kind", "epsilon", "rmse", "multiplier"]
    assert len(frame) == 3


def test_zero_budget_multiplier_is_one(gru_model, windows):
    impact = eval_attack_impact(gru_model, windows, [AttackConfig(FGSM, epsilon=0.0)])
    assert impact.rows[0].multiplier == 1.0


def test_replay_on_timeline(prepared):
    traces = prepared.test[:2]
    perturbed = np.stack([np.full((5, 14), 9.0), np.full((5, 14), 7.0)])
    replayed = replay_on_timeline(traces, perturbed)
    npt.assert_array_equal(replayed[0].sensors[-5:], 9.0)
    npt.assert_array_equal(replayed[0].sensors[:-5], traces[0].sensors[:-5])
    npt.assert_array_equal(replayed[1].rul, traces[1].rul)
    with pytest.raises(UsageError):
        replay_on_timeline(traces, perturbed[:1])


def test_transferability_grid(two_models, prepared):
    matrix = transferability(two_models, prepared.test, ATTACKS[:2])
    assert matrix.models == ["GRU", "LSTM"]
    assert set(matrix.grid["GRU"]) == {"GRU", "LSTM"}
    assert len(matrix.off_diagonal()) == 4
    frame = matrix.to_frame()
    assert len(frame) == 8
    assert frame["white_box"].sum() == 4
    table = matrix.to_table()
    assert list(table.columns) == ["clean_rmse", "GRU", "LSTM"]
    assert table.loc["GRU", "LSTM"].count("/") == 1
    assert matrix.to_dict()["schema_version"] == 1


def test_transferability_single_model_has_no_off_diagonal(two_models, prepared):
    matrix = transferability({"GRU": two_models["GRU"]}, prepared.test, ATTACKS[:1])
    assert matrix.off_diagonal() == []


def test_transferability_rejects_feature_mismatch(prepared):
    models = {"GRU": build(tiny_spec("GRU")), "small": build(tiny_spec("GRU", n_features=3))}
    with pytest.raises(ConfigurationError, match="feature count"):
        transferability(models, prepared.test, ATTACKS[:1])


def test_epsilon_sweep(gru_model, windows):
    frame = epsilon_sweep(gru_model, windows, ATTACKS[:2], epsilons=[0.0, 0.1, 0.3])
    assert len(frame) == 6
    assert list(frame["epsilon"][:3]) == [0.0, 0.1, 0.3]
    at_zero = frame[frame["epsilon"] == 0.0]
    npt.assert_allclose(at_zero["rmse"], at_zero["clean_rmse"], rtol=0, atol=1e-12)
    with pytest.raises(UsageError, match="sorted"):
        epsilon_sweep(gru_model, windows, ATTACKS[:1], epsilons=[0.3, 0.1])


def test_sweep_curves_grow_with_epsilon(prepared):
    spec = tiny_spec("GRU", hidden=(8,), epochs=20, batch_size=32, learning_rate=0.01, seed=2)
    model = train(build(spec), window(prepared.train, 6, stride=3), spec)
    attacks = [AttackConfig(FGSM), AttackConfig(BIM, iterations=10)]
    epsilons = [0.0, 0.1, 0.3, 0.7, 1.3]
    frame = epsilon_sweep(model, window(prepared.test, 6, stride=5), attacks, epsilons=epsilons)
    curves = {kind: frame[frame["attack"] == kind]["rmse"].to_numpy() for kind in (FGSM, BIM)}
    for curve in curves.values():
        assert len(curve) == len(epsilons)
        assert np.all(np.diff(curve) >= -1.0)
    assert curves[BIM][-1] >= curves[FGSM][-1]
    assert curves[FGSM][-1] > curves[FGSM][0]


def test_defense_epsilon_sweep(gru_model, windows):
    frame = defense_epsilon_sweep(gru_model, {"plain": gru_model.copy()}, windows, ATTACKS[:1],
                                  epsilons=[0.0, 0.2])
    assert len(frame) == 4
    assert set(frame["variant"]) == {"none", "plain"}


def test_attack_signature(gru_model, windows):
    frame = attack_signature(gru_model, windows[0], 2, ATTACKS[:2])
    assert list(frame.columns) == ["cycle", "clean", "FGSM(eps=0.2)", "BIM(eps=0.2)"]
    assert len(frame) == 6
    assert np.max(np.abs(frame["FGSM(eps=0.2)"] - frame["clean"])) <= 0.2 + 1e-12
    with pytest.raises(UsageError):
        attack_signature(gru_model, windows[0], 14, ATTACKS[:1])


def _defenses(model, windows, epochs=0):
    config = DefenseConfig(attack_list=ATTACKS[:1], epochs=epochs, batch_size=8)
    return {"GRU": harden(model, windows, config, epsilon_grid=(0.1, 0.3))}


def test_report_without_damage_is_zero(gru_model, windows):
    report = defense_report({"GRU": gru_model}, _defenses(gru_model, windows), ATTACKS, (0.1, 0.3),
                            {"GRU": windows}, eval_epsilon=0.0)
    assert len(report.rows) == 6
    assert all(row.alpha == 0.0 and row.beta_plain == 0.0 and row.beta_approx == 0.0
               for row in report.rows)
    assert report.verify()


def test_report_tables_and_json(gru_model, windows, tmp_path):
    report = defense_report({"GRU": gru_model}, _defenses(gru_model, windows, epochs=1), ATTACKS,
                            (0.1, 0.3), {"GRU": windows}, eval_epsilon=0.2, metadata={"run": "test"})
    assert report.verify()
    assert len(report.clean_table()) == 2
    beta = report.beta_table("approximate")
    assert list(beta.columns) == ["model", "train_epsilon", "attack", "alpha", "beta"]
    with pytest.raises(UsageError):
        report.beta_table("certified")

    loaded = RobustnessReport.read_json(report.write_json(tmp_path / "report.json"))
    assert loaded.rows == report.rows
    assert loaded.metadata["run"] == "test"
    assert loaded.metadata["eval_epsilon"] == 0.2
    assert loaded.verify()

    report.rows[0].alpha += 1.0
    assert not report.verify()


def test_report_lists_missing_hardened_models(gru_model, windows):
    defenses = _defenses(gru_model, windows)
    del defenses["GRU"][("approximate", 0.3)]
    with pytest.raises(MissingArtifactError) as info:
        defense_report({"GRU": gru_model}, defenses, ATTACKS, (0.1, 0.3), {"GRU": windows})
    assert "GRU/approximate/eps=0.3" in str(info.value)
