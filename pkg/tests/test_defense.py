"""Augmented datasets, quadratic weight approximation and adversarial training."""

import numpy as np
import numpy.testing as npt
import pytest

from attacks import BIM, FGSM, PGD, PGD_R, AttackConfig
from defense import (DefenseConfig, adversarial_train, gen_adv_dataset, harden, quadratic_approx,
                     robustness_metrics)
from exceptions import ConfigurationError, UsageError
from models import checksum, train
from tests.conftest import tiny_spec

ATTACKS = (
    AttackConfig(FGSM, epsilon=0.3),
    AttackConfig(BIM, epsilon=0.3, iterations=2),
    AttackConfig(PGD, epsilon=0.3, iterations=2, alpha=0.1),
    AttackConfig(PGD_R, epsilon=0.3, iterations=2, alpha=0.1, restarts=2),
)


def test_augmented_dataset_layout(gru_model, windows):
    augmented = gen_adv_dataset(gru_model, windows[:10], ATTACKS, epsilon=0.2)
    assert len(augmented) == 50
    assert all(item is source for item, source in zip(augmented[:10], windows))
    for block in range(1, 5):
        for k in range(10):
            item = augmented[block * 10 + k]
            assert item.label == windows[k].label
            assert item.engine_id == windows[k].engine_id
            assert np.max(np.abs(item.values - windows[k].values)) <= 0.2 + 1e-12


def test_zero_epsilon_duplicates_clean_windows(gru_model, windows):
    augmented = gen_adv_dataset(gru_model, windows, ATTACKS[:1], epsilon=0.0)
    for clean, copy in zip(augmented[:12], augmented[12:]):
        npt.assert_array_equal(copy.values, clean.values)
    with pytest.raises(UsageError):
        gen_adv_dataset(gru_model, windows, [])
    assert gen_adv_dataset(gru_model, [], ATTACKS) == []


def test_chunk_size_does_not_change_augmented_windows(gru_model, windows):
    whole = gen_adv_dataset(gru_model, windows, ATTACKS, epsilon=0.2)
    chunked = gen_adv_dataset(gru_model, windows, ATTACKS, epsilon=0.2, chunk_size=5)
    for left, right in zip(whole, chunked):
        npt.assert_allclose(right.values, left.values, atol=1e-9)


def test_quadratic_exact_for_three_or_fewer_distinct_weights():
    params = {"w": np.array([1.0, 2.0, 3.0]), "c": np.array([0.5, 0.5, -0.5, -0.5])}
    approximated, fits = quadratic_approx(params, m=1)
    npt.assert_array_equal(approximated["w"], params["w"])
    npt.assert_array_equal(approximated["c"], params["c"])
    assert all(fit.exact for fit in fits)


def test_constant_group_fits_its_value():
    approximated, fits = quadratic_approx({"w": np.full(6, 0.25)}, m=1)
    npt.assert_array_equal(approximated["w"], 0.25)
    assert (fits[0].q0, fits[0].q1, fits[0].q2) == (0.25, 0.0, 0.0)


def test_value_fit_is_identity():
    weights = np.random.default_rng(0).normal(size=(8, 5))
    approximated, fits = quadratic_approx({"w": weights}, m=4)
    npt.assert_allclose(approximated["w"], weights, atol=1e-10)
    assert all(fit.q1 == pytest.approx(1.0, abs=1e-8) for fit in fits)


def test_index_fit_matches_normal_equations():
    weights = np.random.default_rng(1).normal(size=100)
    approximated, fits = quadratic_approx({"w": weights}, m=1, fit_variable="index")
    x = np.arange(100) / 99
    design = np.column_stack([np.ones(100), x, x * x])
    expected = np.linalg.solve(design.T @ design, design.T @ weights)
    npt.assert_allclose([fits[0].q0, fits[0].q1, fits[0].q2], expected, atol=1e-8)
    npt.assert_allclose(approximated["w"], design @ expected, atol=1e-8)
    assert fits[0].max_residual == pytest.approx(np.max(np.abs(design @ expected - weights)), abs=1e-8)


def test_groups_partition_each_parameter():
    params = {"a": np.arange(10.0).reshape(2, 5), "b": np.array([1.0, 2.0])}
    approximated, fits = quadratic_approx(params, m=4, fit_variable="index")
    assert [(fit.start, fit.stop) for fit in fits if fit.parameter == "a"] == [(0, 3), (3, 6), (6, 8), (8, 10)]
    assert len([fit for fit in fits if fit.parameter == "b"]) == 2
    assert approximated["a"].shape == (2, 5)
    assert list(approximated) == ["a", "b"]
    with pytest.raises(UsageError):
        quadratic_approx(params, m=0)


def test_defense_config_validation():
    with pytest.raises(ConfigurationError, match="attack_list"):
        DefenseConfig(attack_list=())
    with pytest.raises(ConfigurationError, match="weight_groups"):
        DefenseConfig(attack_list=ATTACKS, weight_groups=0)
    with pytest.raises(ConfigurationError, match="unknown defense mode"):
        DefenseConfig(attack_list=ATTACKS, mode="certified")


def test_zero_epochs_keep_parameters(gru_model, windows):
    hardened = adversarial_train(gru_model, windows, DefenseConfig(attack_list=ATTACKS, epochs=0))
    assert checksum(hardened) == checksum(gru_model)
    assert hardened.metadata["defense"]["mode"] == "approximate"
    assert hardened.metadata["defense"]["history"] == []


def test_plain_mode_matches_ordinary_training(gru_model, windows):
    augmented = gen_adv_dataset(gru_model, windows, ATTACKS[:1], epsilon=0.0)
    config = DefenseConfig(attack_list=ATTACKS[:1], epochs=3, batch_size=5, learning_rate=0.01,
                           mode="plain", seed=7, optimizer="sgd")
    hardened = adversarial_train(gru_model, augmented, config)
    spec = tiny_spec(epochs=3, batch_size=5, learning_rate=0.01, seed=7, optimizer="sgd")
    reference = train(gru_model, augmented, spec)
    assert checksum(hardened) == checksum(reference)
    assert hardened.metadata["defense"]["history"] == reference.training_history


def test_approximate_mode_trains(gru_model, windows):
    augmented = gen_adv_dataset(gru_model, windows, ATTACKS[:2], epsilon=0.1)
    config = DefenseConfig(attack_list=ATTACKS[:2], epochs=2, batch_size=8, learning_rate=0.001)
    hardened = adversarial_train(gru_model, augmented, config)
    assert len(hardened.metadata["defense"]["history"]) == 2
    assert checksum(hardened) != checksum(gru_model)
    assert all(np.all(np.isfinite(value)) for value in hardened.params.values())


def test_robustness_metrics(caplog):
    alpha, beta = robustness_metrics(7.92, 18.32, 8.32)
    assert alpha == pytest.approx(10.40)
    assert beta == pytest.approx(0.40)
    assert robustness_metrics(5.0, 5.0, 5.0) == (0.0, 0.0)
    with pytest.raises(UsageError):
        robustness_metrics(-1.0, 2.0, 1.0)
    with caplog.at_level("WARNING"):
        robustness_metrics(8.0, 10.0, 12.0)
    assert "expected e < ê < e'" in caplog.text


def test_harden_covers_every_mode_and_epsilon(gru_model, windows):
    config = DefenseConfig(attack_list=ATTACKS[:1], epochs=1, batch_size=8)
    hardened = harden(gru_model, windows, config, epsilon_grid=(0.1, 0.2))
    assert set(hardened) == {("plain", 0.1), ("plain", 0.2), ("approximate", 0.1), ("approximate", 0.2)}
    assert hardened[("plain", 0.2)].metadata["defense"]["epsilon"] == 0.2
    assert hardened[("approximate", 0.1)].metadata["defense"]["mode"] == "approximate"
