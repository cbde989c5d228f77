"""
Adversarial training defenses.

Plain adversarial training is ordinary mini-batch descent on the clean windows
plus their adversarial copies. Approximate adversarial training averages the
loss gradient over every batch of an epoch, replaces each group of weights with
a least-squares quadratic fit, then takes one descent step from the
approximated weights.
"""

import logging
from dataclasses import asdict, dataclass, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

import diffcore
from attacks import DEFAULT_CHUNK_SIZE, AttackConfig, attack_arrays
from cmapss import TimeWindow, stack_windows
from diffcore import Optimizer, ParameterSet
from exceptions import ConfigurationError, TrainingDivergedError, UsageError
from models import SHUFFLE_STREAM, RegressionModel, as_arrays, fit, iterate_minibatches

logger = logging.getLogger(__name__)

DEFENSE_MODES = ("plain", "approximate")
FIT_VARIABLES = ("value", "index")
DEFAULT_EPSILON_GRID = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)


@dataclass(frozen=True)
class DefenseConfig:
    """Adversarial training settings for one defense mode."""
    attack_list: Tuple[AttackConfig, ...]
    epochs: int = 20
    batch_size: int = 200
    learning_rate: float = 0.001
    weight_groups: int = 16
    mode: str = "approximate"
    seed: int = 0
    optimizer: str = "sgd"
    fit_variable: str = "value"

    def __post_init__(self):
        object.__setattr__(self, "attack_list", tuple(self.attack_list))
        if not self.attack_list:
            raise ConfigurationError("defense attack_list must not be empty")
        if self.weight_groups < 1:
            raise ConfigurationError(f"weight_groups must be >= 1, got {self.weight_groups}")
        if self.mode not in DEFENSE_MODES:
            raise ConfigurationError(f"unknown defense mode '{self.mode}' (choose from {DEFENSE_MODES})")
        if self.fit_variable not in FIT_VARIABLES:
            raise ConfigurationError(f"fit_variable must be one of {FIT_VARIABLES}")
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ConfigurationError("defense needs epochs >= 0, batch_size >= 1, learning_rate > 0")
        if self.optimizer not in Optimizer.KINDS:
            raise ConfigurationError(f"unsupported optimizer '{self.optimizer}'")

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["attack_list"] = [attack.to_dict() for attack in self.attack_list]
        return data


@dataclass
class QuadraticFit:
    """Least-squares coefficients of one weight group: w ~ q0 + q1*x + q2*x**2."""
    parameter: str
    group: int
    start: int
    stop: int
    q0: float
    q1: float
    q2: float
    max_residual: float
    exact: bool = False


def gen_adv_dataset(
    model: RegressionModel,
    windows: Sequence[TimeWindow],
    attack_list: Sequence[AttackConfig],
    epsilon: Optional[float] = None,
    workers: int = 1,
    chunk_size: int = DEFAULT_CHUNK_SIZE,
) -> List[TimeWindow]:
    """
    Clean windows followed by one adversarial block per attack.

    Args:
        model: Model the examples are crafted against
        windows: Clean training windows
        attack_list: Attacks to apply
        epsilon: Overrides every attack's budget when given

    Returns:
        len(windows) * (1 + len(attack_list)) windows with labels preserved
    """
    if not attack_list:
        raise UsageError("attack_list must not be empty")
    augmented = list(windows)
    if not windows:
        return augmented
    x, labels = stack_windows(windows)
    for attack in attack_list:
        config = attack if epsilon is None else attack.with_epsilon(epsilon)
        perturbed, _ = attack_arrays(model, x, labels, config, workers, chunk_size)
        augmented.extend(
            TimeWindow(values=perturbed[k], label=item.label,
                       engine_id=item.engine_id, end_cycle=item.end_cycle)
            for k, item in enumerate(windows)
        )
        logger.info(f"Generated {len(windows)} adversarial windows with {config.label}")
    return augmented


def _fit_group(weights: np.ndarray, fit_variable: str) -> Tuple[np.ndarray, np.ndarray, bool]:
    """Coefficients (q0, q1, q2), approximated weights, and whether the group is kept exact."""
    count = weights.size
    if fit_variable == "value":
        x = weights
    else:
        x = np.arange(count, dtype=np.float64) / max(count - 1, 1)

    if np.unique(x).size == 1:
        return np.array([weights[0], 0.0, 0.0]), weights.copy(), True

    design = np.column_stack([np.ones(count), x, x * x])
    coefficients, *_ = np.linalg.lstsq(design, weights, rcond=None)
    approximated = design @ coefficients
    if np.unique(weights).size <= 3:
        return coefficients, weights.copy(), True
    return coefficients, approximated, False


def quadratic_approx(
    params: ParameterSet,
    m: int = 16,
    fit_variable: str = "value",
) -> Tuple[ParameterSet, List[QuadraticFit]]:
    """
    Replace each weight group by its least-squares quadratic.

    Every parameter array is flattened in row-major order and split into ``m``
    contiguous near-equal groups (fewer when the array has fewer elements).

    Returns:
        A new ParameterSet and one QuadraticFit per non-empty group
    """
    if m < 1:
        raise UsageError(f"weight group count must be >= 1, got {m}")
    if fit_variable not in FIT_VARIABLES:
        raise UsageError(f"fit_variable must be one of {FIT_VARIABLES}")

    approximated: ParameterSet = {}
    fits: List[QuadraticFit] = []
    for name, array in params.items():
        flat = array.reshape(-1)
        result = flat.copy()
        for group, segment in enumerate(np.array_split(np.arange(flat.size), m)):
            if segment.size == 0:
                continue
            start, stop = int(segment[0]), int(segment[-1]) + 1
            weights = flat[start:stop]
            coefficients, values, exact = _fit_group(weights, fit_variable)
            result[start:stop] = values
            residual = float(np.max(np.abs(values - weights)))
            fits.append(QuadraticFit(name, group, start, stop, float(coefficients[0]),
                                     float(coefficients[1]), float(coefficients[2]),
                                     residual, exact))
        approximated[name] = result.reshape(array.shape)
    return approximated, fits


def _approximate_epochs(model: RegressionModel, x: np.ndarray, y: np.ndarray,
                        config: DefenseConfig) -> List[float]:
    rng = np.random.default_rng([config.seed, SHUFFLE_STREAM])
    stepper = Optimizer(config.optimizer, config.learning_rate)
    history = []
    for epoch in range(1, config.epochs + 1):
        batches = iterate_minibatches(x.shape[0], config.batch_size, rng)
        summed = {name: np.zeros_like(value) for name, value in model.params.items()}
        total = 0.0
        for batch in batches:
            loss, bundle = diffcore.batch_gradients(model, x[batch], y[batch])
            if not np.isfinite(loss):
                raise TrainingDivergedError(epoch, config.learning_rate, "approximate adversarial training")
            for name, grad in bundle.param_grads.items():
                summed[name] += grad
            total += loss * batch.size
        averaged = {name: grad / len(batches) for name, grad in summed.items()}

        approximated, _ = quadratic_approx(model.params, config.weight_groups, config.fit_variable)
        change = float(sum(np.abs(approximated[name] - model.params[name]).sum()
                           for name in model.params))
        model.params = stepper.step(approximated, averaged)
        if not diffcore.all_finite(model.params):
            raise TrainingDivergedError(epoch, config.learning_rate, "approximate adversarial training")

        epoch_loss = total / x.shape[0]
        history.append(epoch_loss)
        logger.info(f"stage=approximate_adversarial_training epoch={epoch} "
                    f"train_loss={epoch_loss:.6f} approx_change={change:.6e}")
    return history


def adversarial_train(
    model: RegressionModel,
    windows: Sequence[TimeWindow],
    config: DefenseConfig,
) -> RegressionModel:
    """
    Harden a copy of ``model`` on an augmented dataset from gen_adv_dataset.

    Returns:
        The hardened model; its metadata records the defense settings and the
        per-epoch losses
    """
    x, y = as_arrays(windows)
    hardened = model.copy()
    hardened.metadata["defense"] = {
        "mode": config.mode,
        "attack_list": [attack.to_dict() for attack in config.attack_list],
        "weight_groups": config.weight_groups,
        "fit_variable": config.fit_variable,
        "epochs": config.epochs,
        "learning_rate": config.learning_rate,
        "optimizer": config.optimizer,
        "seed": config.seed,
        "history": [],
    }
    if config.epochs == 0:
        return hardened
    if x.shape[0] == 0:
        raise UsageError("cannot run adversarial training on an empty dataset")

    logger.info(f"{config.mode} adversarial training of {model.spec.label} "
                f"on {x.shape[0]} windows for {config.epochs} epochs")
    if config.mode == "plain":
        history = fit(hardened, x, y, config.epochs, config.batch_size, config.learning_rate,
                      config.optimizer, config.seed, stage="plain adversarial training")
    else:
        hardened.network.check_input(x)
        history = _approximate_epochs(hardened, x, y, config)
    hardened.metadata["defense"]["history"] = history
    return hardened


def robustness_metrics(clean_rmse: float, attacked_rmse: float,
                       defended_rmse: float) -> Tuple[float, float]:
    """
    Attack damage alpha = e' - e and residual damage after defense beta = ê - e.

    A violated e < ê < e' ordering is logged as a warning.
    """
    if min(clean_rmse, attacked_rmse, defended_rmse) < 0:
        raise UsageError("RMSE values must be non-negative")
    alpha = attacked_rmse - clean_rmse
    beta = defended_rmse - clean_rmse
    if not clean_rmse < defended_rmse < attacked_rmse:
        logger.warning(
            f"expected e < ê < e', got e={clean_rmse:.4f} ê={defended_rmse:.4f} e'={attacked_rmse:.4f}"
        )
    return alpha, beta


def harden(
    model: RegressionModel,
    train_windows: Sequence[TimeWindow],
    config: DefenseConfig,
    epsilon_grid: Sequence[float] = DEFAULT_EPSILON_GRID,
    modes: Sequence[str] = DEFENSE_MODES,
    workers: int = 1,
    chunk_size: int = DEFAULT_CHUNK_SIZE,
) -> Dict[Tuple[str, float], RegressionModel]:
    """
    Hardened models for every (mode, training epsilon) pair.

    The augmented dataset of one epsilon is generated once against the
    undefended model and shared by all modes.
    """
    hardened = {}
    for epsilon in epsilon_grid:
        augmented = gen_adv_dataset(model, train_windows, config.attack_list, epsilon,
                                    workers, chunk_size)
        for mode in modes:
            variant = adversarial_train(model, augmented, replace(config, mode=mode))
            variant.metadata["defense"]["epsilon"] = float(epsilon)
            variant.metadata["defense"]["epsilon_grid"] = [float(e) for e in epsilon_grid]
            hardened[(mode, float(epsilon))] = variant
    return hardened
