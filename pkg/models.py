"""
RUL regression models: construction, training, evaluation and checkpoints.

The four architectures (CNN, LSTM, GRU, BiLSTM) are stacks of diffcore layers
ending in a single-unit dense head. Training is mini-batch MSE descent with a
seeded per-epoch shuffle; every epoch emits one structured log line.
"""

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

import diffcore
from cmapss import (
    EngineTrace,
    NormalizationStats,
    TimeWindow,
    final_windows,
    load_container,
    save_container,
    stack_windows,
    window,
)
from diffcore import (
    GRU,
    LSTM,
    Activation,
    Bidirectional,
    Conv1D,
    Dense,
    Flatten,
    Layer,
    Network,
    Optimizer,
    ParameterSet,
)
from exceptions import (
    ConfigurationError,
    CorruptCheckpointError,
    SpecMismatchError,
    TrainingDivergedError,
    UsageError,
)

logger = logging.getLogger(__name__)

ARCHITECTURES = ("CNN", "LSTM", "GRU", "BiLSTM")
N_FEATURES = 14
# Second entry of the shuffle RNG seed sequence; keeps shuffling independent of init.
SHUFFLE_STREAM = 1
PREDICT_BATCH = 512

WindowsLike = Union[Sequence[TimeWindow], np.ndarray]


@dataclass(frozen=True)
class ModelSpec:
    """Architecture and training hyper-parameters of one model."""
    architecture: str
    hidden_sizes: Tuple[int, ...]
    sequence_length: int
    batch_size: int = 200
    epochs: int = 100
    learning_rate: float = 0.001
    seed: int = 0
    n_features: int = N_FEATURES
    kernel_size: int = 5
    optimizer: str = "adam"

    def __post_init__(self):
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        if self.architecture not in ARCHITECTURES:
            raise ConfigurationError(
                f"unsupported architecture '{self.architecture}' (choose from {ARCHITECTURES})"
            )
        if not self.hidden_sizes or any(h <= 0 for h in self.hidden_sizes):
            raise ConfigurationError(f"hidden_sizes must be non-empty and positive, got {self.hidden_sizes}")
        if self.sequence_length < 1 or self.n_features < 1:
            raise ConfigurationError("sequence_length and n_features must be >= 1")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigurationError("batch_size must be >= 1 and epochs >= 0")
        if self.learning_rate <= 0:
            raise ConfigurationError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.optimizer not in Optimizer.KINDS:
            raise ConfigurationError(f"unsupported optimizer '{self.optimizer}'")

    @property
    def label(self) -> str:
        """Short human label, e.g. ``GRU(100,100,100) lh(80)``."""
        sizes = ",".join(str(h) for h in self.hidden_sizes)
        return f"{self.architecture}({sizes}) lh({self.sequence_length})"

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["hidden_sizes"] = list(self.hidden_sizes)
        return data

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ModelSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown model spec keys: {sorted(unknown)}")
        return cls(**data)


# Architectures and hyper-parameters of the published reference models.
REFERENCE_SPECS: Dict[str, ModelSpec] = {
    "CNN": ModelSpec("CNN", (64, 64, 64, 64), 100, batch_size=256, epochs=120),
    "LSTM": ModelSpec("LSTM", (100, 100, 100, 100), 80, batch_size=200, epochs=100),
    "GRU": ModelSpec("GRU", (100, 100, 100), 80, batch_size=200, epochs=150),
    "BiLSTM": ModelSpec("BiLSTM", (180, 180, 120), 60, batch_size=200, epochs=100),
}
REFERENCE_TEST_RMSE = {"CNN": 9.93, "LSTM": 8.80, "GRU": 7.62, "BiLSTM": 8.43}


def build_network(spec: ModelSpec) -> Network:
    """Layer stack for ``spec``; the head is always named ``head``."""
    layers: List[Layer] = []
    width = spec.n_features
    if spec.architecture == "CNN":
        steps = spec.sequence_length
        for i, filters in enumerate(spec.hidden_sizes):
            layers.append(Conv1D(f"conv_{i}", width, filters, spec.kernel_size))
            layers.append(Activation(f"relu_{i}", "relu"))
            width = filters
            steps -= spec.kernel_size - 1
        if steps < 1:
            raise ConfigurationError(
                f"sequence_length {spec.sequence_length} too short for "
                f"{len(spec.hidden_sizes)} conv layers of kernel {spec.kernel_size}"
            )
        layers.append(Flatten("flatten"))
        width = steps * width
    else:
        last = len(spec.hidden_sizes) - 1
        for i, hidden in enumerate(spec.hidden_sizes):
            sequences = i < last
            if spec.architecture == "LSTM":
                layers.append(LSTM(f"lstm_{i}", width, hidden, sequences))
                width = hidden
            elif spec.architecture == "GRU":
                layers.append(GRU(f"gru_{i}", width, hidden, sequences))
                width = hidden
            else:
                layers.append(Bidirectional(
                    f"bilstm_{i}",
                    LSTM("fw", width, hidden, sequences),
                    LSTM("bw", width, hidden, sequences),
                ))
                width = 2 * hidden
    layers.append(Dense("head", width, 1))
    return Network(layers, (spec.sequence_length, spec.n_features))


@dataclass
class RegressionModel:
    """A ModelSpec, its parameters and the per-epoch training losses."""
    spec: ModelSpec
    params: ParameterSet
    training_history: List[float] = field(default_factory=list)
    metadata: Dict[str, Any] = field(default_factory=dict)
    network: Network = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        self.network = build_network(self.spec)
        layout = {name: shape for name, shape, _ in self.network.parameter_layout()}
        if list(layout) != list(self.params) or any(
            tuple(self.params[name].shape) != shape for name, shape in layout.items()
        ):
            raise ConfigurationError(f"parameters do not match the {self.spec.label} layout")

    @property
    def name(self) -> str:
        return self.spec.architecture

    def copy(self) -> "RegressionModel":
        return RegressionModel(
            spec=self.spec,
            params=diffcore.copy_parameters(self.params),
            training_history=list(self.training_history),
            metadata=json.loads(json.dumps(self.metadata)),
        )


def build(spec: ModelSpec) -> RegressionModel:
    """Build a model with parameters drawn from the spec's seed."""
    network = build_network(spec)
    model = RegressionModel(spec=spec, params=network.init_parameters(spec.seed))
    logger.info(f"Built {spec.label} with {diffcore.flatten_parameters(model.params).size} parameters")
    return model


def as_arrays(windows: WindowsLike, labels: Optional[np.ndarray] = None) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """Accept TimeWindows or a raw (B, T, N) array."""
    if isinstance(windows, np.ndarray):
        return windows.astype(np.float64, copy=False), labels
    values, window_labels = stack_windows(windows)
    return values, (window_labels if labels is None else labels)


def iterate_minibatches(count: int, batch_size: int, rng: np.random.Generator) -> List[np.ndarray]:
    order = rng.permutation(count)
    return [order[start:start + batch_size] for start in range(0, count, batch_size)]


def fit(
    model: RegressionModel,
    x: np.ndarray,
    y: np.ndarray,
    epochs: int,
    batch_size: int,
    learning_rate: float,
    optimizer: str,
    seed: int,
    validation: Optional[Tuple[np.ndarray, np.ndarray]] = None,
    stage: str = "training",
) -> List[float]:
    """
    Mini-batch descent on ``model`` in place.

    Returns:
        The mean training loss of each epoch, measured on the batches as they
        were visited
    """
    model.network.check_input(x)
    rng = np.random.default_rng([seed, SHUFFLE_STREAM])
    stepper = Optimizer(optimizer, learning_rate)
    history = []
    for epoch in range(1, epochs + 1):
        total = 0.0
        for batch in iterate_minibatches(x.shape[0], batch_size, rng):
            loss, bundle = diffcore.batch_gradients(model, x[batch], y[batch])
            if not np.isfinite(loss):
                raise TrainingDivergedError(epoch, learning_rate, stage)
            model.params = stepper.step(model.params, bundle.param_grads)
            total += loss * batch.size
        epoch_loss = total / x.shape[0]
        if not diffcore.all_finite(model.params):
            raise TrainingDivergedError(epoch, learning_rate, stage)
        history.append(epoch_loss)

        line = f"stage={stage.replace(' ', '_')} epoch={epoch} train_loss={epoch_loss:.6f}"
        if validation is not None:
            line += f" val_rmse={rmse(predict_rul(model, validation[0]), validation[1]):.4f}"
        logger.info(line)
    return history


def train(
    model: RegressionModel,
    windows: WindowsLike,
    spec: Optional[ModelSpec] = None,
    validation: Optional[WindowsLike] = None,
) -> RegressionModel:
    """
    Train a copy of ``model`` for ``spec.epochs`` epochs.

    Args:
        model: Model to start from; left untouched
        windows: Training windows (or a (B, T, N) array with labels unavailable)
        spec: Hyper-parameters; defaults to the model's own spec
        validation: Optional windows scored after each epoch

    Returns:
        The trained model, with one history entry per epoch
    """
    spec = spec or model.spec
    if (spec.architecture, spec.hidden_sizes, spec.sequence_length, spec.n_features) != (
        model.spec.architecture, model.spec.hidden_sizes,
        model.spec.sequence_length, model.spec.n_features,
    ):
        raise ConfigurationError(f"training spec {spec.label} does not match model {model.spec.label}")

    x, y = as_arrays(windows)
    trained = model.copy()
    if spec.epochs == 0:
        return trained
    if x.shape[0] == 0:
        raise UsageError("cannot train on an empty window set")
    model.network.check_input(x)

    holdout = None
    if validation is not None:
        val_x, val_y = as_arrays(validation)
        holdout = (val_x, val_y)

    logger.info(f"Training {spec.label} on {x.shape[0]} windows for {spec.epochs} epochs")
    history = fit(trained, x, y, spec.epochs, spec.batch_size, spec.learning_rate,
                  spec.optimizer, spec.seed, holdout)
    trained.training_history.extend(history)
    return trained


def predict_rul(model: RegressionModel, windows: WindowsLike, batch_size: int = PREDICT_BATCH) -> np.ndarray:
    """Predictions in input order, computed in fixed-size chunks."""
    x, _ = as_arrays(windows)
    if x.shape[0] == 0:
        return np.zeros(0)
    return np.concatenate([
        diffcore.forward_batch(model, x[start:start + batch_size])
        for start in range(0, x.shape[0], batch_size)
    ])


def rmse(predictions: Sequence[float], labels: Sequence[float]) -> float:
    return float(np.sqrt(diffcore.mse_loss(predictions, labels)))


def evaluate(model: RegressionModel, windows: Sequence[TimeWindow]) -> float:
    """Clean RMSE of ``model`` over ``windows``."""
    x, y = as_arrays(windows)
    return rmse(predict_rul(model, x), y)


def piecewise_rul_trace(model: RegressionModel, trace: EngineTrace) -> List[Tuple[int, float, float]]:
    """
    Predicted and true RUL for every cycle from the first full window on.

    Engines shorter than the model's window get a single left-padded point at
    their last cycle.
    """
    length = model.spec.sequence_length
    if trace.rul is None:
        raise UsageError(f"engine {trace.engine_id} has no RUL labels")
    if len(trace) < length:
        windows = final_windows([trace], length)
    else:
        windows = window([trace], length)
    predictions = predict_rul(model, windows)
    return [(item.end_cycle, float(pred), item.label) for item, pred in zip(windows, predictions)]


def checksum(model: RegressionModel) -> str:
    """SHA-256 over the spec and the parameters in traversal order."""
    digest = hashlib.sha256()
    digest.update(json.dumps(model.spec.to_dict(), sort_keys=True).encode())
    digest.update(np.ascontiguousarray(diffcore.flatten_parameters(model.params)).tobytes())
    return digest.hexdigest()


def save(model: RegressionModel, path: Union[str, Path],
         stats: Optional[NormalizationStats] = None) -> Path:
    """Write a checkpoint container: spec, parameters, history, normalization stats."""
    arrays = {f"param/{name}": value for name, value in model.params.items()}
    metadata = {
        "kind": "checkpoint",
        "spec": model.spec.to_dict(),
        "parameter_order": list(model.params),
        "training_history": list(model.training_history),
        "normalization": stats.to_dict() if stats is not None else None,
        "metadata": model.metadata,
        "checksum": checksum(model),
    }
    path = save_container(path, arrays, metadata)
    logger.info(f"Saved {model.spec.label} checkpoint to {path}")
    return path


def load(path: Union[str, Path], expected_architecture: Optional[str] = None) -> RegressionModel:
    """
    Read a checkpoint written by save.

    Raises:
        CorruptCheckpointError: Unreadable or inconsistent file
        CheckpointVersionError: Unsupported format version
        SpecMismatchError: Architecture differs from ``expected_architecture``
    """
    arrays, metadata = load_container(path)
    if metadata.get("kind") != "checkpoint":
        raise CorruptCheckpointError(f"{path}: not a model checkpoint")
    try:
        spec = ModelSpec.from_dict(metadata["spec"])
        params = {name: arrays[f"param/{name}"] for name in metadata["parameter_order"]}
        model = RegressionModel(
            spec=spec,
            params=params,
            training_history=[float(v) for v in metadata.get("training_history", [])],
            metadata=dict(metadata.get("metadata") or {}),
        )
    except (KeyError, TypeError, ConfigurationError) as e:
        raise CorruptCheckpointError(f"{path}: inconsistent checkpoint ({e})") from e

    if expected_architecture is not None and spec.architecture != expected_architecture:
        raise SpecMismatchError(
            f"{path} holds a {spec.architecture} model, expected {expected_architecture}"
        )
    return model


def load_stats(path: Union[str, Path]) -> Optional[NormalizationStats]:
    """Normalization stats stored alongside a checkpoint, if any."""
    _, metadata = load_container(path)
    stats = metadata.get("normalization")
    return NormalizationStats.from_dict(stats) if stats else None
