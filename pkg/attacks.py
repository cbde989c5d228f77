"""
Multivariate time-series adversarial attacks on RUL regressors.

All four attacks perturb every sensor of every time step inside an l-infinity
ball of radius epsilon around the clean window and maximize the squared error
against the ground-truth label:

- FGSM: one signed-gradient step of size epsilon
- BIM: iterated signed-gradient steps of size alpha, projected after each step
- PGD: BIM started from a uniform random point inside the ball
- PGD_R: PGD repeated with independent starts, keeping the highest-loss result

Windows are attacked in fixed-size chunks. Random starts come from a per-window
stream seeded with (seed, window index, restart), so results do not depend on
chunking order or worker count.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

import diffcore
from cmapss import TimeWindow, save_windows, stack_windows
from exceptions import ConfigurationError, UsageError

logger = logging.getLogger(__name__)

FGSM = "FGSM"
BIM = "BIM"
PGD = "PGD"
PGD_R = "PGD_R"
ATTACK_KINDS = (FGSM, BIM, PGD, PGD_R)
DEFAULT_PGD_ALPHA = 0.003
DEFAULT_CHUNK_SIZE = 64


@dataclass(frozen=True)
class AttackConfig:
    """One attack algorithm and its budget."""
    kind: str
    epsilon: float = 0.3
    alpha: Optional[float] = None
    iterations: int = 100
    restarts: int = 1
    seed: int = 0
    clip_min: Optional[float] = None
    clip_max: Optional[float] = None

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ConfigurationError(f"unknown attack kind '{self.kind}' (choose from {ATTACK_KINDS})")
        if self.epsilon < 0:
            raise ConfigurationError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.alpha is not None and self.alpha <= 0:
            raise ConfigurationError(f"alpha must be > 0, got {self.alpha}")
        if self.iterations < 1 or self.restarts < 1:
            raise ConfigurationError("iterations and restarts must be >= 1")
        if (self.clip_min is not None and self.clip_max is not None
                and self.clip_min > self.clip_max):
            raise ConfigurationError("clip_min must not exceed clip_max")

    @property
    def step_size(self) -> float:
        """Per-iteration step: explicit alpha, else epsilon/I for BIM and 0.003 for PGD."""
        if self.alpha is not None:
            return self.alpha
        if self.kind == BIM:
            return self.epsilon / self.iterations
        if self.kind in (PGD, PGD_R):
            return DEFAULT_PGD_ALPHA
        return self.epsilon

    @property
    def label(self) -> str:
        return f"{self.kind}(eps={self.epsilon:g})"

    def with_epsilon(self, epsilon: float) -> "AttackConfig":
        return replace(self, epsilon=float(epsilon))

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "AttackConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown attack keys: {sorted(unknown)}")
        return cls(**data)

    def provenance(self) -> Dict[str, Any]:
        """Settings as applied, with the resolved step size."""
        return {**self.to_dict(), "step_size": self.step_size}


@dataclass
class AdversarialWindow:
    """A clean window, its perturbed counterpart and the loss reached."""
    original: TimeWindow
    perturbed: np.ndarray
    achieved_loss: float
    config: AttackConfig

    @property
    def label(self) -> float:
        return self.original.label

    def as_window(self) -> TimeWindow:
        return TimeWindow(values=self.perturbed, label=self.original.label,
                          engine_id=self.original.engine_id, end_cycle=self.original.end_cycle)


def _bounds(x: np.ndarray, config: AttackConfig) -> Tuple[np.ndarray, np.ndarray]:
    """Feasible box: the epsilon ball, optionally intersected with [clip_min, clip_max]."""
    lower = x - config.epsilon
    upper = x + config.epsilon
    if config.clip_min is not None:
        lower = np.minimum(np.maximum(lower, config.clip_min), x)
    if config.clip_max is not None:
        upper = np.maximum(np.minimum(upper, config.clip_max), x)
    return lower, upper


def _losses(model: diffcore.Differentiable, x: np.ndarray, labels: np.ndarray) -> np.ndarray:
    predictions = diffcore.forward_batch(model, x)
    return (predictions - labels) ** 2


def _iterate(model, start, labels, lower, upper, step, iterations) -> np.ndarray:
    adversarial = start
    for _ in range(iterations):
        _, grad = diffcore.input_gradients(model, adversarial, labels)
        adversarial = np.clip(adversarial + step * np.sign(grad), lower, upper)
    return adversarial


def _random_start(x: np.ndarray, config: AttackConfig, indices: Sequence[int], restart: int,
                  lower: np.ndarray, upper: np.ndarray) -> np.ndarray:
    noise = np.stack([
        np.random.default_rng([config.seed, int(index), restart]).uniform(
            -config.epsilon, config.epsilon, size=x.shape[1:]
        )
        for index in indices
    ])
    return np.clip(x + noise, lower, upper)


def craft(model: diffcore.Differentiable, x: np.ndarray, labels: np.ndarray,
          config: AttackConfig, indices: Optional[Sequence[int]] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Attack a (B, T, N) batch.

    Args:
        model: Differentiable model, never modified
        x: Clean windows
        labels: Ground-truth RUL per window
        config: Attack settings
        indices: Dataset index of each window, selecting its random stream

    Returns:
        Perturbed windows and the squared error each reached
    """
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if indices is None:
        indices = range(x.shape[0])
    if config.epsilon == 0:
        return x.copy(), _losses(model, x, labels)

    lower, upper = _bounds(x, config)
    step = config.step_size
    if config.kind == FGSM:
        _, grad = diffcore.input_gradients(model, x, labels)
        adversarial = np.clip(x + config.epsilon * np.sign(grad), lower, upper)
    elif config.kind == BIM:
        adversarial = _iterate(model, x.copy(), labels, lower, upper, step, config.iterations)
    else:
        restarts = config.restarts if config.kind == PGD_R else 1
        adversarial, best = None, None
        for restart in range(restarts):
            start = _random_start(x, config, indices, restart, lower, upper)
            candidate = _iterate(model, start, labels, lower, upper, step, config.iterations)
            loss = _losses(model, candidate, labels)
            if adversarial is None:
                adversarial, best = candidate, loss
                continue
            better = loss > best
            adversarial = np.where(better[:, None, None], candidate, adversarial)
            best = np.where(better, loss, best)
        return adversarial, best
    return adversarial, _losses(model, adversarial, labels)


def _single(model, window: TimeWindow, label: Optional[float], config: AttackConfig,
            index: int) -> AdversarialWindow:
    label = window.label if label is None else float(label)
    perturbed, loss = craft(model, window.values[None, ...], np.array([label]), config, [index])
    return AdversarialWindow(original=window, perturbed=perturbed[0],
                             achieved_loss=float(loss[0]), config=config)


def mts_fgsm(model, window: TimeWindow, label: Optional[float] = None,
             epsilon: float = 0.3) -> AdversarialWindow:
    """Single full-budget signed-gradient step."""
    return _single(model, window, label, AttackConfig(FGSM, epsilon=epsilon), 0)


def mts_bim(model, window: TimeWindow, label: Optional[float], config: AttackConfig,
            index: int = 0) -> AdversarialWindow:
    return _single(model, window, label, replace(config, kind=BIM), index)


def mts_pgd(model, window: TimeWindow, label: Optional[float], config: AttackConfig,
            index: int = 0) -> AdversarialWindow:
    return _single(model, window, label, replace(config, kind=PGD), index)


def mts_pgd_r(model, window: TimeWindow, label: Optional[float], config: AttackConfig,
              index: int = 0) -> AdversarialWindow:
    return _single(model, window, label, replace(config, kind=PGD_R), index)


def attack_arrays(
    model: diffcore.Differentiable,
    x: np.ndarray,
    labels: np.ndarray,
    config: AttackConfig,
    workers: int = 1,
    chunk_size: int = DEFAULT_CHUNK_SIZE,
) -> Tuple[np.ndarray, np.ndarray]:
    """Attack a whole array in fixed chunks, optionally on a thread pool; order preserved."""
    if x.shape[0] == 0:
        return x.copy(), np.zeros(0)
    if workers < 1 or chunk_size < 1:
        raise UsageError("workers and chunk_size must be >= 1")
    chunks = [np.arange(start, min(start + chunk_size, x.shape[0]))
              for start in range(0, x.shape[0], chunk_size)]

    def run(chunk: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return craft(model, x[chunk], labels[chunk], config, chunk.tolist())

    if workers == 1:
        results = [run(chunk) for chunk in chunks]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, chunks))

    perturbed = np.concatenate([item[0] for item in results])
    losses = np.concatenate([item[1] for item in results])
    return perturbed, losses


def attack_dataset(
    model: diffcore.Differentiable,
    windows: Sequence[TimeWindow],
    config: AttackConfig,
    workers: int = 1,
    chunk_size: int = DEFAULT_CHUNK_SIZE,
) -> List[AdversarialWindow]:
    """Attack every window independently; output order follows input order."""
    if not windows:
        return []
    x, labels = stack_windows(windows)
    perturbed, losses = attack_arrays(model, x, labels, config, workers, chunk_size)
    logger.info(f"{config.label}: attacked {len(windows)} windows, mean loss {losses.mean():.4f}")
    return [
        AdversarialWindow(original=item, perturbed=perturbed[k],
                          achieved_loss=float(losses[k]), config=config)
        for k, item in enumerate(windows)
    ]


def export_adversarial(path: Union[str, Path], adversarial: Sequence[AdversarialWindow],
                       config: AttackConfig, model_checksum: str) -> Path:
    """Store attacked windows with the attack settings and source model checksum."""
    windows = [item.as_window() for item in adversarial]
    return save_windows(path, windows, {
        "attack": config.provenance(),
        "source_model_checksum": model_checksum,
        "achieved_loss": [item.achieved_loss for item in adversarial],
    })
