"""
Robustness evaluation: attack impact, transferability, epsilon sweeps and the
defense report.

Every result type converts to a pandas DataFrame; the pipeline writes those
frames as CSV and the nested report as JSON.
"""

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from attacks import DEFAULT_CHUNK_SIZE, AttackConfig, attack_arrays, craft
from cmapss import EngineTrace, TimeWindow, final_windows, stack_windows
from defense import robustness_metrics
from exceptions import ConfigurationError, MissingArtifactError, UsageError
from models import RegressionModel, predict_rul, rmse

logger = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1
DEFAULT_SWEEP_EPSILONS = (0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 1.1, 1.3)

HardenedModels = Mapping[Tuple[str, float], RegressionModel]


def _multiplier(attacked: float, clean: float) -> float:
    if clean == 0:
        return 1.0 if attacked == 0 else float("inf")
    return attacked / clean


def _attacked_rmse(model: RegressionModel, x: np.ndarray, y: np.ndarray,
                   config: AttackConfig, workers: int, chunk_size: int) -> float:
    perturbed, _ = attack_arrays(model, x, y, config, workers, chunk_size)
    return rmse(predict_rul(model, perturbed), y)


@dataclass
class ImpactRow:
    attack: str
    kind: str
    epsilon: float
    rmse: float
    multiplier: float


@dataclass
class AttackImpact:
    """Clean RMSE and one attacked RMSE per attack for a single model."""
    model: str
    clean_rmse: float
    rows: List[ImpactRow] = field(default_factory=list)
    examples: Dict[str, Tuple[np.ndarray, np.ndarray]] = field(default_factory=dict, repr=False)

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame([asdict(row) for row in self.rows],
                             columns=["attack", "kind", "epsilon", "rmse", "multiplier"])
        frame.insert(0, "model", self.model)
        frame.insert(1, "clean_rmse", self.clean_rmse)
        return frame


def eval_attack_impact(
    model: RegressionModel,
    windows: Sequence[TimeWindow],
    attack_configs: Sequence[AttackConfig],
    workers: int = 1,
    chunk_size: int = DEFAULT_CHUNK_SIZE,
    name: Optional[str] = None,
) -> AttackImpact:
    """
    Attack ``windows`` with every config and compare against the clean RMSE.

    Returns:
        AttackImpact with multipliers e'/e per attack; ``examples`` holds the
        perturbed windows and achieved losses per attack label
    """
    x, y = stack_windows(windows)
    clean = rmse(predict_rul(model, x), y)
    impact = AttackImpact(model=name or model.name, clean_rmse=clean)
    for config in attack_configs:
        perturbed, losses = attack_arrays(model, x, y, config, workers, chunk_size)
        attacked = rmse(predict_rul(model, perturbed), y)
        impact.examples[config.label] = (perturbed, losses)
        impact.rows.append(ImpactRow(config.label, config.kind, config.epsilon, attacked,
                                     _multiplier(attacked, clean)))
        logger.info(f"{impact.model} {config.label}: clean RMSE {clean:.3f} -> {attacked:.3f} "
                    f"({_multiplier(attacked, clean):.2f}x)")
    return impact


@dataclass
class TransferMatrix:
    """RMSE of target models on examples crafted against source models."""
    models: List[str]
    attacks: List[str]
    clean: Dict[str, float]
    grid: Dict[str, Dict[str, Dict[str, float]]] = field(default_factory=dict)

    @staticmethod
    def white_box(source: str, target: str) -> bool:
        return source == target

    def off_diagonal(self) -> List[Tuple[str, str, str, float]]:
        return [
            (source, target, attack, self.grid[source][target][attack])
            for source in self.models
            for target in self.models
            if not self.white_box(source, target)
            for attack in self.attacks
        ]

    def to_frame(self) -> pd.DataFrame:
        rows = [
            {
                "source": source,
                "target": target,
                "attack": attack,
                "rmse": self.grid[source][target][attack],
                "target_clean_rmse": self.clean[target],
                "white_box": self.white_box(source, target),
            }
            for source in self.models
            for target in self.models
            for attack in self.attacks
        ]
        return pd.DataFrame(rows, columns=["source", "target", "attack", "rmse",
                                           "target_clean_rmse", "white_box"])

    def to_table(self) -> pd.DataFrame:
        """Source rows by target columns, cells joined as 'FGSM / BIM / ...' RMSEs."""
        table = pd.DataFrame(index=self.models, columns=self.models, dtype=object)
        for source in self.models:
            for target in self.models:
                cells = [f"{self.grid[source][target][attack]:.2f}" for attack in self.attacks]
                table.loc[source, target] = " / ".join(cells)
        table.insert(0, "clean_rmse", [f"{self.clean[name]:.2f}" for name in self.models])
        table.index.name = "source"
        return table

    def to_dict(self) -> Dict[str, Any]:
        return {"schema_version": REPORT_SCHEMA_VERSION, **asdict(self)}


def replay_on_timeline(traces: Sequence[EngineTrace], perturbed: np.ndarray) -> List[EngineTrace]:
    """
    Write perturbed final windows back onto their engines' raw timelines.

    Rows of a window that came from left-padding have no cycle of their own
    and are discarded.
    """
    ordered = sorted(traces, key=lambda item: item.engine_id)
    if len(ordered) != perturbed.shape[0]:
        raise UsageError("one perturbed window per engine is required")
    replayed = []
    for trace, values in zip(ordered, perturbed):
        sensors = trace.sensors.copy()
        rows = min(len(trace), values.shape[0])
        sensors[-rows:] = values[-rows:]
        replayed.append(EngineTrace(trace.engine_id, trace.cycles, trace.settings, sensors,
                                    trace.sensor_ids, trace.rul))
    return replayed


def transferability(
    models: Mapping[str, RegressionModel],
    traces: Sequence[EngineTrace],
    attack_configs: Sequence[AttackConfig],
    workers: int = 1,
    chunk_size: int = DEFAULT_CHUNK_SIZE,
) -> TransferMatrix:
    """
    Cross-model attack grid over the final window of each engine.

    Examples are crafted on the source model's windows, written back onto the
    engine timelines, then re-windowed at each target's sequence length.
    """
    names = list(models)
    features = {model.spec.n_features for model in models.values()}
    if len(features) > 1:
        raise ConfigurationError(f"models disagree on feature count: {sorted(features)}")
    if traces and features and traces[0].sensors.shape[1] not in features:
        raise ConfigurationError(
            f"traces carry {traces[0].sensors.shape[1]} sensors, models expect {features.pop()}"
        )

    def evaluate(name: str, engine_traces: Sequence[EngineTrace]) -> float:
        model = models[name]
        x, y = stack_windows(final_windows(engine_traces, model.spec.sequence_length))
        return rmse(predict_rul(model, x), y)

    matrix = TransferMatrix(models=names, attacks=[config.label for config in attack_configs],
                            clean={name: evaluate(name, traces) for name in names})
    for source in names:
        model = models[source]
        x, y = stack_windows(final_windows(traces, model.spec.sequence_length))
        matrix.grid[source] = {target: {} for target in names}
        for config in attack_configs:
            perturbed, _ = attack_arrays(model, x, y, config, workers, chunk_size)
            replayed = replay_on_timeline(traces, perturbed)
            for target in names:
                if target == source:
                    score = rmse(predict_rul(model, perturbed), y)
                else:
                    score = evaluate(target, replayed)
                matrix.grid[source][target][config.label] = score
            logger.info(f"Transfer {source} -> all targets done for {config.label}")
    return matrix


def _check_sorted(epsilons: Sequence[float]) -> None:
    if list(epsilons) != sorted(epsilons):
        raise UsageError(f"epsilon values must be sorted ascending, got {list(epsilons)}")


def epsilon_sweep(
    model: RegressionModel,
    windows: Sequence[TimeWindow],
    attack_configs: Sequence[AttackConfig],
    epsilons: Sequence[float] = DEFAULT_SWEEP_EPSILONS,
    workers: int = 1,
    chunk_size: int = DEFAULT_CHUNK_SIZE,
) -> pd.DataFrame:
    """RMSE for every (attack, epsilon), one row each, attacks in given order."""
    _check_sorted(epsilons)
    x, y = stack_windows(windows)
    clean = rmse(predict_rul(model, x), y)
    rows = []
    for config in attack_configs:
        for epsilon in epsilons:
            attacked = _attacked_rmse(model, x, y, config.with_epsilon(epsilon), workers, chunk_size)
            rows.append({"model": model.name, "attack": config.kind, "epsilon": float(epsilon),
                         "rmse": attacked, "clean_rmse": clean})
        logger.info(f"Swept {config.kind} over {len(epsilons)} epsilon values")
    return pd.DataFrame(rows, columns=["model", "attack", "epsilon", "rmse", "clean_rmse"])


def defense_epsilon_sweep(
    base: RegressionModel,
    hardened: Mapping[str, RegressionModel],
    windows: Sequence[TimeWindow],
    attack_configs: Sequence[AttackConfig],
    epsilons: Sequence[float] = DEFAULT_SWEEP_EPSILONS,
    workers: int = 1,
    chunk_size: int = DEFAULT_CHUNK_SIZE,
) -> pd.DataFrame:
    """RMSE of the undefended and each hardened variant on examples crafted against the undefended model."""
    _check_sorted(epsilons)
    x, y = stack_windows(windows)
    variants = {"none": base, **hardened}
    rows = []
    for config in attack_configs:
        for epsilon in epsilons:
            perturbed, _ = attack_arrays(base, x, y, config.with_epsilon(epsilon), workers, chunk_size)
            for variant, model in variants.items():
                rows.append({"variant": variant, "attack": config.kind, "epsilon": float(epsilon),
                             "rmse": rmse(predict_rul(model, perturbed), y)})
    return pd.DataFrame(rows, columns=["variant", "attack", "epsilon", "rmse"])


def attack_signature(
    model: RegressionModel,
    window: TimeWindow,
    sensor: int,
    attack_configs: Sequence[AttackConfig],
) -> pd.DataFrame:
    """Clean and perturbed values of one sensor column across a window."""
    if not 0 <= sensor < window.values.shape[1]:
        raise UsageError(f"sensor column {sensor} out of range")
    length = window.values.shape[0]
    frame = pd.DataFrame({
        "cycle": np.arange(window.end_cycle - length + 1, window.end_cycle + 1),
        "clean": window.values[:, sensor],
    })
    for config in attack_configs:
        perturbed, _ = craft(model, window.values[None, ...], np.array([window.label]), config)
        frame[config.label] = perturbed[0][:, sensor]
    return frame


@dataclass
class ReportRow:
    model: str
    attack: str
    train_epsilon: float
    eval_epsilon: float
    clean_rmse: float
    attacked_rmse: float
    defended_rmse_plain: float
    defended_rmse_approx: float
    alpha: float
    beta_plain: float
    beta_approx: float
    clean_rmse_plain: float
    clean_rmse_approx: float
    clean_increase_pct_plain: float
    clean_increase_pct_approx: float


@dataclass
class RobustnessReport:
    """Alpha/beta grid for both defense modes plus provenance."""
    rows: List[ReportRow] = field(default_factory=list)
    metadata: Dict[str, Any] = field(default_factory=dict)

    def verify(self) -> bool:
        """True when every stored alpha and beta equals its recomputation."""
        for row in self.rows:
            if row.alpha != row.attacked_rmse - row.clean_rmse:
                return False
            if row.beta_plain != row.defended_rmse_plain - row.clean_rmse:
                return False
            if row.beta_approx != row.defended_rmse_approx - row.clean_rmse:
                return False
        return True

    def to_frame(self) -> pd.DataFrame:
        columns = list(ReportRow.__dataclass_fields__)
        return pd.DataFrame([asdict(row) for row in self.rows], columns=columns)

    def clean_table(self) -> pd.DataFrame:
        """Clean RMSE before and after each defense, with percentage increase."""
        frame = self.to_frame()
        columns = ["model", "train_epsilon", "clean_rmse", "clean_rmse_plain", "clean_rmse_approx",
                   "clean_increase_pct_plain", "clean_increase_pct_approx"]
        return frame[columns].drop_duplicates(["model", "train_epsilon"]).reset_index(drop=True)

    def beta_table(self, mode: str) -> pd.DataFrame:
        """(alpha, beta) per model and attack for one defense mode."""
        suffix = {"plain": "plain", "approximate": "approx"}.get(mode)
        if suffix is None:
            raise UsageError(f"unknown defense mode '{mode}'")
        frame = self.to_frame()
        table = frame[["model", "train_epsilon", "attack", "alpha", f"beta_{suffix}"]]
        return table.rename(columns={f"beta_{suffix}": "beta"}).reset_index(drop=True)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "metadata": self.metadata,
            "rows": [asdict(row) for row in self.rows],
        }

    def write_json(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        return path

    @classmethod
    def read_json(cls, path: Union[str, Path]) -> "RobustnessReport":
        document = json.loads(Path(path).read_text())
        return cls(rows=[ReportRow(**row) for row in document["rows"]],
                   metadata=document.get("metadata", {}))


def _increase_pct(after: float, before: float) -> float:
    return 100.0 * (after - before) / before if before else 0.0


def defense_report(
    models: Mapping[str, RegressionModel],
    defenses: Mapping[str, HardenedModels],
    attacks: Sequence[AttackConfig],
    epsilon_grid: Sequence[float],
    windows: Mapping[str, Sequence[TimeWindow]],
    eval_epsilon: float = 0.3,
    workers: int = 1,
    chunk_size: int = DEFAULT_CHUNK_SIZE,
    metadata: Optional[Dict[str, Any]] = None,
) -> RobustnessReport:
    """
    Alpha and beta for every (model, attack, training epsilon) and both defense modes.

    Evaluation examples are crafted once per model at ``eval_epsilon`` against
    the undefended model and replayed on each hardened variant.

    Args:
        models: Undefended models by name
        defenses: Per model name, hardened models keyed by (mode, training epsilon)
        attacks: Attack configs; their epsilon is replaced by ``eval_epsilon``
        epsilon_grid: Training epsilons to report
        windows: Evaluation windows per model name

    Raises:
        MissingArtifactError: A hardened model of the grid is absent
    """
    missing = [
        f"{name}/{mode}/eps={epsilon:g}"
        for name in models
        for epsilon in epsilon_grid
        for mode in ("plain", "approximate")
        if (mode, float(epsilon)) not in defenses.get(name, {})
    ]
    if missing:
        raise MissingArtifactError(missing)

    report = RobustnessReport(metadata=dict(metadata or {}))
    report.metadata.update({"eval_epsilon": eval_epsilon,
                            "epsilon_grid": [float(e) for e in epsilon_grid],
                            "attacks": [attack.to_dict() for attack in attacks]})
    for name, model in models.items():
        x, y = stack_windows(windows[name])
        clean = rmse(predict_rul(model, x), y)
        adversarial = {}
        for attack in attacks:
            perturbed, _ = attack_arrays(model, x, y, attack.with_epsilon(eval_epsilon),
                                         workers, chunk_size)
            adversarial[attack.kind] = (perturbed, rmse(predict_rul(model, perturbed), y))

        for epsilon in epsilon_grid:
            plain = defenses[name][("plain", float(epsilon))]
            approx = defenses[name][("approximate", float(epsilon))]
            clean_plain = rmse(predict_rul(plain, x), y)
            clean_approx = rmse(predict_rul(approx, x), y)
            for attack in attacks:
                perturbed, attacked = adversarial[attack.kind]
                defended_plain = rmse(predict_rul(plain, perturbed), y)
                defended_approx = rmse(predict_rul(approx, perturbed), y)
                alpha, beta_plain = robustness_metrics(clean, attacked, defended_plain)
                _, beta_approx = robustness_metrics(clean, attacked, defended_approx)
                report.rows.append(ReportRow(
                    model=name, attack=attack.kind, train_epsilon=float(epsilon),
                    eval_epsilon=float(eval_epsilon), clean_rmse=clean, attacked_rmse=attacked,
                    defended_rmse_plain=defended_plain, defended_rmse_approx=defended_approx,
                    alpha=alpha, beta_plain=beta_plain, beta_approx=beta_approx,
                    clean_rmse_plain=clean_plain, clean_rmse_approx=clean_approx,
                    clean_increase_pct_plain=_increase_pct(clean_plain, clean),
                    clean_increase_pct_approx=_increase_pct(clean_approx, clean),
                ))
        logger.info(f"Defense report rows for {name} complete")
    return report
