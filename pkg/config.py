"""
Configuration module for the RUL robustness toolkit.

Environment settings (log level, dataset directory, run directory, worker
count) come from the process environment and an optional ``.env`` file. The
experiment itself (models, attack grid, defense, sweep) is described by a YAML
file; unknown keys are rejected so typos never fall back to defaults.
"""

import logging
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Union

import yaml
from dotenv import load_dotenv

from attacks import ATTACK_KINDS, BIM, PGD, PGD_R, AttackConfig
from defense import DEFAULT_EPSILON_GRID, DEFENSE_MODES, DefenseConfig
from exceptions import ConfigurationError
from harness import DEFAULT_SWEEP_EPSILONS
from models import REFERENCE_SPECS, ModelSpec

# Load environment variables
load_dotenv()

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
TOP_LEVEL_KEYS = ("profile", "data", "models", "attacks", "defense", "sweep", "run")


@dataclass
class Settings:
    """Process-level settings read from the environment."""
    log_level: str = "INFO"
    data_dir: str = "data/CMAPSS"
    run_dir: str = "runs/default"
    workers: int = 1

    @classmethod
    def from_env(cls) -> "Settings":
        try:
            workers = int(os.getenv('WORKERS', '1'))
        except ValueError:
            raise ConfigurationError(f"WORKERS must be an integer, got {os.getenv('WORKERS')!r}") from None
        return cls(
            log_level=os.getenv('LOG_LEVEL', 'INFO').upper(),
            data_dir=os.getenv('CMAPSS_DATA_DIR', 'data/CMAPSS'),
            run_dir=os.getenv('RUN_DIR', 'runs/default'),
            workers=workers,
        )


@dataclass(frozen=True)
class Profile:
    """Run-size preset."""
    name: str
    epoch_scale: float
    restarts: int
    pgd_iterations: int
    defense_epochs: int
    train_subsample: Optional[int]


PROFILES = {
    "desk": Profile("desk", epoch_scale=0.25, restarts=10, pgd_iterations=40,
                    defense_epochs=10, train_subsample=2000),
    "full": Profile("full", epoch_scale=1.0, restarts=30, pgd_iterations=100,
                    defense_epochs=40, train_subsample=None),
}


@dataclass
class DataConfig:
    """Dataset location and preparation settings."""
    data_dir: str = "data/CMAPSS"
    train_file: str = "train_FD001.txt"
    test_file: str = "test_FD001.txt"
    rul_file: str = "RUL_FD001.txt"
    rul_cap: float = 130.0
    min_test_cycles: int = 150
    constant_tolerance: float = 1e-5
    expected_dropped: Optional[int] = 7
    all_test_windows: bool = False

    @property
    def train_path(self) -> Path:
        return Path(self.data_dir) / self.train_file

    @property
    def test_path(self) -> Path:
        return Path(self.data_dir) / self.test_file

    @property
    def rul_path(self) -> Path:
        return Path(self.data_dir) / self.rul_file

    def input_paths(self) -> List[Path]:
        return [self.train_path, self.test_path, self.rul_path]


@dataclass
class DefenseSettings:
    """Adversarial training settings shared by both defense modes."""
    epochs: int = 10
    batch_size: int = 200
    learning_rate: float = 0.001
    weight_groups: int = 16
    seed: int = 0
    optimizer: str = "sgd"
    fit_variable: str = "value"
    train_subsample: Optional[int] = 2000
    epsilon_grid: List[float] = field(default_factory=lambda: list(DEFAULT_EPSILON_GRID))
    eval_epsilon: float = 0.3
    modes: List[str] = field(default_factory=lambda: list(DEFENSE_MODES))

    def __post_init__(self):
        unknown = set(self.modes) - set(DEFENSE_MODES)
        if unknown:
            raise ConfigurationError(f"unknown defense modes: {sorted(unknown)}")
        if list(self.epsilon_grid) != sorted(self.epsilon_grid):
            raise ConfigurationError("defense.epsilon_grid must be sorted ascending")

    def defense_config(self, attacks: List[AttackConfig], mode: str = "approximate") -> DefenseConfig:
        return DefenseConfig(
            attack_list=tuple(attacks),
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            weight_groups=self.weight_groups,
            mode=mode,
            seed=self.seed,
            optimizer=self.optimizer,
            fit_variable=self.fit_variable,
        )


@dataclass
class SweepConfig:
    models: List[str] = field(default_factory=lambda: ["GRU"])
    epsilons: List[float] = field(default_factory=lambda: list(DEFAULT_SWEEP_EPSILONS))
    defended: bool = False


@dataclass
class RunConfig:
    run_dir: str = "runs/default"
    workers: int = 1
    chunk_size: int = 64
    seed: int = 0


@dataclass
class ExperimentConfig:
    """Everything a pipeline run needs, after profile scaling."""
    profile: str
    data: DataConfig
    models: Dict[str, ModelSpec]
    attacks: List[AttackConfig]
    defense: DefenseSettings
    sweep: SweepConfig
    run: RunConfig

    def to_dict(self) -> Dict[str, Any]:
        return {
            "profile": self.profile,
            "data": asdict(self.data),
            "models": {name: spec.to_dict() for name, spec in self.models.items()},
            "attacks": [attack.to_dict() for attack in self.attacks],
            "defense": asdict(self.defense),
            "sweep": asdict(self.sweep),
            "run": asdict(self.run),
        }

    def attack(self, kind: str) -> AttackConfig:
        for attack in self.attacks:
            if attack.kind == kind:
                return attack
        raise ConfigurationError(f"no '{kind}' attack configured")


def setup_logging(level: str = "INFO") -> None:
    """Configure logging for the application."""
    numeric = getattr(logging, str(level).upper(), None)
    if not isinstance(numeric, int):
        raise ConfigurationError(f"unknown log level '{level}'")
    logging.basicConfig(level=numeric, format=LOG_FORMAT, datefmt='%Y-%m-%d %H:%M:%S')


def _check_keys(raw: Any, allowed, where: str) -> Dict[str, Any]:
    if raw is None:
        return {}
    if not isinstance(raw, Mapping):
        raise ConfigurationError(f"'{where}' must be a mapping, got {type(raw).__name__}")
    unknown = [key for key in raw if key not in allowed]
    if unknown:
        key = unknown[0] if where == "<root>" else f"{where}.{unknown[0]}"
        raise ConfigurationError(f"unknown key '{key}' in experiment config")
    return dict(raw)


def _field_names(cls) -> List[str]:
    return [item.name for item in fields(cls) if item.init]


def _build(cls, raw: Any, where: str, **defaults):
    values = {**defaults, **_check_keys(raw, _field_names(cls), where)}
    try:
        return cls(**values)
    except TypeError as e:
        raise ConfigurationError(f"invalid '{where}' section: {e}") from e


def _scaled_epochs(epochs: int, scale: float) -> int:
    return 0 if epochs == 0 else max(1, int(round(epochs * scale)))


def _build_models(raw: Any, profile: Profile, seed: int) -> Dict[str, ModelSpec]:
    if raw is None:
        raw = {name: {} for name in REFERENCE_SPECS}
    if not isinstance(raw, Mapping) or not raw:
        raise ConfigurationError("'models' must be a non-empty mapping of name to spec")
    allowed = _field_names(ModelSpec)
    specs = {}
    for name, entry in raw.items():
        entry = _check_keys(entry, allowed, f"models.{name}")
        architecture = entry.get("architecture", name)
        base = REFERENCE_SPECS[architecture].to_dict() if architecture in REFERENCE_SPECS else {}
        base.update({"architecture": architecture, "seed": seed})
        base.update(entry)
        try:
            spec = ModelSpec(**base)
        except TypeError as e:
            raise ConfigurationError(f"invalid spec for model '{name}': {e}") from e
        specs[name] = replace(spec, epochs=_scaled_epochs(spec.epochs, profile.epoch_scale))
    return specs


def _attack_defaults(kind: str, profile: Profile, seed: int) -> Dict[str, Any]:
    defaults: Dict[str, Any] = {"kind": kind, "epsilon": 0.3, "seed": seed}
    if kind == BIM:
        # alpha stays unset so the step follows epsilon / iterations
        defaults["iterations"] = 100
    elif kind in (PGD, PGD_R):
        defaults.update(alpha=0.003, iterations=profile.pgd_iterations)
    if kind == PGD_R:
        defaults["restarts"] = profile.restarts
    return defaults


def _build_attacks(raw: Any, profile: Profile, seed: int) -> List[AttackConfig]:
    if raw is None:
        raw = [{"kind": kind} for kind in ATTACK_KINDS]
    if not isinstance(raw, list) or not raw:
        raise ConfigurationError("'attacks' must be a non-empty list")
    allowed = _field_names(AttackConfig)
    attacks = []
    for position, entry in enumerate(raw):
        entry = _check_keys(entry, allowed, f"attacks[{position}]")
        kind = entry.get("kind")
        if kind not in ATTACK_KINDS:
            raise ConfigurationError(f"attacks[{position}].kind must be one of {ATTACK_KINDS}, got {kind!r}")
        attacks.append(AttackConfig(**{**_attack_defaults(kind, profile, seed), **entry}))
    return attacks


def build_experiment_config(
    document: Optional[Mapping[str, Any]] = None,
    settings: Optional[Settings] = None,
    profile: Optional[str] = None,
) -> ExperimentConfig:
    """
    Validate a parsed experiment document and apply profile scaling.

    Args:
        document: Parsed YAML mapping (empty or None for all defaults)
        settings: Environment settings supplying directory and worker defaults
        profile: Overrides the document's profile when given

    Raises:
        ConfigurationError: Unknown key, unknown profile or invalid values
    """
    settings = settings or Settings.from_env()
    document = _check_keys(document, TOP_LEVEL_KEYS, "<root>")
    profile_name = profile or document.get("profile", "desk")
    if profile_name not in PROFILES:
        raise ConfigurationError(f"unknown profile '{profile_name}' (choose from {sorted(PROFILES)})")
    chosen = PROFILES[profile_name]

    run = _build(RunConfig, document.get("run"), "run",
                 run_dir=settings.run_dir, workers=settings.workers)
    data = _build(DataConfig, document.get("data"), "data", data_dir=settings.data_dir)
    defense = _build(DefenseSettings, document.get("defense"), "defense", seed=run.seed,
                     epochs=chosen.defense_epochs, train_subsample=chosen.train_subsample)
    sweep = _build(SweepConfig, document.get("sweep"), "sweep")
    models = _build_models(document.get("models"), chosen, run.seed)
    attacks = _build_attacks(document.get("attacks"), chosen, run.seed)

    unknown_models = [name for name in sweep.models if name not in models]
    if unknown_models:
        raise ConfigurationError(f"sweep.models names unconfigured models: {unknown_models}")
    if run.workers < 1 or run.chunk_size < 1:
        raise ConfigurationError("run.workers and run.chunk_size must be >= 1")

    return ExperimentConfig(profile=profile_name, data=data, models=models, attacks=attacks,
                            defense=defense, sweep=sweep, run=run)


def load_experiment_config(
    path: Optional[Union[str, Path]] = None,
    settings: Optional[Settings] = None,
    profile: Optional[str] = None,
) -> ExperimentConfig:
    """Read and validate a YAML experiment file; no path means all defaults."""
    document: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"experiment config not found: {path}")
        try:
            document = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as e:
            raise ConfigurationError(f"cannot parse {path}: {e}") from e
    return build_experiment_config(document, settings, profile)


# Global settings instance
settings = Settings.from_env()
