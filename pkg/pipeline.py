"""
Experiment pipeline orchestrator.

Runs the prep, train, attack, defend, transfer, report and sweep stages against
one run directory. Every stage records its artifacts and a digest of the
configuration in ``manifest.json``; a stage whose artifacts exist under the
same configuration is skipped unless forced.
"""

import hashlib
import json
import logging
from datetime import datetime
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

import models as model_store
from attacks import AdversarialWindow, export_adversarial
from cmapss import (
    PreparedData,
    TimeWindow,
    final_windows,
    load_container,
    load_split,
    prepare,
    save_split,
    subset_min_cycles,
)
from config import ExperimentConfig
from defense import harden
from exceptions import ConfigurationError, MissingArtifactError, RobustPdMError
from harness import (
    attack_signature,
    defense_epsilon_sweep,
    defense_report,
    epsilon_sweep,
    eval_attack_impact,
    transferability,
)
from models import REFERENCE_TEST_RMSE, RegressionModel, evaluate, piecewise_rul_trace

logger = logging.getLogger(__name__)

TOOL_VERSION = "0.1.0"
STAGES = ("prep", "train", "attack", "defend", "transfer", "report", "sweep")
FULL_RUN = ("prep", "train", "attack", "defend", "transfer", "report")
SUBSAMPLE_STREAM = 2


def file_sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with path.open("rb") as handle:
        for block in iter(lambda: handle.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def artifact_checksum(path: Path) -> str:
    """Content checksum; containers hash their arrays and metadata, not zip bytes."""
    if path.suffix != ".npz":
        return file_sha256(path)
    arrays, metadata = load_container(path)
    digest = hashlib.sha256(json.dumps(metadata, sort_keys=True).encode())
    for name in sorted(arrays):
        digest.update(name.encode())
        digest.update(np.ascontiguousarray(arrays[name]).tobytes())
    return digest.hexdigest()


def _epsilon_tag(epsilon: float) -> str:
    return f"{epsilon:g}".replace(".", "p")


class ExperimentPipeline:
    """Orchestrates the complete robustness experiment across all stages."""

    def __init__(self, experiment: ExperimentConfig, force: bool = False, no_build: bool = False):
        """
        Initialize the pipeline for one run directory.

        Args:
            experiment: Validated experiment configuration
            force: Rerun stages even when their artifacts are current
            no_build: Fail instead of building missing upstream artifacts
        """
        self.config = experiment
        self.run_dir = Path(experiment.run.run_dir)
        self.force = force
        self.no_build = no_build
        self.start_time: Optional[datetime] = None
        self._prepared: Optional[PreparedData] = None
        self._models: Dict[str, RegressionModel] = {}
        self.stats: Dict[str, Any] = {
            'stages_run': [],
            'stages_skipped': [],
            'models_trained': 0,
            'windows_attacked': 0,
            'hardened_models': 0,
            'report_rows': 0,
            'errors': 0,
            'duration_seconds': 0,
        }
        self.config_digest = hashlib.sha256(
            json.dumps(self._digest_source(), sort_keys=True).encode()
        ).hexdigest()

    def _digest_source(self) -> Dict[str, Any]:
        source = self.config.to_dict()
        source.pop("run")
        source["data"].pop("data_dir")
        return source

    # Paths

    def _split_path(self, length: int) -> Path:
        return self.run_dir / "data" / f"split_T{length}.npz"

    def _checkpoint_path(self, name: str) -> Path:
        return self.run_dir / "models" / f"{name}.npz"

    def _hardened_path(self, name: str, mode: str, epsilon: float) -> Path:
        return self.run_dir / "hardened" / f"{name}_{mode}_eps{_epsilon_tag(epsilon)}.npz"

    def _attacked_path(self, name: str, kind: str) -> Path:
        return self.run_dir / "attacks" / f"{name}_{kind}.npz"

    def _report_path(self, filename: str) -> Path:
        return self.run_dir / "reports" / filename

    @property
    def manifest_path(self) -> Path:
        return self.run_dir / "manifest.json"

    def _window_lengths(self) -> List[int]:
        return sorted({spec.sequence_length for spec in self.config.models.values()})

    def expected_artifacts(self, stage: str) -> List[Path]:
        names = list(self.config.models)
        if stage == "prep":
            return [self._split_path(T) for T in self._window_lengths()] + [
                self._report_path("data_summary.json")]
        if stage == "train":
            return [self._checkpoint_path(name) for name in names] + [
                self._report_path("clean_rmse.csv"), self._report_path("piecewise_rul.csv")]
        if stage == "attack":
            return [self._attacked_path(name, attack.kind)
                    for name in names for attack in self.config.attacks] + [
                self._report_path("attack_impact.csv")]
        if stage == "defend":
            return [self._hardened_path(name, mode, epsilon)
                    for name in names
                    for epsilon in self.config.defense.epsilon_grid
                    for mode in self.config.defense.modes]
        if stage == "transfer":
            return [self._report_path(f) for f in
                    ("transferability.csv", "transferability_table.csv", "transferability.json")]
        if stage == "report":
            return [self._report_path(f) for f in
                    ("robustness.csv", "robustness.json", "table_clean_rmse.csv",
                     "table_beta_plain.csv", "table_beta_approx.csv")]
        if stage == "sweep":
            paths = []
            for name in self.config.sweep.models:
                paths.append(self._report_path(f"epsilon_sweep_{name}.csv"))
                paths.append(self._report_path(f"attack_signature_{name}.csv"))
                if self.config.sweep.defended:
                    paths.append(self._report_path(f"defense_sweep_{name}.csv"))
            return paths
        raise ConfigurationError(f"unknown stage '{stage}' (choose from {STAGES})")

    # Manifest

    def load_manifest(self) -> Dict[str, Any]:
        if not self.manifest_path.exists():
            return {}
        return json.loads(self.manifest_path.read_text())

    def _write_manifest(self, stage: str, artifacts: Sequence[Path]) -> None:
        manifest = self.load_manifest()
        manifest.update({
            "tool_version": TOOL_VERSION,
            "config": self.config.to_dict(),
            "config_digest": self.config_digest,
            "seeds": {
                "run": self.config.run.seed,
                "models": {name: spec.seed for name, spec in self.config.models.items()},
                "attacks": {attack.label: attack.seed for attack in self.config.attacks},
                "defense": self.config.defense.seed,
            },
            "inputs": {
                path.name: {"path": str(path), "sha256": file_sha256(path)}
                for path in self.config.data.input_paths() if path.exists()
            },
        })
        manifest.setdefault("stages", {})[stage] = {
            "config_digest": self.config_digest,
            "artifacts": {
                str(path.relative_to(self.run_dir)): artifact_checksum(path) for path in artifacts
            },
        }
        self.manifest_path.parent.mkdir(parents=True, exist_ok=True)
        self.manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))

    def is_complete(self, stage: str) -> bool:
        entry = self.load_manifest().get("stages", {}).get(stage)
        if not entry or entry.get("config_digest") != self.config_digest:
            return False
        return all(path.exists() for path in self.expected_artifacts(stage))

    # Stage driver

    def run_stage(self, stage: str) -> Dict[str, Any]:
        """Run one stage (and whatever it needs) unless it is already complete."""
        handlers: Dict[str, Callable[[], None]] = {
            "prep": self._process_prep,
            "train": self._process_train,
            "attack": self._process_attack,
            "defend": self._process_defend,
            "transfer": self._process_transfer,
            "report": self._process_report,
            "sweep": self._process_sweep,
        }
        if stage not in handlers:
            raise ConfigurationError(f"unknown stage '{stage}' (choose from {STAGES})")
        if stage in self.stats['stages_run']:
            return self.stats
        if not self.force and self.is_complete(stage):
            logger.info(f"Stage '{stage}' already complete, skipping (use --force to rerun)")
            self.stats['stages_skipped'].append(stage)
            return self.stats

        logger.info(f"Processing stage '{stage}'...")
        started = datetime.now()
        try:
            handlers[stage]()
        except Exception as e:
            logger.error(f"Stage '{stage}' failed: {e}")
            self.stats['errors'] += 1
            raise
        self._write_manifest(stage, self.expected_artifacts(stage))
        self.stats['stages_run'].append(stage)
        logger.info(f"Stage '{stage}' finished in {(datetime.now() - started).total_seconds():.2f} seconds")
        return self.stats

    def run(self, stages: Sequence[str]) -> Dict[str, Any]:
        """
        Run stages in order and log a summary.

        Returns:
            Dictionary with pipeline execution statistics
        """
        self.start_time = datetime.now()
        logger.info(f"Starting experiment pipeline in {self.run_dir} with stages {list(stages)}")
        for stage in stages:
            self.run_stage(stage)
        self.stats['duration_seconds'] = (datetime.now() - self.start_time).total_seconds()
        self._log_pipeline_summary()
        return self.stats

    def run_full_pipeline(self) -> Dict[str, Any]:
        return self.run(FULL_RUN)

    def _require(self, stage: str) -> None:
        """Make sure an upstream stage has current artifacts, building them if allowed."""
        if stage in self.stats['stages_run'] or self.is_complete(stage):
            return
        if self.no_build:
            missing = [str(path.relative_to(self.run_dir))
                       for path in self.expected_artifacts(stage) if not path.exists()]
            raise MissingArtifactError(missing or [f"{stage} (stale for this configuration)"])
        logger.info(f"Building missing '{stage}' artifacts")
        force, self.force = self.force, True
        try:
            self.run_stage(stage)
        finally:
            self.force = force

    # Data and model access

    def prepared(self) -> PreparedData:
        if self._prepared is None:
            data = self.config.data
            for path in data.input_paths():
                if not path.exists():
                    raise FileNotFoundError(
                        f"dataset file not found: {path}; set CMAPSS_DATA_DIR or data.data_dir, "
                        f"or create synthetic data with `main.py generate`"
                    )
            self._prepared = prepare(data.train_path, data.test_path, data.rul_path,
                                     cap=data.rul_cap, tolerance=data.constant_tolerance,
                                     expected_dropped=data.expected_dropped)
        return self._prepared

    def eval_windows(self, length: int) -> List[TimeWindow]:
        """Final windows of the test engines with at least ``min_test_cycles`` cycles."""
        traces = subset_min_cycles(self.prepared().test, self.config.data.min_test_cycles)
        return final_windows(traces, length)

    def model(self, name: str) -> RegressionModel:
        if name not in self._models:
            self._require("train")
            self._models[name] = model_store.load(self._checkpoint_path(name),
                                                  self.config.models[name].architecture)
        return self._models[name]

    def _hardened(self, name: str) -> Dict[Tuple[str, float], RegressionModel]:
        self._require("defend")
        architecture = self.config.models[name].architecture
        return {
            (mode, float(epsilon)): model_store.load(self._hardened_path(name, mode, epsilon), architecture)
            for epsilon in self.config.defense.epsilon_grid
            for mode in self.config.defense.modes
        }

    def _write_csv(self, frame: pd.DataFrame, filename: str, **kwargs) -> Path:
        path = self._report_path(filename)
        path.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(path, index=kwargs.pop("index", False), **kwargs)
        return path

    def _write_json(self, document: Mapping[str, Any], filename: str) -> Path:
        path = self._report_path(filename)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(document, indent=2, sort_keys=True))
        return path

    # Stages

    def _process_prep(self) -> None:
        data = self.prepared()
        summary = {
            "train_engines": len(data.train),
            "test_engines": len(data.test),
            "dropped_sensors": data.dropped_sensors,
            "sensor_ids": list(data.sensor_ids),
            "evaluation_engines": len(subset_min_cycles(data.test, self.config.data.min_test_cycles)),
            "windows": {},
        }
        for length in self._window_lengths():
            split = data.split(length, self.config.data.all_test_windows)
            save_split(split, self._split_path(length))
            summary["windows"][f"T{length}"] = {"train": len(split.train), "test": len(split.test)}
        self._write_json(summary, "data_summary.json")
        logger.info(f"Prep: {summary['train_engines']} train engines, {summary['test_engines']} test "
                    f"engines, {summary['evaluation_engines']} evaluation engines")

    def _process_train(self) -> None:
        self._require("prep")
        data = self.prepared()
        clean_rows, trace_rows = [], []
        for name, spec in self.config.models.items():
            split = load_split(self._split_path(spec.sequence_length))
            if len(split.sensor_ids) != spec.n_features:
                raise ConfigurationError(
                    f"model '{name}' expects {spec.n_features} sensors, data has {len(split.sensor_ids)}"
                )
            trained = model_store.train(model_store.build(spec), split.train)
            model_store.save(trained, self._checkpoint_path(name), split.stats)
            self._models[name] = trained
            self.stats['models_trained'] += 1

            clean_rows.append({
                "model": name,
                "spec": spec.label,
                "test_rmse": evaluate(trained, final_windows(data.test, spec.sequence_length)),
                "subset_rmse": evaluate(trained, self.eval_windows(spec.sequence_length)),
                "reference_rmse": REFERENCE_TEST_RMSE.get(spec.architecture),
                "final_train_loss": trained.training_history[-1] if trained.training_history else None,
                "checksum": model_store.checksum(trained),
            })
            for trace in subset_min_cycles(data.test, self.config.data.min_test_cycles):
                for cycle, predicted, true in piecewise_rul_trace(trained, trace):
                    trace_rows.append({"model": name, "engine_id": trace.engine_id, "cycle": cycle,
                                       "predicted_rul": predicted, "true_rul": true})
        self._write_csv(pd.DataFrame(clean_rows), "clean_rmse.csv")
        self._write_csv(pd.DataFrame(trace_rows, columns=["model", "engine_id", "cycle",
                                                          "predicted_rul", "true_rul"]),
                        "piecewise_rul.csv")

    def _process_attack(self) -> None:
        frames = []
        for name, spec in self.config.models.items():
            model = self.model(name)
            windows = self.eval_windows(spec.sequence_length)
            impact = eval_attack_impact(model, windows, self.config.attacks, name=name,
                                        **self._attack_options())
            frames.append(impact.to_frame())
            for attack in self.config.attacks:
                perturbed, losses = impact.examples[attack.label]
                adversarial = [
                    AdversarialWindow(original=item, perturbed=perturbed[k],
                                      achieved_loss=float(losses[k]), config=attack)
                    for k, item in enumerate(windows)
                ]
                export_adversarial(self._attacked_path(name, attack.kind), adversarial, attack,
                                   model_store.checksum(model))
                self.stats['windows_attacked'] += len(adversarial)
        self._write_csv(pd.concat(frames, ignore_index=True), "attack_impact.csv")

    def _attack_options(self) -> Dict[str, int]:
        """Worker count and chunk size for every attack run."""
        return {"workers": self.config.run.workers, "chunk_size": self.config.run.chunk_size}

    def _training_subset(self, windows: List[TimeWindow]) -> List[TimeWindow]:
        limit = self.config.defense.train_subsample
        if limit is None or limit >= len(windows):
            return windows
        rng = np.random.default_rng([self.config.defense.seed, SUBSAMPLE_STREAM])
        chosen = np.sort(rng.choice(len(windows), size=limit, replace=False))
        return [windows[k] for k in chosen]

    def _process_defend(self) -> None:
        settings = self.config.defense
        for name, spec in self.config.models.items():
            base = self.model(name)
            split = load_split(self._split_path(spec.sequence_length))
            train_windows = self._training_subset(split.train)
            hardened = harden(base, train_windows, settings.defense_config(self.config.attacks),
                              settings.epsilon_grid, settings.modes, **self._attack_options())
            for (mode, epsilon), variant in hardened.items():
                model_store.save(variant, self._hardened_path(name, mode, epsilon), split.stats)
                self.stats['hardened_models'] += 1

    def _process_transfer(self) -> None:
        trained = {name: self.model(name) for name in self.config.models}
        traces = subset_min_cycles(self.prepared().test, self.config.data.min_test_cycles)
        matrix = transferability(trained, traces, self.config.attacks, **self._attack_options())
        self._write_csv(matrix.to_frame(), "transferability.csv")
        self._write_csv(matrix.to_table(), "transferability_table.csv", index=True)
        self._write_json(matrix.to_dict(), "transferability.json")

    def _process_report(self) -> None:
        self._require("transfer")
        settings = self.config.defense
        base = {name: self.model(name) for name in self.config.models}
        defenses = {name: self._hardened(name) for name in self.config.models}
        windows = {name: self.eval_windows(spec.sequence_length)
                   for name, spec in self.config.models.items()}
        manifest = self.load_manifest()
        report = defense_report(
            base, defenses, self.config.attacks, settings.epsilon_grid, windows,
            eval_epsilon=settings.eval_epsilon, **self._attack_options(),
            metadata={"tool_version": TOOL_VERSION, "config_digest": self.config_digest,
                      "seeds": manifest.get("seeds", {}), "inputs": manifest.get("inputs", {})},
        )
        if not report.verify():
            raise RobustPdMError("report alpha/beta values disagree with their recomputation")
        self._write_csv(report.to_frame(), "robustness.csv")
        report.write_json(self._report_path("robustness.json"))
        self._write_csv(report.clean_table(), "table_clean_rmse.csv")
        self._write_csv(report.beta_table("plain"), "table_beta_plain.csv")
        self._write_csv(report.beta_table("approximate"), "table_beta_approx.csv")
        self.stats['report_rows'] = len(report.rows)

    def _process_sweep(self) -> None:
        sweep = self.config.sweep
        eval_epsilon = float(self.config.defense.eval_epsilon)
        for name in sweep.models:
            model = self.model(name)
            windows = self.eval_windows(model.spec.sequence_length)
            curve = epsilon_sweep(model, windows, self.config.attacks, sweep.epsilons,
                                  **self._attack_options())
            self._write_csv(curve, f"epsilon_sweep_{name}.csv")
            if windows:
                signature = attack_signature(model, windows[0], 0, self.config.attacks)
                self._write_csv(signature, f"attack_signature_{name}.csv")
            else:
                self._write_csv(pd.DataFrame(columns=["cycle", "clean"]), f"attack_signature_{name}.csv")
            if sweep.defended:
                hardened = self._hardened(name)
                variants = {mode: hardened[(mode, eval_epsilon)]
                            for mode in self.config.defense.modes if (mode, eval_epsilon) in hardened}
                if not variants:
                    raise MissingArtifactError([f"{name}/<mode>/eps={eval_epsilon:g}"])
                frame = defense_epsilon_sweep(model, variants, windows, self.config.attacks,
                                              sweep.epsilons, **self._attack_options())
                self._write_csv(frame, f"defense_sweep_{name}.csv")

    def _log_pipeline_summary(self) -> None:
        """Log pipeline execution summary."""
        logger.info("=" * 50)
        logger.info("Experiment Pipeline Execution Summary")
        logger.info("=" * 50)
        logger.info(f"Stages run: {', '.join(self.stats['stages_run']) or 'none'}")
        logger.info(f"Stages skipped: {', '.join(self.stats['stages_skipped']) or 'none'}")
        logger.info(f"Models trained: {self.stats['models_trained']}")
        logger.info(f"Windows attacked: {self.stats['windows_attacked']}")
        logger.info(f"Hardened models: {self.stats['hardened_models']}")
        logger.info(f"Report rows: {self.stats['report_rows']}")
        logger.info(f"Errors: {self.stats['errors']}")
        logger.info(f"Duration: {self.stats['duration_seconds']:.2f} seconds")
        logger.info("=" * 50)
