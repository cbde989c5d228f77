#!/usr/bin/env python3
"""
Main entry point for the RUL robustness toolkit.

Provides CLI interface for the experiment stages:
- Dataset preparation and model training
- Adversarial attacks and transferability
- Adversarial training defenses and the robustness report
- Epsilon sweeps
- Synthetic data generation

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

import argparse
import logging
import sys
from dataclasses import replace
from typing import List, Optional, Sequence

from config import load_experiment_config, settings, setup_logging
from data_generator import CmapssDataGenerator
from exceptions import ConfigurationError, MissingArtifactError, RobustPdMError, UsageError
from pipeline import FULL_RUN, STAGES, ExperimentPipeline

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class ArgumentParser(argparse.ArgumentParser):
    """argparse with usage errors mapped to exit code 1."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def parse_epsilons(text: str) -> List[float]:
    try:
        values = [float(item) for item in text.split(",") if item.strip()]
    except ValueError:
        raise UsageError(f"--eps expects comma-separated numbers, got '{text}'") from None
    if not values:
        raise UsageError("--eps needs at least one value")
    return values


def run_stages(args: argparse.Namespace, stages: Sequence[str]) -> None:
    """Run pipeline stages for the loaded experiment."""
    experiment = load_experiment_config(args.config, settings, args.profile)
    if args.run_dir:
        experiment.run = replace(experiment.run, run_dir=args.run_dir)
    if getattr(args, "eps", None):
        experiment.sweep = replace(experiment.sweep, epsilons=parse_epsilons(args.eps))
    if getattr(args, "models", None):
        names = [name.strip() for name in args.models.split(",") if name.strip()]
        unknown = [name for name in names if name not in experiment.models]
        if unknown:
            raise UsageError(f"unknown models {unknown}; configured: {list(experiment.models)}")
        experiment.models = {name: experiment.models[name] for name in names}
        experiment.sweep = replace(experiment.sweep,
                                   models=[name for name in experiment.sweep.models if name in names] or names[:1])

    print(f"\n🚀 Starting {' → '.join(stages)} ({experiment.profile} profile) in {experiment.run.run_dir}...\n")
    pipeline = ExperimentPipeline(experiment, force=args.force, no_build=args.no_build)
    stats = pipeline.run(stages)

    print("\n✅ Pipeline completed successfully!")
    print("\n📊 Results:")
    print(f"  • Stages run: {', '.join(stats['stages_run']) or 'none'}")
    print(f"  • Stages skipped: {', '.join(stats['stages_skipped']) or 'none'}")
    print(f"  • Models trained: {stats['models_trained']}")
    print(f"  • Hardened models: {stats['hardened_models']}")
    print(f"  • Duration: {stats['duration_seconds']:.2f} seconds")
    print(f"  • Manifest: {pipeline.manifest_path}")


def generate_sample_data(args: argparse.Namespace) -> None:
    """Write a synthetic FD001-format dataset."""
    out_dir = args.out_dir or settings.data_dir
    print(f"\n📝 Generating {args.train_engines} train / {args.test_engines} test engines in {out_dir}...\n")
    generator = CmapssDataGenerator(seed=args.seed, min_life=args.min_life, max_life=args.max_life)
    paths = generator.generate(out_dir, args.train_engines, args.test_engines)
    print("\n✅ Generated synthetic dataset:")
    for path in paths.values():
        print(f"  • {path}")


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(
        description='RUL robustness toolkit - adversarial attacks and defenses for turbofan RUL models'
    )
    parser.add_argument('--config', help='YAML experiment file (default: built-in defaults)')
    parser.add_argument('--profile', choices=['desk', 'full'], help='Run-size profile override')
    parser.add_argument('--run-dir', help='Run directory (default: RUN_DIR or runs/default)')
    parser.add_argument('--log-level', default=None, help='Logging level (default: LOG_LEVEL or INFO)')

    subparsers = parser.add_subparsers(dest='command', help='Available commands')

    for stage in STAGES + ('all',):
        help_text = 'Run prep through report' if stage == 'all' else f'Run the {stage} stage'
        stage_parser = subparsers.add_parser(stage, help=help_text)
        stage_parser.add_argument('--force', action='store_true', help='Rerun completed stages')
        stage_parser.add_argument('--no-build', action='store_true',
                                  help='Fail instead of building missing upstream artifacts')
        stage_parser.add_argument('--models', help='Comma-separated subset of configured models')
        if stage == 'sweep':
            stage_parser.add_argument('--eps', help='Comma-separated ascending epsilon list')

    gen_parser = subparsers.add_parser('generate', help='Generate a synthetic dataset')
    gen_parser.add_argument('--out-dir', help='Output directory (default: CMAPSS_DATA_DIR)')
    gen_parser.add_argument('--train-engines', type=int, default=100,
                            help='Number of run-to-failure engines (default: 100)')
    gen_parser.add_argument('--test-engines', type=int, default=100,
                            help='Number of truncated test engines (default: 100)')
    gen_parser.add_argument('--min-life', type=int, default=128, help='Shortest engine life (default: 128)')
    gen_parser.add_argument('--max-life', type=int, default=362, help='Longest engine life (default: 362)')
    gen_parser.add_argument('--seed', type=int, default=0, help='Random seed (default: 0)')
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main CLI entry point; returns the process exit code."""
    parser = build_parser()
    args = parser.parse_args(argv)

    if not args.command:
        parser.print_help()
        return EXIT_OK

    try:
        setup_logging(args.log_level or settings.log_level)
        if args.command == 'generate':
            generate_sample_data(args)
        elif args.command == 'all':
            run_stages(args, FULL_RUN)
        else:
            run_stages(args, [args.command])
    except (ConfigurationError, UsageError, MissingArtifactError) as e:
        print(f"\n❌ {args.command} failed: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as e:
        print(f"\n❌ {args.command} failed: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (RobustPdMError, OSError, ValueError) as e:
        print(f"\n❌ {args.command} failed: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == '__main__':
    sys.exit(main())
