"""Shared options and error handling for the experiment management commands."""
from pathlib import Path
from typing import Any, Dict

from django.core.management.base import BaseCommand, CommandError

from recsys.config import ExperimentConfig, load_config
from recsys.exceptions import SRNSError
from recsys.structured_logging import get_training_logger

logger = get_training_logger()


def int_list(text: str):
    return [int(part) for part in text.split(',') if part.strip()]


def float_list(text: str):
    return [float(part) for part in text.split(',') if part.strip()]


class ExperimentCommand(BaseCommand):
    """
    Base class for commands driven by an experiment config.

    Subclasses implement ``run(config, **options)``. Engine errors become
    ``CommandError`` with the error's exit code (2 for bad input, 3 for
    runtime failures).
    """

    def add_arguments(self, parser):
        parser.add_argument('--config', help='INI config file or a summary.json from a previous run')
        parser.add_argument('--preset', choices=['ml100k', 'ml1m'], help='Dataset preset (default: ml100k)')
        parser.add_argument(
            '--set',
            action='append',
            default=[],
            dest='overrides',
            metavar='SECTION.KEY=VALUE',
            help='Override one config value; repeatable'
        )
        parser.add_argument('--data', help='Raw interaction file (dataset.path)')
        parser.add_argument('--snapshot', help='Prepared dataset snapshot directory (dataset.snapshot)')
        parser.add_argument('--seed', type=int, help='Run seed (train.seed)')
        parser.add_argument('--epochs', type=int, help='Number of epochs (train.epochs)')
        parser.add_argument('--sampler', help='Sampling strategy (sampler.strategy)')
        parser.add_argument('--output-dir', help='Directory for run artifacts (output.directory)')

    def flags(self, options: Dict[str, Any]) -> Dict[str, Dict[str, Any]]:
        return {
            'dataset': {'path': options.get('data'), 'snapshot': options.get('snapshot')},
            'train': {'seed': options.get('seed'), 'epochs': options.get('epochs'),
                      'repeat': options.get('repeat'), 'n_jobs': options.get('n_jobs')},
            'sampler': {'strategy': options.get('sampler')},
            'output': {'directory': options.get('output_dir')},
        }

    def load(self, options: Dict[str, Any]) -> ExperimentConfig:
        return load_config(
            path=options.get('config'),
            preset=options.get('preset'),
            overrides=options.get('overrides') or (),
            flags=self.flags(options),
        )

    def handle(self, *args, **options):
        try:
            config = self.load(options)
            Path(config.output.directory).mkdir(parents=True, exist_ok=True)
            # The --config path is already consumed by load(); drop it so it
            # does not collide with run()'s ``config`` parameter.
            self.run(config, **{k: v for k, v in options.items() if k != 'config'})
        except SRNSError as exc:
            logger.error(f'{self.__module__.rsplit(".", 1)[-1]} failed: {exc}')
            raise CommandError(str(exc), returncode=exc.exit_code)

    def run(self, config: ExperimentConfig, **options):
        raise NotImplementedError

    def done(self, message: str):
        self.stdout.write(self.style.SUCCESS(f'✓ {message}'))
