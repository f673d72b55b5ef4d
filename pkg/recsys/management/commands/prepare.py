"""Management command to ingest a raw interaction file and write a dataset snapshot.

Usage:
    python manage.py prepare --data ml-100k/u.data
    python manage.py prepare --preset ml1m --data ml-1m/ratings.dat --snapshot-dir runs/ml1m
"""
from pathlib import Path

from recsys.data import save_snapshot
from recsys.experiments import prepare_dataset, split_params
from recsys.management.base import ExperimentCommand
from recsys.structured_logging import log_context


class Command(ExperimentCommand):
    help = 'Ingest raw interactions, split them and write train/valid/test TSVs with meta.json'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument(
            '--snapshot-dir',
            help='Where to write the snapshot (default: <output-dir>/dataset)'
        )

    def run(self, config, **options):
        target = Path(options.get('snapshot_dir') or Path(config.output.directory) / 'dataset')
        with log_context(command='prepare'):
            ds, source_hash = prepare_dataset(config)
            save_snapshot(ds, target, source_hash, split_params(config))

        counts = ds.summary()
        self.stdout.write(f'Users: {counts["num_users"]}')
        self.stdout.write(f'Items: {counts["num_items"]}')
        self.stdout.write(f'Train pairs: {counts["train"]}')
        self.stdout.write(f'Validation pairs: {counts["validation"]}')
        self.stdout.write(f'Test pairs: {counts["test"]}')
        self.done(f'Snapshot written to {target}')
