"""Management command to compare difficulty-only and variance-based sampling across noise levels.

Usage:
    python manage.py noise_sweep --snapshot runs/dataset --sigmas 0,0.2,0.6,0.8,1.0
"""
from pathlib import Path

from recsys.experiments import load_dataset, noise_sweep, write_csv
from recsys.management.base import ExperimentCommand, float_list


class Command(ExperimentCommand):
    help = 'Run SRNS with alpha=0 and the configured alpha for every sigma and seed; write noise_sweep.csv'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--sigmas', type=float_list, help='Comma-separated sigma values (noise.sigmas)')
        parser.add_argument('--seeds', type=int, default=5, help='Seeds per cell (default: 5)')
        parser.add_argument('--n-jobs', type=int, help='Worker threads (train.n_jobs)')

    def run(self, config, **options):
        sigmas = options.get('sigmas') or list(config.noise.sigmas)
        ds = load_dataset(config)
        frame = noise_sweep(ds, config, sigmas, seeds=options['seeds'], n_jobs=options.get('n_jobs'))
        path = write_csv(Path(config.output.directory) / 'noise_sweep.csv', frame)

        for row in frame.itertuples(index=False):
            self.stdout.write(
                f'sigma={row.sigma:.2f} {row.strategy}: '
                f'NDCG@3 {row.ndcg3_mean:.4f} ± {row.ndcg3_std:.4f}, '
                f'Recall@3 {row.recall3_mean:.4f} ± {row.recall3_std:.4f}'
            )
        self.done(f'Sweep written to {path}')
