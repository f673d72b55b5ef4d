"""Management command to measure SRNS sampling cost against memory size.

Usage:
    python manage.py profile --snapshot runs/dataset --pools 8,16,32,64,128 --lazy-periods 2
"""
from dataclasses import replace
from pathlib import Path

from recsys.exceptions import ConfigurationError
from recsys.experiments import load_dataset, write_csv, write_json
from recsys.management.base import ExperimentCommand, int_list
from recsys.sampler import SamplingStrategy
from recsys.structured_logging import log_context
from recsys.trainer import fit_cost_model, lazy_ratio, timing_profile


def split_pool(pool: int, s1: int, s2: int):
    """S1 and S2 summing to ``pool`` in the configured proportion; S1 stays >= 1."""
    if pool < 1:
        raise ConfigurationError(f'pool sizes must be >= 1, got {pool}')
    first = min(pool, max(1, round(pool * s1 / (s1 + s2))))
    return first, pool - first


class Command(ExperimentCommand):
    help = 'Time SRNS epochs for several S1+S2 sizes and fit sampling seconds against S1+S2'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--pools', type=int_list, default=[8, 16, 32, 64, 128],
                            help='Comma-separated S1+S2 totals (default: 8,16,32,64,128)')
        parser.add_argument('--lazy-periods', type=int_list, default=[],
                            help='Extra lazy-update periods E to profile at every pool size')
        parser.add_argument('--profile-epochs', type=int, default=3,
                            help='Epochs per variant, rounded up to a whole number of periods')

    def run(self, config, **options):
        base = replace(config.sampler, strategy=SamplingStrategy.SRNS)
        variants = []
        for pool in options['pools']:
            s1, s2 = split_pool(pool, base.S1, base.S2)
            for E in [1] + [e for e in options['lazy_periods'] if e != 1]:
                variants.append(replace(base, S1=s1, S2=s2, E=E))

        output = Path(config.output.directory)
        with log_context(command='profile'):
            ds = load_dataset(config)
            frame = timing_profile(ds, config.to_run_config(), variants, epochs=options['profile_epochs'])
        write_csv(output / 'profile.csv', frame)

        fit = fit_cost_model(frame) if len(set(options['pools'])) >= 2 else None
        lazy = {}
        for pool in sorted(set(frame['pool'])):
            for E in options['lazy_periods']:
                ratio = lazy_ratio(frame, int(pool), E)
                if ratio is not None:
                    lazy[f'pool={int(pool)},E={E}'] = ratio
        write_json(output / 'profile_fit.json', {'fit': fit, 'lazy_ratio': lazy})

        for row in frame.itertuples(index=False):
            self.stdout.write(f'S1+S2={row.pool} E={row.E}: sampling {row.sampling_seconds:.4f}s per epoch')
        if fit is not None:
            self.stdout.write(f'  slope {fit["slope"]:.6f}s per slot, R² {fit["r2"]:.3f}')
        self.done(f'Profile written to {output}')
