"""Management command to export false-negative diagnostics of a trained checkpoint.

Usage:
    python manage.py analyze --snapshot runs/dataset --checkpoint runs/checkpoint.npz
"""
from pathlib import Path

from recsys.data import build_false_negative_set
from recsys.diagnostics import DEFAULT_DIFFICULTIES, run_diagnostics
from recsys.exceptions import ConfigurationError
from recsys.experiments import load_dataset, write_csv
from recsys.management.base import ExperimentCommand, int_list
from recsys.model import load_checkpoint
from recsys.structured_logging import log_context


class Command(ExperimentCommand):
    help = 'Write CCDF of P_pos, label error ratio by difficulty and std/mean by class for a checkpoint'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--checkpoint', help='Checkpoint file (default: <output-dir>/<output.checkpoint>)')
        parser.add_argument('--difficulties', type=int_list, default=list(DEFAULT_DIFFICULTIES),
                            help='Comma-separated hard-negative difficulties D (default: 1,4,16,64)')
        parser.add_argument('--probes', type=int, default=2000, help='Probe pairs per class')

    def run(self, config, **options):
        output = Path(config.output.directory)
        checkpoint = options.get('checkpoint') or output / (config.output.checkpoint or 'checkpoint.npz')
        seed = config.train.seed

        with log_context(command='analyze', seed=seed):
            state = load_checkpoint(checkpoint)
            ds = load_dataset(config)
            if (state.num_users, state.num_items) != (ds.num_users, ds.num_items):
                raise ConfigurationError(
                    f'checkpoint has {state.num_users} users x {state.num_items} items, '
                    f'dataset has {ds.num_users} x {ds.num_items}'
                )
            noise_seed = seed if config.noise.seed is None else config.noise.seed
            fns = build_false_negative_set(ds, config.noise.flip_fraction, config.noise.sigma, noise_seed)
            report = run_diagnostics(state, ds, fns, config.hyper, seed=seed,
                                     difficulties=options['difficulties'], probes=options['probes'])

        write_csv(output / 'ccdf.csv', report.ccdf_frame())
        write_csv(output / 'ler_by_difficulty.csv', report.ler_frame())
        write_csv(output / 'diagnostics.csv', report.class_frame())

        for D, ler in sorted(report.ler_by_difficulty.items()):
            self.stdout.write(f'D={D}: LER {ler:.4f}')
        for name, value in report.std_mean_by_class.items():
            self.stdout.write(f'{name}: median std/mean {value:.4f}')
        self.done(f'Diagnostics written to {output}')
