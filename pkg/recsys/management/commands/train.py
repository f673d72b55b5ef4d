"""Management command to train one or more seeds of a configured run.

Usage:
    python manage.py train --snapshot runs/dataset --sampler srns
    python manage.py train --config ml100k.ini --repeat 5 --n-jobs 5
    python manage.py train --config runs/summary.json
"""
from pathlib import Path

from recsys.experiments import aggregate, load_dataset, run_repeats, write_json
from recsys.management.base import ExperimentCommand
from recsys.metrics import export_textfile
from recsys.structured_logging import log_context


class Command(ExperimentCommand):
    help = 'Train the model with the configured negative sampler and write metrics, summary and checkpoint'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--repeat', type=int, help='Number of seeds: seed, seed+1, ... (train.repeat)')
        parser.add_argument('--n-jobs', type=int, help='Worker threads for repeated seeds (train.n_jobs)')
        parser.add_argument(
            '--skip-environment',
            action='store_true',
            help='Do not hash pip freeze into the summary (faster)'
        )

    def run(self, config, **options):
        output = Path(config.output.directory)
        with log_context(command='train'):
            ds = load_dataset(config)
            results = run_repeats(
                ds, config, directory=output,
                capture_environment=False if options.get('skip_environment') else None,
            )
            report = aggregate(results)
            write_json(output / 'aggregate.json', report)
            export_textfile(output / 'prometheus.prom')

        for result in results:
            self.stdout.write(
                f'Seed {result.seed}: {len(result.log.epochs)} epochs, '
                f'test NDCG@3 {result.summary.get("test_ndcg3", float("nan")):.4f}'
                + (' (early stop)' if result.log.stopped_early else '')
            )
        ndcg = report['test_ndcg3']
        recall = report['test_recall3']
        self.stdout.write(f'  NDCG@3: {ndcg["mean"]:.4f} ± {ndcg["std"]:.4f}')
        self.stdout.write(f'  Recall@3: {recall["mean"]:.4f} ± {recall["std"]:.4f}')
        self.done(f'Artifacts written to {output}')
