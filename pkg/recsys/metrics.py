"""
Prometheus metrics for training runs.

Metrics:
- Epochs and batches processed
- Epoch and sampling-phase duration by strategy
- SRNS memory refreshes
- Label error ratio and validation NDCG of the latest epoch
"""
from pathlib import Path
from typing import Optional, Union
import time

from prometheus_client import REGISTRY, Counter, Gauge, Histogram, write_to_textfile

# Training loop metrics
epochs_total = Counter(
    'srns_epochs_total',
    'Total number of training epochs completed',
    ['strategy']
)

batches_total = Counter(
    'srns_batches_total',
    'Total number of mini-batches applied',
    ['strategy']
)

epoch_duration = Histogram(
    'srns_epoch_duration_seconds',
    'Wall-clock time of one training epoch',
    ['strategy'],
    buckets=(0.1, 0.5, 1.0, 2.0, 5.0, 10.0, 30.0, 60.0, 300.0)
)

sampling_duration = Histogram(
    'srns_sampling_duration_seconds',
    'Time spent selecting negatives and refreshing memories in one epoch',
    ['strategy'],
    buckets=(0.01, 0.05, 0.1, 0.5, 1.0, 5.0, 10.0, 60.0)
)

# Sampler metrics
memory_refreshes_total = Counter(
    'srns_memory_refreshes_total',
    'Total number of per-user memory refreshes'
)

label_error_ratio = Gauge(
    'srns_label_error_ratio',
    'Fraction of selected negatives that are known false negatives (latest epoch)',
    ['strategy']
)

# Evaluation metrics
validation_ndcg1 = Gauge(
    'srns_validation_ndcg1',
    'Validation NDCG@1 at the latest evaluated epoch',
    ['strategy']
)


class TimedOperation:
    """
    Context manager for timing operations with automatic metric recording.

    The measured duration stays available as ``elapsed`` after the block.

    Usage:
        with TimedOperation(sampling_duration, labels={'strategy': 'srns'}) as timer:
            ...
        seconds = timer.elapsed
    """
    def __init__(self, metric_histogram: Optional[Histogram] = None, labels=None):
        self.metric = metric_histogram
        self.labels = labels or {}
        self.start_time = None
        self.elapsed = 0.0

    def __enter__(self):
        self.start_time = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        self.elapsed = time.perf_counter() - self.start_time
        if self.metric is not None:
            if self.labels:
                self.metric.labels(**self.labels).observe(self.elapsed)
            else:
                self.metric.observe(self.elapsed)
        return False  # Don't suppress exceptions


def record_epoch(strategy: str, epoch_seconds: float, sampling_seconds: float,
                 ler: Optional[float] = None, val_ndcg1: Optional[float] = None):
    """Record the per-epoch metrics of one training epoch."""
    epochs_total.labels(strategy=strategy).inc()
    epoch_duration.labels(strategy=strategy).observe(epoch_seconds)
    sampling_duration.labels(strategy=strategy).observe(sampling_seconds)
    if ler is not None:
        label_error_ratio.labels(strategy=strategy).set(ler)
    if val_ndcg1 is not None:
        validation_ndcg1.labels(strategy=strategy).set(val_ndcg1)


def export_textfile(path: Union[str, Path]) -> None:
    """Write the current registry in the Prometheus text exposition format."""
    write_to_textfile(str(path), REGISTRY)
