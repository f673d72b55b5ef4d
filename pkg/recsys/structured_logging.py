"""
Structured JSON logging for training runs.

Provides JSON-formatted records carrying run context (run id, seed, epoch,
batch, sampling strategy) so that repeated runs and sweeps can be told apart
when their logs are aggregated.
"""
import contextlib
import contextvars
import json
import logging
import traceback
from datetime import datetime, timezone
from typing import Any, Dict, Iterator

from django.conf import settings

# Fields copied from a record into the JSON document when present
RUN_FIELDS = (
    'run_id',
    'command',
    'seed',
    'epoch',
    'batch',
    'strategy',
    'sigma',
    'scorer',
    'loss',
    'val_ndcg1',
    'test_ndcg3',
    'ler',
    'seconds',
    'path',
)

_run_context: contextvars.ContextVar[Dict[str, Any]] = contextvars.ContextVar(
    'srns_run_context', default={}
)
_factory_installed = False


class JSONFormatter(logging.Formatter):
    """
    Format log records as JSON for structured logging.

    Output format compatible with ELK, Splunk, CloudWatch, and other log aggregators.
    """

    def format(self, record: logging.LogRecord) -> str:
        """
        Format log record as JSON.

        Args:
            record: Python logging record

        Returns:
            JSON string with structured log data
        """
        log_data = {
            'timestamp': datetime.fromtimestamp(record.created, tz=timezone.utc).isoformat(),
            'level': record.levelname,
            'logger': record.name,
            'message': record.getMessage(),
            'module': record.module,
            'function': record.funcName,
            'line': record.lineno,
            'process': record.process,
            'thread': record.thread,
        }

        if record.exc_info:
            log_data['exception'] = {
                'type': record.exc_info[0].__name__ if record.exc_info[0] else None,
                'message': str(record.exc_info[1]) if record.exc_info[1] else None,
                'traceback': traceback.format_exception(*record.exc_info),
            }

        for field in RUN_FIELDS:
            if hasattr(record, field):
                log_data[field] = getattr(record, field)

        log_data['environment'] = getattr(settings, 'SRNS_ENVIRONMENT', 'development')
        log_data['service'] = 'srns-lab'

        return json.dumps(log_data, default=str)


class StructuredLogger:
    """
    Wrapper for Python logger with structured logging support.

    Usage:
        logger = StructuredLogger(__name__)
        logger.info('Epoch finished', epoch=3, loss=0.41)
    """

    def __init__(self, name: str):
        self.logger = logging.getLogger(name)

    def _log(self, level: int, message: str, **kwargs):
        extra = {k: v for k, v in kwargs.items() if k not in ['exc_info']}
        # The record factory stamps context fields first; explicit ones go through the context
        context = _run_context.get()
        overrides = {k: extra.pop(k) for k in list(extra) if k in context}
        if overrides:
            with log_context(**overrides):
                self.logger.log(level, message, extra=extra, exc_info=kwargs.get('exc_info'))
        else:
            self.logger.log(level, message, extra=extra, exc_info=kwargs.get('exc_info'))

    def isEnabledFor(self, level: int) -> bool:
        return self.logger.isEnabledFor(level)

    def debug(self, message: str, **kwargs):
        """Log debug message with structured fields."""
        self._log(logging.DEBUG, message, **kwargs)

    def info(self, message: str, **kwargs):
        """Log info message with structured fields."""
        self._log(logging.INFO, message, **kwargs)

    def warning(self, message: str, **kwargs):
        """Log warning message with structured fields."""
        self._log(logging.WARNING, message, **kwargs)

    def error(self, message: str, **kwargs):
        """Log error message with structured fields."""
        self._log(logging.ERROR, message, **kwargs)

    def critical(self, message: str, **kwargs):
        """Log critical message with structured fields."""
        self._log(logging.CRITICAL, message, **kwargs)

    def exception(self, message: str, **kwargs):
        """Log exception with structured fields and traceback."""
        kwargs['exc_info'] = True
        self._log(logging.ERROR, message, **kwargs)


def get_training_logger() -> StructuredLogger:
    """Get logger for the training loop."""
    return StructuredLogger('training')


def get_data_logger() -> StructuredLogger:
    """Get logger for ingestion and splitting."""
    return StructuredLogger('data')


def get_evaluation_logger() -> StructuredLogger:
    """Get logger for ranking metrics and diagnostics."""
    return StructuredLogger('evaluation')


def install_context_factory() -> None:
    """
    Install a record factory that stamps the current run context on records.

    Called once from the app config. Context values never overwrite fields
    passed explicitly through ``extra``.
    """
    global _factory_installed
    if _factory_installed:
        return
    old_factory = logging.getLogRecordFactory()

    def record_factory(*args, **kwargs):
        record = old_factory(*args, **kwargs)
        for key, value in _run_context.get().items():
            if not hasattr(record, key):
                setattr(record, key, value)
        return record

    logging.setLogRecordFactory(record_factory)
    _factory_installed = True


@contextlib.contextmanager
def log_context(**fields: Any) -> Iterator[None]:
    """
    Tag every record logged inside the block with ``fields``.

    Contexts nest; inner values win. Each thread keeps its own context, so
    seeds fanned out to worker threads must open their own block.
    """
    merged = {**_run_context.get(), **fields}
    token = _run_context.set(merged)
    try:
        yield
    finally:
        _run_context.reset(token)
