"""
Logging setup, JSON log lines, timed operations, in-process metrics and
error reporting for the CLI.
"""

import json
import logging
import logging.handlers
import sys
import time
from datetime import datetime
from functools import wraps
from pathlib import Path
from typing import Any, Dict, Optional

from src.core.config import Config

RECORD_FIELDS = ('module', 'funcName', 'lineno')


class StructuredLogFormatter(logging.Formatter):
    """One JSON object per record; `extra_data` keys are merged in at the top level"""

    def format(self, record):
        entry = {
            'timestamp': datetime.fromtimestamp(record.created).isoformat(),
            'level': record.levelname,
            'logger': record.name,
            'message': record.getMessage(),
        }
        entry.update({name: getattr(record, name) for name in RECORD_FIELDS})
        entry.update(getattr(record, 'extra_data', {}))
        if record.exc_info:
            entry['exception'] = self.formatException(record.exc_info)
        return json.dumps(entry, ensure_ascii=False, default=str)


class PerformanceLogger:
    """Times a block; logs at `level` on success and at ERROR when the block raises"""

    def __init__(self, operation_name: str, logger: Optional[logging.Logger] = None,
                 extra_data: Optional[Dict[str, Any]] = None, level: int = logging.INFO):
        self.operation_name = operation_name
        self.logger = logger or logging.getLogger(__name__)
        self.extra_data = extra_data or {}
        self.level = level
        self.start_time = None
        self.duration = None

    def _context(self, status: str, **fields) -> Dict[str, Any]:
        return {'extra_data': {'operation': self.operation_name, 'status': status, **fields, **self.extra_data}}

    def __enter__(self):
        self.start_time = time.perf_counter()
        self.logger.debug(f"{self.operation_name}: started", extra=self._context('started'))
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        self.duration = time.perf_counter() - self.start_time
        fields = {'duration_seconds': round(self.duration, 3)}
        if exc_type is None:
            self.logger.log(self.level, f"{self.operation_name}: done in {self.duration:.3f}s",
                            extra=self._context('completed', **fields))
        else:
            fields.update(error_type=exc_type.__name__, error_message=str(exc_val))
            self.logger.error(f"{self.operation_name}: failed after {self.duration:.3f}s",
                              extra=self._context('failed', **fields))


def performance_monitor(operation_name: str, logger: Optional[logging.Logger] = None):
    """Decorator form of PerformanceLogger"""
    def decorator(func):
        @wraps(func)
        def wrapper(*args, **kwargs):
            with PerformanceLogger(operation_name, logger):
                return func(*args, **kwargs)
        return wrapper
    return decorator


class MetricsCollector:
    """Gauges and counters for one run, keyed `name[label=value,...]`"""

    def __init__(self):
        self.values: Dict[str, float] = {}

    @staticmethod
    def key(name: str, labels: Optional[Dict[str, str]] = None) -> str:
        if not labels:
            return name
        return f"{name}[{','.join(f'{k}={v}' for k, v in sorted(labels.items()))}]"

    def increment(self, name: str, value: float = 1, labels: Optional[Dict[str, str]] = None):
        key = self.key(name, labels)
        self.values[key] = self.values.get(key, 0) + value

    def gauge(self, name: str, value: float, labels: Optional[Dict[str, str]] = None):
        self.values[self.key(name, labels)] = value

    def snapshot(self) -> Dict[str, float]:
        return dict(self.values)


def setup_logging(config: Config):
    """Console on stderr, JSON lines to `logging.file`, ERROR and above also to `<stem>_errors<suffix>`"""
    log_config = config.logging
    log_path = Path(log_config.file)
    log_path.parent.mkdir(parents=True, exist_ok=True)
    error_path = log_path.with_name(f"{log_path.stem}_errors{log_path.suffix}")

    plain = logging.Formatter(log_config.format)
    file_formatter = StructuredLogFormatter() if log_config.structured else plain

    file_handler = logging.handlers.RotatingFileHandler(
        log_path, maxBytes=log_config.max_file_size_mb * 1024 * 1024, backupCount=log_config.backup_count)
    file_handler.setFormatter(file_formatter)

    error_handler = logging.handlers.RotatingFileHandler(error_path, maxBytes=5 * 1024 * 1024, backupCount=3)
    error_handler.setLevel(logging.ERROR)
    error_handler.setFormatter(file_formatter)

    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.setFormatter(plain)

    root = logging.getLogger()
    root.setLevel(getattr(logging, log_config.level.upper()))
    root.handlers.clear()
    for handler in (file_handler, error_handler, console_handler):
        root.addHandler(handler)

    logging.getLogger('spi.startup').info(
        "Logging initialized",
        extra={'extra_data': {'log_level': log_config.level, 'structured_logging': log_config.structured,
                              'log_file': str(log_path), 'error_file': str(error_path)}}
    )


class ErrorTracker:
    """Logs a command failure once, with its exit code and numerical diagnostics attached"""

    def __init__(self, logger: Optional[logging.Logger] = None):
        self.logger = logger or logging.getLogger(__name__)

    def track_error(self, error: BaseException, context: Optional[Dict[str, Any]] = None):
        error_type = type(error).__name__
        self.logger.error(
            f"{error_type}: {error}",
            extra={'extra_data': {'error_type': error_type, 'error_message': str(error), **(context or {})}}
        )


error_tracker = ErrorTracker()
