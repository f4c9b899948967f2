import os
import json
import logging
import uuid
import time
from datetime import datetime
from typing import Optional, Union
from contextlib import contextmanager


class StructuredFormatter(logging.Formatter):
    """JSON formatter for structured logging"""

    def format(self, record):
        log_entry = {
            "timestamp": datetime.utcnow().isoformat(),
            "level": record.levelname,
            "logger": record.name,
            "module": record.module,
            "function": record.funcName,
            "message": record.getMessage()
        }

        for key in ("action", "status", "duration_ms", "operation_id"):
            if hasattr(record, key):
                log_entry[key] = getattr(record, key)

        if hasattr(record, 'extra_fields'):
            log_entry.update(record.extra_fields)

        if record.exc_info:
            log_entry["exception"] = {
                "type": record.exc_info[0].__name__,
                "message": str(record.exc_info[1])
            }

        return json.dumps(log_entry, default=str)


def _build_handlers(formatter: logging.Formatter):
    # stderr only: stdout carries data when an output path is "-"
    handlers = [logging.StreamHandler()]
    log_file = os.getenv('LOG_FILE')
    if log_file:
        try:
            handlers.append(logging.FileHandler(log_file))
        except OSError as e:
            logging.getLogger(__name__).warning(f"⚠️ Could not set up file logging: {e}")
    for handler in handlers:
        handler.setFormatter(formatter)
    return handlers


class StructuredLogger:
    """Structured logging for the RETAIN toolkit.

    Owns the ``retain`` logger used by the CLI and scripts and the ``services``
    logger that every service module's ``logging.getLogger(__name__)`` rolls up to.
    """

    def __init__(self):
        self.logger = logging.getLogger('retain')
        self.configure()

    def configure(self, level: Optional[str] = None):
        """(Re)install handlers and the level from LOG_LEVEL / LOG_FILE"""
        formatter = StructuredFormatter()
        log_level = (level or os.getenv('LOG_LEVEL', 'INFO')).upper()
        for logger in (self.logger, logging.getLogger('services')):
            for handler in logger.handlers[:]:
                logger.removeHandler(handler)
            for handler in _build_handlers(formatter):
                logger.addHandler(handler)
            logger.setLevel(getattr(logging, log_level, logging.INFO))
            logger.propagate = False

    def _log_with_context(self, level: str, message: str, **kwargs):
        record = self.logger.makeRecord(
            self.logger.name, getattr(logging, level.upper()), '', 0, message, (), None
        )
        record.extra_fields = kwargs
        if self.logger.isEnabledFor(record.levelno):
            self.logger.handle(record)

    def info(self, message: str, **kwargs):
        self._log_with_context('INFO', message, **kwargs)

    def warning(self, message: str, **kwargs):
        self._log_with_context('WARNING', message, **kwargs)

    def error(self, message: str, **kwargs):
        self._log_with_context('ERROR', message, **kwargs)

    def debug(self, message: str, **kwargs):
        self._log_with_context('DEBUG', message, **kwargs)

    @contextmanager
    def timed_operation(self, action: str, **kwargs):
        """Context manager for timing operations"""
        start_time = time.time()
        operation_id = str(uuid.uuid4())[:8]

        try:
            self.info(f"🚀 Operation started: {action}",
                      action=action,
                      operation_id=operation_id,
                      status="started",
                      **kwargs)

            yield operation_id

            duration_ms = (time.time() - start_time) * 1000
            self.info(f"✅ Operation completed: {action}",
                      action=action,
                      operation_id=operation_id,
                      status="completed",
                      duration_ms=round(duration_ms, 2),
                      **kwargs)

        except Exception as e:
            duration_ms = (time.time() - start_time) * 1000
            self.error(f"❌ Operation failed: {action}",
                       action=action,
                       operation_id=operation_id,
                       status="failed",
                       duration_ms=round(duration_ms, 2),
                       error=str(e),
                       error_type=type(e).__name__,
                       **kwargs)
            raise

    def log_epoch(self, model_kind: str, epoch: int, train_nll: float, valid_nll: Optional[float] = None, **kwargs):
        """Log one training epoch"""
        valid = f", valid {valid_nll:.5f}" if valid_nll is not None else ""
        self.info(f"📈 Epoch {epoch}: train {train_nll:.5f}{valid}",
                  action="train_epoch",
                  model_kind=model_kind,
                  epoch=epoch,
                  train_nll=train_nll,
                  valid_nll=valid_nll,
                  **kwargs)

    def log_gradient_check(self, model_kind: str, worst_error: float, passed: bool, **kwargs):
        """Log a gradient check outcome"""
        icon = "✅" if passed else "❌"
        self._log_with_context('INFO' if passed else 'ERROR',
                               f"{icon} Gradient check {model_kind}: worst relative error {worst_error:.3e}",
                               action="gradcheck",
                               model_kind=model_kind,
                               worst_error=worst_error,
                               status="passed" if passed else "failed",
                               **kwargs)

    def log_integrity_check(self, patient_id: str, step: int, max_error: float, passed: bool, **kwargs):
        """Log a reconstruction check of a contribution decomposition"""
        icon = "🎯" if passed else "❌"
        self._log_with_context('INFO' if passed else 'ERROR',
                               f"{icon} Reconstruction {patient_id} step {step}: max error {max_error:.3e}",
                               action="reconstruction",
                               patient_id=patient_id,
                               step=step,
                               max_error=max_error,
                               status="passed" if passed else "failed",
                               **kwargs)

    def log_data_summary(self, path: str, n_patients: int, **kwargs):
        """Log the shape of a cohort that was read or written"""
        self.info(f"📁 Cohort {path}: {n_patients} patients",
                  action="data",
                  path=path,
                  n_patients=n_patients,
                  **kwargs)

    def log_performance_metric(self, metric_name: str, value: Union[int, float], unit: str = "", **kwargs):
        """Log evaluation metrics"""
        self.info(f"📊 Metric: {metric_name} = {value}{unit}",
                  action="metric",
                  metric_name=metric_name,
                  value=value,
                  unit=unit,
                  **kwargs)


# Global logger instance
structured_logger = StructuredLogger()
