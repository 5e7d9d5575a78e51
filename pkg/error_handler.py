#!/usr/bin/env python3
"""
Error Handling and Logging Module for the Cold-Start Audience Recommender
Provides the error taxonomy shared by all pipeline modules, logging setup,
and the CLI error decorator.
"""

import os
import sys
import json
import logging
from datetime import datetime
from functools import wraps
from typing import Dict, Any, Optional
import traceback


class ColdStartError(Exception):
    """Base class for every pipeline error; carries the module it came from."""

    module = "pipeline"

    def __init__(self, message: str, module: Optional[str] = None):
        super().__init__(message)
        if module is not None:
            self.module = module

    def describe(self) -> str:
        return f"[{self.module}] {self}"


class ConfigurationError(ColdStartError):
    module = "config"


class InputFormatError(ColdStartError):
    module = "catalog"


class UnknownShowError(ColdStartError, KeyError):
    module = "copurchase"

    def __str__(self):
        # KeyError would repr() the message
        return str(self.args[0]) if self.args else ""


class ShowConflictError(ColdStartError):
    module = "contentsim"


class EmptyTrainingSetError(ColdStartError):
    module = "contentsim"


class DivergenceError(ColdStartError):
    module = "contentsim"

    def __init__(self, message: str, epoch: int):
        super().__init__(message)
        self.epoch = epoch


class ErrorHandler:
    LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

    def __init__(self):
        self.error_counts = {}
        self.logger = logging.getLogger("coldstart")

    def setup_logging(self, log_level: str = "INFO", log_dir: Optional[str] = None):
        """Setup logging configuration; stdout stays free for summaries"""
        handlers = [logging.StreamHandler(sys.stderr)]
        if log_dir:
            os.makedirs(log_dir, exist_ok=True)
            log_file = os.path.join(log_dir, f"coldstart_{datetime.now().strftime('%Y%m%d')}.log")
            handlers.append(logging.FileHandler(log_file))

        logging.basicConfig(
            level=getattr(logging, log_level.upper(), logging.INFO),
            format=self.LOG_FORMAT,
            handlers=handlers,
            force=True,
        )

    def log_error(self, error: Exception, context: Dict[str, Any] = None,
                  error_type: str = "GENERAL") -> str:
        """Log an error with context"""
        error_id = f"{error_type}_{datetime.now().strftime('%Y%m%d_%H%M%S')}"

        error_info = {
            "error_id": error_id,
            "error_type": error_type,
            "error_message": str(error),
            "error_class": error.__class__.__name__,
            "module": getattr(error, "module", None),
            "context": context or {}
        }
        if self.logger.isEnabledFor(logging.DEBUG):
            error_info["traceback"] = traceback.format_exc()

        self.logger.error(json.dumps(error_info, default=str))

        self.error_counts[error_type] = self.error_counts.get(error_type, 0) + 1
        return error_id

    def log_warning(self, message: str, context: Dict[str, Any] = None):
        """Log a warning"""
        warning_info = {
            "message": message,
            "context": context or {}
        }
        self.logger.warning(json.dumps(warning_info, default=str))

    def log_info(self, message: str, context: Dict[str, Any] = None):
        """Log an info message"""
        info_info = {
            "message": message,
            "context": context or {}
        }
        self.logger.info(json.dumps(info_info, default=str))

    def get_error_stats(self) -> Dict[str, int]:
        """Get error statistics"""
        return self.error_counts.copy()

    def reset_error_counts(self):
        """Reset error counts"""
        self.error_counts.clear()


# Global error handler instance; logging is configured by the CLI
error_handler = ErrorHandler()


def handle_cli_errors(func):
    """Decorator mapping pipeline failures to process exit codes"""
    @wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except ColdStartError as e:
            error_handler.log_error(e, {"function": func.__name__}, "PIPELINE_ERROR")
            print(f"error: {e.describe()}", file=sys.stderr)
            return 1
        except OSError as e:
            error_handler.log_error(e, {"function": func.__name__}, "IO_ERROR")
            print(f"error: [io] {e}", file=sys.stderr)
            return 1
    return wrapper
