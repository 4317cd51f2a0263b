"""Diagnostic logging for the traffic identification engine."""

import logging
import sys
from typing import Dict, Optional

from config import config


class EngineLogger:
    """Diagnostic logger for the engine. Writes to stderr so stdout stays pipeable."""

    def __init__(self, name: str = "trafficrag"):
        self.logger = logging.getLogger(name)
        self.logger.setLevel(getattr(logging, config.LOG_LEVEL.upper(), logging.INFO))

        if not self.logger.handlers:
            self._setup_handlers()

    def _setup_handlers(self):
        """Set up logging handlers."""
        formatter = logging.Formatter(
            '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
        )

        console_handler = logging.StreamHandler(sys.stderr)
        console_handler.setFormatter(formatter)
        self.logger.addHandler(console_handler)

        if config.ENABLE_FILE_LOGGING:
            try:
                file_handler = logging.FileHandler(config.LOG_FILE)
                file_handler.setFormatter(formatter)
                self.logger.addHandler(file_handler)
            except OSError as e:
                self.logger.warning(f"Could not create file handler: {e}")

    def set_level(self, level: str):
        self.logger.setLevel(getattr(logging, level.upper(), logging.INFO))

    def log_dataset_loaded(self, path: str, count: int, randomized: bool):
        self.logger.info(
            f"Loaded {count} flows from {path}" + (" (strong features randomized)" if randomized else "")
        )

    def log_database_built(self, entry_count: int, label_count: int, stats_count: int):
        self.logger.info(
            f"Traffic database built - {entry_count} entries, {label_count} classes, {stats_count} stat groups"
        )

    def log_degenerate_group(self, class_label: str, level: str, protocol: str, view: str):
        """Singleton groups have a zero pruning threshold."""
        self.logger.warning(
            f"Singleton group {class_label}/{level}:{protocol}/{view} - threshold is 0, "
            "only exact matches survive pruning"
        )

    def log_retrieval(self, flow_id: str, retrieved: Dict[str, int], kept: int):
        counts = ", ".join(f"{view}={n}" for view, n in retrieved.items())
        self.logger.debug(f"Flow {flow_id} - retrieved {counts} - kept {kept}")

    def log_backend_call(self, backend: str, success: bool, attempt: int = 1,
                         status: Optional[int] = None):
        outcome = "SUCCESS" if success else "FAILED"
        status_msg = f" status={status}" if status is not None else ""
        level = logging.DEBUG if success else logging.WARNING
        self.logger.log(level, f"Backend {backend} - attempt {attempt} - {outcome}{status_msg}")

    def log_parse_failure(self, flow_id: str, reason: str):
        self.logger.warning(f"Flow {flow_id} - verdict could not be parsed: {reason}")

    def log_split(self, seed: int, db_count: int, test_count: int):
        self.logger.info(f"Seed {seed} - split {db_count} database / {test_count} test flows")

    def log_error(self, error: Exception, context: str = ""):
        """Log errors with context."""
        self.logger.error(f"Error in {context}: {error}", exc_info=config.DEBUG_MODE)

    def debug(self, message: str):
        self.logger.debug(message)

    def info(self, message: str):
        self.logger.info(message)

    def warning(self, message: str):
        self.logger.warning(message)

    def error(self, message: str):
        self.logger.error(message)


# Global logger instance
logger = EngineLogger()
