import logging
from logging.handlers import RotatingFileHandler
import os
import sys
from datetime import datetime

import src.config as config

ROOT_LOGGER_NAME = "drive4d"


class AppLogger:
    """Centralized logger with stderr + optional rotating file output.

    Every module logger is a child of the ``drive4d`` logger, which owns the
    handlers. Children propagate to it, so the level can be changed for the
    whole engine at once (see ``set_level``).
    """

    _configured = False

    def __init__(self, name: str = "app", log_dir: str = None, level: int = None):
        self.name = name
        self.log_dir = config.LOG_DIR if log_dir is None else log_dir
        self.level = level if level is not None else logging.getLevelName(config.LOG_LEVEL.upper())
        self.logger = logging.getLogger(f"{ROOT_LOGGER_NAME}.{name}")
        self._setup_logger()

    def _setup_logger(self):
        """Configure the shared parent logger once (stderr + file handlers)."""
        if AppLogger._configured:
            return

        root = logging.getLogger(ROOT_LOGGER_NAME)

        # Avoid duplicate handlers if re-imported
        if root.hasHandlers():
            root.handlers.clear()

        root.setLevel(self.level)
        root.propagate = False

        # === Formatter ===
        formatter = logging.Formatter(
            fmt="%(asctime)s | %(levelname)s | %(name)s | %(message)s",
            datefmt="%Y-%m-%d %H:%M:%S"
        )

        # === File handler ===
        if self.log_dir:
            os.makedirs(self.log_dir, exist_ok=True)
            log_file = os.path.join(self.log_dir, f"{ROOT_LOGGER_NAME}_{datetime.now().strftime('%Y%m%d')}.log")
            file_handler = RotatingFileHandler(log_file, maxBytes=5*1024*1024, backupCount=5)  # 5 MB
            file_handler.setFormatter(formatter)
            root.addHandler(file_handler)

        # === Console handler (stderr, stdout is reserved for summaries) ===
        console_handler = logging.StreamHandler(sys.stderr)
        console_handler.setFormatter(formatter)
        root.addHandler(console_handler)

        AppLogger._configured = True

    @staticmethod
    def set_level(level: int):
        """Change verbosity for every engine logger."""
        logging.getLogger(ROOT_LOGGER_NAME).setLevel(level)

    # === Shorthand helper methods ===
    def info(self, msg: str, *args, **kwargs):
        self.logger.info(msg, *args, **kwargs)

    def warning(self, msg: str, *args, **kwargs):
        self.logger.warning(msg, *args, **kwargs)

    def error(self, msg: str, *args, **kwargs):
        self.logger.error(msg, *args, **kwargs)

    def debug(self, msg: str, *args, **kwargs):
        self.logger.debug(msg, *args, **kwargs)

    def critical(self, msg: str, *args, **kwargs):
        self.logger.critical(msg, *args, **kwargs)

    def exception(self, msg: str, *args, **kwargs):
        """Log an exception traceback (use inside except blocks)."""
        self.logger.exception(msg, *args, **kwargs)
