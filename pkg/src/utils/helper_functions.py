import hashlib
import json
import multiprocessing
from pathlib import Path
from typing import Any, Optional

import numpy as np

import src.config as config
from src.utils.exceptions import IoError, ParseError


class HelperFunctions:
    # Digest helpers
    @staticmethod
    def file_digest(path) -> str:
        h = hashlib.sha256()
        with open(path, "rb") as f:
            for block in iter(lambda: f.read(1 << 20), b""):
                h.update(block)
        return h.hexdigest()

    # JSON helpers (deterministic output: fixed indent, insertion order, trailing newline)
    @staticmethod
    def _json_default(obj):
        if isinstance(obj, (np.integer,)):
            return int(obj)
        if isinstance(obj, (np.floating,)):
            return float(obj)
        if isinstance(obj, np.ndarray):
            return obj.tolist()
        if isinstance(obj, Path):
            return str(obj)
        raise TypeError(f"Object of type {type(obj).__name__} is not JSON serializable")

    @staticmethod
    def write_json(path, payload: Any):
        try:
            with open(path, "w", encoding="utf-8") as f:
                json.dump(payload, f, indent=2, default=HelperFunctions._json_default)
                f.write("\n")
        except OSError as e:
            raise IoError(f"Cannot write {path}: {e}") from e

    @staticmethod
    def read_json(path) -> Any:
        try:
            with open(path, "r", encoding="utf-8") as f:
                return json.load(f)
        except json.JSONDecodeError as e:
            raise ParseError(f"{path}: not valid JSON ({e})") from e
        except OSError as e:
            raise ParseError(f"Cannot read {path}: {e}") from e

    # Worker pool sizing
    @staticmethod
    def resolve_workers(threads: Optional[int] = None) -> int:
        """Explicit count wins; otherwise THREAD_COUNT, where 0 means all CPU threads."""
        if threads is None:
            threads = config.THREAD_COUNT
        if not config.PARALLEL_PROCESSING:
            return 1
        return threads if threads > 0 else multiprocessing.cpu_count()
