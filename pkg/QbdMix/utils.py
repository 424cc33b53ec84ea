import json
import logging
from logging import Logger
from pathlib import Path
from queue import SimpleQueue
from threading import Thread
from typing import Any, Optional, Union

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components


# ————————————————————————————————
# 1. LOGGING
# ————————————————————————————————
def setup_logger(level: str = "INFO") -> Logger:
    """
    Configure the QbdMix logger with timestamped output on stderr.
    Levels: DEBUG, INFO, WARNING, ERROR, CRITICAL
    """
    logger = logging.getLogger("QbdMix")
    logger.setLevel(getattr(logging, level.upper()))
    handler = logging.StreamHandler()
    formatter = logging.Formatter(
        "%(asctime)s | %(levelname)-8s | %(message)s",
        "%H:%M:%S"
    )
    handler.setFormatter(formatter)
    logger.handlers = [handler]
    return logger


# ————————————————————————————————
# 2. JSONL REPORT WRITER
# ————————————————————————————————
class ReportWriter:
    """Async JSONL appender. One daemon thread per file, guarded I/O."""

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)
        self.failures = 0
        self.queue: SimpleQueue = SimpleQueue()
        self.thread = Thread(target=self._run, daemon=True)
        self.thread.start()

    def _append(self, data: dict) -> None:
        line = json.dumps(to_jsonable(data))
        try:
            with open(self.path, "a", encoding="utf-8") as f:
                f.write(line + "\n")
        except OSError as e:
            self.failures += 1
            logging.getLogger("QbdMix").error(f"REPORT WRITE FAILED: {e}")

    def _run(self) -> None:
        while True:
            data = self.queue.get()
            if data is None:
                break
            self._append(data)

    def write(self, data: dict) -> None:
        self.queue.put(data)

    def stop(self) -> None:
        self.queue.put(None)
        self.thread.join()

    def __enter__(self) -> "ReportWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.stop()


def to_jsonable(obj: Any) -> Any:
    """Recursively convert numpy containers and scalars into JSON-native types."""
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        value = float(obj)
        return value if np.isfinite(value) else None
    return obj


# ————————————————————————————————
# 3. BLOCK LINEAR ALGEBRA
# ————————————————————————————————
def max_norm(a: Optional[np.ndarray]) -> float:
    """Largest absolute entry; 0 for empty or missing blocks."""
    if a is None or a.size == 0:
        return 0.0
    return float(np.max(np.abs(a)))


def spectral_radius(a: np.ndarray) -> float:
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(np.linalg.eigvals(a))))


def right_solve(x: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Return x @ inv(a) without forming the inverse."""
    return np.linalg.solve(a.T, x.T).T


def is_strongly_connected(p: np.ndarray) -> bool:
    """Strong connectivity of the directed graph of positive entries."""
    if p.shape[0] <= 1:
        return True
    graph = csr_matrix((p > 0).astype(np.int8))
    n_components, _ = connected_components(graph, directed=True, connection="strong")
    return n_components == 1
