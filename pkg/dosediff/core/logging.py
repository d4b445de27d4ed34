import csv
import logging
import os
import sys
from datetime import datetime
from pathlib import Path
from typing import List, Optional, Union

import orjson
from structlog import configure, make_filtering_bound_logger, processors, stdlib

from dosediff.core.config import settings


def _log_dir() -> str:
    os.makedirs(settings.LOG_DIR, exist_ok=True)
    return settings.LOG_DIR


class StageTrace:
    """Append-only JSON lines, one per completed pipeline stage."""

    FILENAME = "stage_trace.jsonl"

    def __init__(self, path: Optional[Union[str, Path]] = None):
        self.path = Path(path) if path is not None else Path(_log_dir()) / self.FILENAME

    def record(self, run_id: str, stage: str, elapsed_ms: float, **fields) -> None:
        entry = {"time": datetime.now().isoformat(), "run_id": run_id, "stage": stage, "elapsed_ms": elapsed_ms}
        entry.update(fields)
        try:
            with open(self.path, "ab") as f:
                f.write(orjson.dumps(entry, option=orjson.OPT_SERIALIZE_NUMPY | orjson.OPT_NON_STR_KEYS) + b"\n")
        except OSError as e:
            logging.getLogger(__name__).warning("stage trace write failed: %s", e)

    def records(self, run_id: Optional[str] = None) -> List[dict]:
        if not self.path.exists():
            return []
        entries = [orjson.loads(line) for line in self.path.read_bytes().splitlines() if line.strip()]
        return [e for e in entries if run_id is None or e["run_id"] == run_id]


class TrainingLogWriter:
    """Append-only CSV of per-step training losses."""

    FIELDS = ("step", "loss_simple", "loss_vlb", "total", "wall_ms")

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if not self.path.exists() or self.path.stat().st_size == 0:
            with open(self.path, "w", newline="", encoding="utf-8") as f:
                csv.writer(f).writerow(self.FIELDS)

    def append(self, step: int, loss_simple: float, loss_vlb: float, total: float, wall_ms: float) -> None:
        with open(self.path, "a", newline="", encoding="utf-8") as f:
            csv.writer(f).writerow([step, repr(loss_simple), repr(loss_vlb), repr(total), f"{wall_ms:.3f}"])


def setup_logging(log_level: Optional[str] = None):
    log_level = log_level or settings.LOG_LEVEL
    configure(
        processors=[
            processors.add_log_level,
            processors.TimeStamper(fmt="iso"),
            processors.JSONRenderer(),
        ],
        logger_factory=stdlib.LoggerFactory(),
        wrapper_class=make_filtering_bound_logger(logging.getLevelName(log_level)),
    )

    root_logger = logging.getLogger()
    root_logger.setLevel(log_level)
    root_logger.handlers = []

    # Console goes to stderr so stdout stays clean for command output
    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.setFormatter(logging.Formatter("%(message)s"))
    root_logger.addHandler(console_handler)

    file_handler = logging.FileHandler(os.path.join(_log_dir(), "app.log"), encoding="utf-8")
    file_handler.setFormatter(logging.Formatter("%(message)s"))
    root_logger.addHandler(file_handler)
