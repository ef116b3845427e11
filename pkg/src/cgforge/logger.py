"""
Logging for cgforge.

Two streams:
- Operator log: stdlib logging, one JSON object per record on stderr. The
  level comes from $CGFORGE_LOG (default WARNING); --verbose lowers it to
  INFO. Extra fields passed via `extra=` are merged into the object.
- Run log: `<out>/events.jsonl`, one EventRecord per pipeline stage and
  training epoch. Records carry the run's manifest hash instead of a
  wall-clock time so that identical runs write identical files.
"""

import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

LOG_ENV = "CGFORGE_LOG"
DEFAULT_LEVEL = "WARNING"
EVENTS_FILE = "events.jsonl"

# Attributes every LogRecord has; anything else came in through `extra=`.
_RESERVED = set(vars(logging.LogRecord("", 0, "", 0, "", None, None))) | {"message", "asctime"}


class JsonFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        payload = {
            "ts": datetime.fromtimestamp(record.created, timezone.utc).isoformat(),
            "level": record.levelname,
            "logger": record.name,
            "msg": record.getMessage(),
        }
        for key, value in vars(record).items():
            if key not in _RESERVED and not key.startswith("_"):
                payload[key] = value
        if record.exc_info:
            payload["exc"] = self.formatException(record.exc_info)
        return json.dumps(payload, default=str)


def setup_logging(verbose: bool = False, stream=None) -> logging.Logger:
    """Configure the `cgforge` logger; safe to call more than once."""
    level_name = "INFO" if verbose else os.environ.get(LOG_ENV, DEFAULT_LEVEL).upper()
    level = logging.getLevelName(level_name)
    if not isinstance(level, int):
        level = logging.WARNING

    root = logging.getLogger("cgforge")
    for handler in list(root.handlers):
        root.removeHandler(handler)
    handler = logging.StreamHandler(stream or sys.stderr)
    handler.setFormatter(JsonFormatter())
    root.addHandler(handler)
    root.setLevel(level)
    root.propagate = False
    return root


@dataclass
class EventRecord:
    """A single run-log entry."""
    stage: str  # pretrain, finetune, eval, ...
    manifest: str | None = None
    epoch: int | None = None
    mean_loss: float | None = None
    metrics: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), separators=(",", ":"), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "EventRecord":
        data = json.loads(line)
        return cls(**data)


class EventLog:
    """
    Appends EventRecords to `<out>/events.jsonl`. A None path disables it.

    One log per run: creating it empties any file left by an earlier run
    into the same directory.
    """

    def __init__(self, path: Path | None, manifest: str | None = None):
        self.path = path
        self.manifest = manifest
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text("")

    def log(self, stage: str, epoch: int | None = None, mean_loss: float | None = None, **metrics):
        if self.path is None:
            return
        record = EventRecord(stage=stage, manifest=self.manifest, epoch=epoch, mean_loss=mean_loss, metrics=metrics)
        with open(self.path, "a") as f:
            f.write(record.to_json() + "\n")


def iter_events(log_file: Path):
    """Iterate over all logged events."""
    if not log_file.exists():
        return

    with open(log_file) as f:
        for line in f:
            line = line.strip()
            if line:
                yield EventRecord.from_json(line)
