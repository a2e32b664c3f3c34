"""CSV result files with a '#'-prefixed metadata block."""
import csv
import hashlib
import json
import logging
import math
from collections.abc import Iterable, Mapping, Sequence
from datetime import datetime
from pathlib import Path
from typing import Any

import numpy as np
import pytz

import qmonitor

logger = logging.getLogger(__name__)


def format_value(value: Any) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return "nan" if math.isnan(value) else repr(value)
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return str(value)


def config_hash(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def run_metadata(command: str, source: str, **extra: Any) -> dict[str, Any]:
    return {"command": command, "config_hash": config_hash(source), **extra}


def chunked(items: Sequence[Any], size: int) -> Iterable[Sequence[Any]]:
    for start in range(0, len(items), size):
        yield items[start : start + size]


class ResultWriter:
    """Row-by-row CSV writer; every row is flushed so interrupted runs keep their rows."""

    def __init__(self, path: Path, columns: Sequence[str], metadata: Mapping[str, Any] | None = None):
        self.path = Path(path)
        self.columns = list(columns)
        self.metadata = {"version": qmonitor.__version__, **(metadata or {})}
        self.rows_written = 0
        self._file = None
        self._writer = None

    def open(self) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._file = open(self.path, "w", newline="")
        for key, value in self.metadata.items():
            self._file.write(f"# {key}: {format_value(value)}\n")
        self._writer = csv.writer(self._file, lineterminator="\n")
        self._writer.writerow(self.columns)
        self._file.flush()
        logger.info(f"Writing {self.path}")

    def close(self) -> None:
        if self._file:
            self._file.close()
            self._file = None
            logger.info(f"Wrote {self.rows_written} rows to {self.path}")

    def write_row(self, values: Sequence[Any] | Mapping[str, Any]) -> None:
        if isinstance(values, Mapping):
            values = [values.get(column, math.nan) for column in self.columns]
        if len(values) != len(self.columns):
            raise ValueError(f"row has {len(values)} values for {len(self.columns)} columns")
        self._writer.writerow([format_value(v) for v in values])
        self._file.flush()
        self.rows_written += 1

    def write_rows(self, rows: Iterable[Sequence[Any] | Mapping[str, Any]]) -> None:
        for row in rows:
            self.write_row(row)

    def __enter__(self) -> "ResultWriter":
        self.open()
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def read_metadata(path: Path) -> dict[str, str]:
    metadata = {}
    with open(path) as f:
        for line in f:
            if not line.startswith("# "):
                break
            key, _, value = line[2:].rstrip("\n").partition(": ")
            metadata[key] = value
    return metadata


def write_timing(out_path: Path, started_at: datetime, wall_seconds: float, **extra: Any) -> Path:
    """Timing lives next to the CSV so the CSV itself stays reproducible."""
    timing_path = Path(f"{out_path}.timing.json")
    record = {
        "started_at": started_at.astimezone(pytz.UTC).isoformat(),
        "wall_seconds": round(wall_seconds, 3),
        **extra,
    }
    timing_path.write_text(json.dumps(record, indent=2) + "\n")
    return timing_path


def utc_now() -> datetime:
    return datetime.now(pytz.UTC)
