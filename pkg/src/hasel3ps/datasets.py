"""CSV time-series files.

Files start with ``#`` comment lines carrying provenance (toolkit version,
config hash), then a header row and one row per sample. Header names may
carry a unit in brackets, e.g. ``tip_x[mm]``; values are converted to SI on
load. Floats are written with 17 significant digits so that a save/load
round trip is exact.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "ParseError",
    "MonotonicityError",
    "DatasetSchema",
    "TimeSeries",
    "SENSOR_SCHEMA",
    "load_dataset",
    "save_dataset",
    "format_float",
]

UNITS = {
    "s": 1.0, "ms": 1e-3, "us": 1e-6,
    "m": 1.0, "mm": 1e-3, "um": 1e-6,
    "V": 1.0, "kV": 1e3,
    "rad": 1.0,
}


class ParseError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class MonotonicityError(ValueError):
    def __init__(self, message: str, line: int, timestamp: float):
        super().__init__(f"line {line}: {message} (t = {timestamp!r})")
        self.line = line
        self.timestamp = timestamp


@dataclass(frozen=True)
class DatasetSchema:
    required: tuple[str, ...]
    optional: tuple[str, ...] = ()
    allow_extra: bool = False


SENSOR_SCHEMA = DatasetSchema(required=("t", "tip_x", "tip_y"),
                              optional=("tip_z", "u1", "u2", "u3"))


@dataclass
class TimeSeries:
    """Named columns over a strictly increasing time column ``t``."""

    columns: dict[str, np.ndarray]
    comments: list[str] = field(default_factory=list)

    def __post_init__(self):
        if "t" not in self.columns:
            raise ValueError("time series needs a 't' column")
        n = len(self.columns["t"])
        self.columns = {k: np.asarray(v, dtype=float) for k, v in self.columns.items()}
        for k, v in self.columns.items():
            if v.shape != (n,):
                raise ValueError(f"column {k!r} has shape {v.shape}, expected ({n},)")

    @property
    def t(self) -> np.ndarray:
        return self.columns["t"]

    def __len__(self) -> int:
        return self.t.size

    def __getitem__(self, name: str) -> np.ndarray:
        return self.columns[name]

    def __contains__(self, name: str) -> bool:
        return name in self.columns

    @property
    def names(self) -> list[str]:
        return list(self.columns)

    def gaps(self, factor: float = 1.5) -> np.ndarray:
        """Indices ``k`` where ``t[k+1] - t[k]`` exceeds ``factor`` times the median step."""
        if len(self) < 2:
            return np.array([], dtype=int)
        dt = np.diff(self.t)
        return np.flatnonzero(dt > factor * np.median(dt))


def format_float(v: float) -> str:
    """Shortest repr that round-trips exactly."""
    return repr(float(v))


def _split_unit(name: str) -> tuple[str, float]:
    name = name.strip()
    if name.endswith("]") and "[" in name:
        base, unit = name[:-1].split("[", 1)
        if unit not in UNITS:
            raise ParseError(f"unknown unit {unit!r} in column {name!r}", 1)
        return base.strip(), UNITS[unit]
    return name, 1.0


def load_dataset(path, schema: DatasetSchema = SENSOR_SCHEMA) -> TimeSeries:
    """Parse a CSV dataset and check it against ``schema``.

    Raises
    ------
    ParseError
        Malformed row or header, with the 1-based file line number.
    MonotonicityError
        Non-increasing timestamp, with the offending line and value.
    """
    path = Path(path)
    comments: list[str] = []
    rows: list[list[float]] = []
    header = None
    header_line = 0
    with path.open(newline="") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\r\n")
            if not line.strip():
                continue
            if line.startswith("#"):
                if header is None:
                    comments.append(line[1:].strip())
                continue
            fields_ = next(csv.reader([line]))
            if header is None:
                header = fields_
                header_line = lineno
                continue
            if len(fields_) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(fields_)}", lineno)
            try:
                vals = [float(f) for f in fields_]
            except ValueError as exc:
                raise ParseError(str(exc), lineno) from None
            if not all(math.isfinite(v) for v in vals):
                raise ParseError("non-finite value", lineno)
            rows.append((lineno, vals))
    if header is None:
        raise ParseError("missing header row")
    names, scale = zip(*(_split_unit(h) for h in header))
    if len(set(names)) != len(names):
        raise ParseError("duplicate column names", header_line)
    missing = [c for c in schema.required if c not in names]
    if missing:
        raise ParseError(f"missing required columns {missing}", header_line)
    extra = [c for c in names if c not in schema.required + schema.optional]
    if extra and not schema.allow_extra:
        raise ParseError(f"unexpected columns {extra}", header_line)
    data = np.array([v for _, v in rows], dtype=float).reshape(len(rows), len(names))
    data *= np.asarray(scale)
    ti = names.index("t")
    for k in range(1, len(rows)):
        if not data[k, ti] > data[k - 1, ti]:
            raise MonotonicityError("timestamps must be strictly increasing",
                                    rows[k][0], float(data[k, ti]))
    cols = {n: data[:, j].copy() for j, n in enumerate(names)}
    # keep 't' first
    cols = {"t": cols.pop("t"), **cols}
    return TimeSeries(cols, comments)


def save_dataset(path, series: TimeSeries, comments: list[str] | None = None) -> Path:
    """Write ``series`` as CSV; ``comments`` replace the series' own comment lines."""
    path = Path(path)
    lines = [f"# {c}" for c in (series.comments if comments is None else comments)]
    names = series.names
    lines.append(",".join(names))
    cols = [series.columns[n] for n in names]
    for k in range(len(series)):
        lines.append(",".join(format_float(c[k]) for c in cols))
    path.write_text("\n".join(lines) + "\n")
    return path
