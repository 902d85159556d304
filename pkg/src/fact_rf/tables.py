"""CSV ingestion and deterministic table output."""

from __future__ import annotations

import csv
import hashlib
import json
from typing import Optional, Sequence

import numpy as np

from .errors import InvalidInput
from .forest import Dataset


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def header_comment(config: dict) -> str:
    return f"# fact-rf config_hash={config_hash(config)}\n"


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, np.integer):
        return str(int(v))
    return v


def write_table(path, rows: Sequence[dict], columns: Sequence[str], config: Optional[dict] = None) -> None:
    """Write rows as CSV, prefixed by a provenance comment when ``config`` is given."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if config is not None:
            fh.write(header_comment(config))
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])


def read_table(path) -> list[dict]:
    """Read a CSV written by :func:`write_table`, skipping comment lines."""
    with open(path, newline="", encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def read_csv_columns(path) -> tuple[list[str], list[list[str]]]:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = [r for r in csv.reader(ln for ln in fh if not ln.startswith("#")) if r]
    except OSError as e:
        raise InvalidInput(f"cannot read {path}: {e.strerror}") from None
    if not rows:
        raise InvalidInput(f"{path} is empty")
    header = [h.strip() for h in rows[0]]
    if len(set(header)) != len(header):
        raise InvalidInput(f"{path} has duplicate column names")
    for k, r in enumerate(rows[1:], start=2):
        if len(r) != len(header):
            raise InvalidInput(f"{path} line {k}: expected {len(header)} fields, got {len(r)}")
    return header, rows[1:]


def load_dataset(path, response_column: str, feature_columns: Optional[Sequence[str]] = None,
                 exclude: Sequence[str] = ()) -> tuple[Dataset, dict]:
    """Dataset from a headered CSV with min-max scaled features.

    Returns the dataset and a dict of the non-numeric columns that were
    left out (e.g. a date column listed in ``exclude``).
    """
    header, body = read_csv_columns(path)
    if response_column not in header:
        raise InvalidInput(f"response column {response_column!r} not found in {path}")
    if feature_columns is None:
        feature_columns = [h for h in header if h != response_column and h not in exclude]
    for c in feature_columns:
        if c not in header:
            raise InvalidInput(f"feature column {c!r} not found in {path}")
        if c == response_column:
            raise InvalidInput(f"column {c!r} cannot be both feature and response")
    if not feature_columns:
        raise InvalidInput("no feature columns selected")
    if len(body) < 2:
        raise InvalidInput(f"{path} has {len(body)} data rows; need at least 2")

    def column(name):
        k = header.index(name)
        try:
            return np.array([float(r[k]) for r in body])
        except ValueError:
            raise InvalidInput(f"column {name!r} has a non-numeric value") from None

    X = np.column_stack([column(c) for c in feature_columns])
    y = column(response_column)
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise InvalidInput("features and response must be finite")
    extra = {c: [r[header.index(c)] for r in body] for c in exclude if c in header}
    return Dataset.from_raw(X, y, list(feature_columns)), extra
