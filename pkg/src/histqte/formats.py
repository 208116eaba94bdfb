"""File formats: bin spec JSON, observation CSV, histogram JSON Lines, reports."""

from __future__ import annotations

import csv
import io
import json
import sys
from collections.abc import Iterable, Iterator
from contextlib import contextmanager
from typing import IO, Optional

import numpy as np

from .histogram import ARMS, BinSpec, UnitHistogram


class FormatError(ValueError):
    pass


@contextmanager
def open_in(path: Optional[str]):
    if path in (None, "-"):
        yield sys.stdin
    else:
        with open(path, newline="") as f:
            yield f


@contextmanager
def open_out(path: Optional[str]):
    if path in (None, "-"):
        yield sys.stdout
        sys.stdout.flush()
    else:
        with open(path, "w", newline="") as f:
            yield f


def read_binspec(path: str) -> BinSpec:
    with open_in(path) as f:
        try:
            return BinSpec.from_dict(json.load(f))
        except json.JSONDecodeError as e:
            raise FormatError(f"{path}: not a JSON bin spec ({e})") from None


def dumps_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n"


def write_json(obj, path: Optional[str]) -> None:
    with open_out(path) as f:
        f.write(dumps_json(obj))


def iter_observations(stream: IO[str]) -> Iterator[tuple[str, str, float]]:
    """Stream (unit_id, arm, value) rows from a ``unit_id,arm,value`` CSV."""
    reader = csv.reader(stream)
    header = next(reader, None)
    if header is None:
        return
    if [h.strip() for h in header] != ["unit_id", "arm", "value"]:
        raise FormatError(f"expected header unit_id,arm,value, got {','.join(header)}")
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != 3:
            raise FormatError(f"line {lineno}: expected 3 fields, got {len(row)}")
        unit, arm, value = (x.strip() for x in row)
        if arm not in ARMS:
            raise FormatError(f"line {lineno}: unknown arm {arm!r}")
        try:
            v = float(value)
        except ValueError:
            raise FormatError(f"line {lineno}: bad value {value!r}") from None
        yield unit, arm, v


def iter_histograms(stream: IO[str]) -> Iterator[UnitHistogram]:
    for lineno, line in enumerate(stream, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            yield UnitHistogram.from_dict(json.loads(line))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise FormatError(f"line {lineno}: bad histogram record ({e})") from None


def write_histograms(histograms: Iterable[UnitHistogram], stream: IO[str]) -> int:
    n = 0
    for h in histograms:
        stream.write(json.dumps(h.to_dict(), sort_keys=True) + "\n")
        n += 1
    return n


def read_values(path: str) -> np.ndarray:
    """Historical metric values: a CSV with a ``value`` column, or one number per line."""
    with open_in(path) as f:
        text = f.read()
    rows = list(csv.reader(io.StringIO(text)))
    rows = [r for r in rows if r]
    if not rows:
        return np.empty(0)
    header = [h.strip() for h in rows[0]]
    if "value" in header:
        col = header.index("value")
        body = rows[1:]
    else:
        col, body = 0, rows
    try:
        return np.array([float(r[col]) for r in body])
    except (ValueError, IndexError) as e:
        raise FormatError(f"{path}: bad historical value ({e})") from None


def write_values(values, path: Optional[str]) -> None:
    with open_out(path) as f:
        f.write("value\n")
        for v in values:
            f.write(repr(float(v)) + "\n")


def write_csv(rows: Iterable[dict], path: str, columns: Optional[list] = None) -> None:
    rows = list(rows)
    if columns is None:
        columns = list(rows[0]) if rows else []
    with open_out(path) as f:
        w = csv.DictWriter(f, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in columns})


def sniff_format(stream: IO[str]) -> tuple[str, IO[str]]:
    """Return ('histograms'|'observations'|'empty', stream positioned at start)."""
    text = stream.read()
    first = next((ln for ln in text.splitlines() if ln.strip()), "")
    kind = "empty" if not first else ("histograms" if first.lstrip().startswith("{") else "observations")
    return kind, io.StringIO(text)
