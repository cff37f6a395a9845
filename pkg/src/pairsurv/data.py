"""Surveillance datasets: one record per sampled individual.

CSV layout is ``id,time,<test name>...`` with test cells ``1``, ``0`` or
``NA`` and times in days.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .charmap import MISSING_TOKENS, PCR, SEROLOGY
from .errors import InvalidInputError, SchemaError

# stream selections: which test columns are kept when fitting or simulating
STREAM_ALIASES = {
    "paired": "paired", "both": "paired",
    "pcr": "pathogen", "pathogen": "pathogen", "pathogen-only": "pathogen",
    "serology": "antibody", "antibody": "antibody", "antibody-only": "antibody",
}
STREAM_TESTS = {"paired": (0, 1), "pathogen": (0,), "antibody": (1,)}


def normalize_streams(streams: str) -> str:
    try:
        return STREAM_ALIASES[str(streams).lower()]
    except KeyError:
        raise InvalidInputError(
            f"unknown data stream {streams!r}; expected paired, pcr or serology") from None


@dataclass(frozen=True)
class SurveillanceRecord:
    id: str
    time: float
    outcome: tuple  # entries 1, 0 or None


@dataclass(frozen=True, init=False, eq=False)
class SurveillanceDataset:
    """Columnar store of records; ``results`` uses -1 for a missing entry."""

    tests: tuple
    ids: tuple
    times: np.ndarray
    results: np.ndarray

    def __init__(self, tests: Sequence[str], ids: Sequence, times, results):
        tests = tuple(tests)
        times = np.array(times, dtype=float).reshape(-1)
        results = np.array(results, dtype=np.int8).reshape(times.size, len(tests))
        if len(ids) != times.size:
            raise InvalidInputError("need one id per record")
        if not np.all(np.isfinite(times)):
            raise InvalidInputError("record times must be finite")
        if not np.all(np.isin(results, (-1, 0, 1))):
            raise InvalidInputError("results must be 1, 0 or -1 (missing)")
        times.setflags(write=False)
        results.setflags(write=False)
        object.__setattr__(self, "tests", tests)
        object.__setattr__(self, "ids", tuple(str(i) for i in ids))
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "results", results)

    @classmethod
    def empty(cls, tests=(PCR, SEROLOGY)):
        return cls(tests, [], np.empty(0), np.empty((0, len(tests))))

    @classmethod
    def from_records(cls, records: Iterable[SurveillanceRecord], tests=(PCR, SEROLOGY)):
        records = list(records)
        rows = [[-1 if v is None else int(v) for v in rec.outcome] for rec in records]
        if any(len(r) != len(tests) for r in rows):
            raise InvalidInputError("every record needs one entry per test")
        return cls(tests, [r.id for r in records], [r.time for r in records],
                   np.array(rows, dtype=np.int8).reshape(len(rows), len(tests)))

    def __len__(self):
        return self.times.size

    def __eq__(self, other):
        if not isinstance(other, SurveillanceDataset):
            return NotImplemented
        return (self.tests == other.tests and self.ids == other.ids
                and np.array_equal(self.times, other.times)
                and np.array_equal(self.results, other.results))

    __hash__ = None

    @property
    def num_tests(self):
        return len(self.tests)

    @property
    def records(self):
        return [SurveillanceRecord(i, float(t), tuple(None if v < 0 else int(v) for v in row))
                for i, t, row in zip(self.ids, self.times, self.results)]

    def subset(self, index) -> "SurveillanceDataset":
        index = np.asarray(index)
        ids = [self.ids[k] for k in np.arange(len(self))[index]]
        return SurveillanceDataset(self.tests, ids, self.times[index], self.results[index])

    def concat(self, other: "SurveillanceDataset") -> "SurveillanceDataset":
        if other.tests != self.tests:
            raise InvalidInputError("datasets record different tests")
        return SurveillanceDataset(self.tests, self.ids + other.ids,
                                   np.concatenate([self.times, other.times]),
                                   np.concatenate([self.results, other.results]))

    def mask_tests(self, keep: Sequence[int]) -> "SurveillanceDataset":
        """Set every test not listed in ``keep`` to missing."""
        results = self.results.copy()
        drop = [j for j in range(self.num_tests) if j not in set(keep)]
        results[:, drop] = -1
        return SurveillanceDataset(self.tests, self.ids, self.times, results)

    def select_streams(self, streams: str) -> "SurveillanceDataset":
        return self.mask_tests(STREAM_TESTS[normalize_streams(streams)])

    def to_csv(self, path=None) -> Optional[str]:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(("id", "time") + self.tests)
        for rid, t, row in zip(self.ids, self.times, self.results):
            cells = ["NA" if v < 0 else str(int(v)) for v in row]
            writer.writerow([rid, format(float(t), ".17g")] + cells)
        text = buf.getvalue()
        if path is None:
            return text
        with open(path, "w", newline="", encoding="utf-8") as fh:
            fh.write(text)
        return None


def read_csv(path_or_text, *, from_text: bool = False) -> SurveillanceDataset:
    """Parse the ingestion CSV; errors name the offending row number."""
    if from_text:
        handle = io.StringIO(path_or_text)
    else:
        handle = open(path_or_text, newline="", encoding="utf-8")
    with handle:
        reader = csv.reader(handle)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError("dataset file is empty") from None
        if len(header) < 3 or header[0] != "id" or header[1] != "time":
            raise SchemaError(f"header must be 'id,time,<test>...', got {','.join(header)!r}")
        tests = tuple(header[2:])
        ids, times, rows = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise SchemaError(f"row {lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                t = float(row[1])
            except ValueError:
                raise SchemaError(f"row {lineno}: time {row[1]!r} is not a number") from None
            if not math.isfinite(t):
                raise SchemaError(f"row {lineno}: time must be finite")
            cells = []
            for name, cell in zip(tests, row[2:]):
                cell = cell.strip()
                if cell in MISSING_TOKENS:
                    cells.append(-1)
                elif cell in ("0", "1"):
                    cells.append(int(cell))
                else:
                    raise SchemaError(f"row {lineno}: {name} cell {cell!r} is not 1, 0 or NA")
            ids.append(row[0].strip())
            times.append(t)
            rows.append(cells)
    return SurveillanceDataset(tests, ids, times,
                               np.array(rows, dtype=np.int8).reshape(len(rows), len(tests)))
