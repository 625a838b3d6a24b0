"""Sediment charcoal records, lake networks and the shared regional time grid.

Ages are calendar years before present (1950 CE) and increase down-core, so a
sample interval runs from its (younger) top age to its (older) bottom age.
Negative ages are post-1950 and are kept as is.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

CHARCOAL_HEADER = ("lake_id", "top_age", "bottom_age", "count")
LAKES_HEADER = ("lake_id", "x_km", "y_km")

# tolerance for "contiguous" when comparing floating ages read from text
_AGE_TOL = 1e-9


class RecordError(ValueError):
    """Raised for malformed or inconsistent charcoal input."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class SampleInterval:
    top_age: float
    bottom_age: float
    count: int

    def __post_init__(self):
        if not self.bottom_age > self.top_age:
            raise RecordError(
                f"bottom_age ({self.bottom_age}) must exceed top_age ({self.top_age})"
            )
        if self.count < 0 or int(self.count) != self.count:
            raise RecordError(f"count must be a non-negative integer, got {self.count}")

    @property
    def length(self) -> float:
        return self.bottom_age - self.top_age

    @property
    def midpoint(self) -> float:
        return 0.5 * (self.top_age + self.bottom_age)


def _frozen(a) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class SedimentRecord:
    """Charcoal counts for one lake on its own (irregular) sample intervals.

    Intervals are stored column-wise, sorted by top age.  ``allow_gaps``
    relaxes the contiguity check; the domain length is then the summed
    interval length rather than the span.
    """

    lake_id: str
    top_ages: np.ndarray
    bottom_ages: np.ndarray
    counts: np.ndarray
    location: tuple[float, float] = (0.0, 0.0)
    allow_gaps: bool = False

    def __post_init__(self):
        top = np.asarray(self.top_ages, dtype=float)
        bottom = np.asarray(self.bottom_ages, dtype=float)
        counts = np.asarray(self.counts)
        if not (top.shape == bottom.shape == counts.shape) or top.ndim != 1:
            raise RecordError("top_ages, bottom_ages and counts must be 1-D and equal length")
        if not np.all(np.isfinite(top)) or not np.all(np.isfinite(bottom)):
            raise RecordError(f"{self.lake_id}: non-finite age")
        if np.any(bottom <= top):
            i = int(np.flatnonzero(bottom <= top)[0])
            raise RecordError(f"{self.lake_id}: interval {i} has bottom_age <= top_age")
        if counts.size and (np.any(counts < 0) or np.any(np.floor(counts) != counts)):
            raise RecordError(f"{self.lake_id}: counts must be non-negative integers")
        order = np.argsort(top, kind="stable")
        top, bottom, counts = top[order], bottom[order], counts[order].astype(np.int64)
        if top.size > 1:
            gap = top[1:] - bottom[:-1]
            if np.any(gap < -_AGE_TOL):
                i = int(np.flatnonzero(gap < -_AGE_TOL)[0])
                raise RecordError(f"{self.lake_id}: intervals {i} and {i + 1} overlap")
            if not self.allow_gaps and np.any(gap > _AGE_TOL):
                i = int(np.flatnonzero(gap > _AGE_TOL)[0])
                raise RecordError(
                    f"{self.lake_id}: gap between intervals {i} and {i + 1} "
                    f"({bottom[i]} to {top[i + 1]}); set allow_gaps to accept it"
                )
        object.__setattr__(self, "top_ages", _frozen(top))
        object.__setattr__(self, "bottom_ages", _frozen(bottom))
        object.__setattr__(self, "counts", _frozen(counts))
        object.__setattr__(self, "location", (float(self.location[0]), float(self.location[1])))

    @classmethod
    def from_intervals(cls, lake_id: str, intervals: Iterable[SampleInterval], **kwargs):
        intervals = list(intervals)
        return cls(
            lake_id,
            [iv.top_age for iv in intervals],
            [iv.bottom_age for iv in intervals],
            [iv.count for iv in intervals],
            **kwargs,
        )

    def __len__(self) -> int:
        return int(self.counts.size)

    @property
    def intervals(self) -> list[SampleInterval]:
        return [
            SampleInterval(float(t), float(b), int(c))
            for t, b, c in zip(self.top_ages, self.bottom_ages, self.counts)
        ]

    @property
    def lengths(self) -> np.ndarray:
        return self.bottom_ages - self.top_ages

    @property
    def midpoints(self) -> np.ndarray:
        return 0.5 * (self.top_ages + self.bottom_ages)

    @property
    def start(self) -> float:
        return float(self.top_ages[0])

    @property
    def end(self) -> float:
        return float(self.bottom_ages[-1])

    @property
    def domain_length(self) -> float:
        """|D_j|: span of the record, or summed lengths when gaps are allowed."""
        if len(self) == 0:
            return 0.0
        if self.allow_gaps:
            return float(self.lengths.sum())
        return self.end - self.start

    def subset(self, index) -> "SedimentRecord":
        index = np.asarray(index)
        return SedimentRecord(
            self.lake_id,
            self.top_ages[index],
            self.bottom_ages[index],
            self.counts[index],
            location=self.location,
            allow_gaps=True,
        )

    def with_counts(self, counts) -> "SedimentRecord":
        return SedimentRecord(
            self.lake_id, self.top_ages, self.bottom_ages, counts,
            location=self.location, allow_gaps=self.allow_gaps,
        )


def _parse_float(text: str, name: str, line: int) -> float:
    try:
        value = float(text)
    except ValueError:
        raise RecordError(f"cannot parse {name} {text!r}", line) from None
    if not math.isfinite(value):
        raise RecordError(f"{name} must be finite", line)
    return value


def _parse_count(text: str, line: int) -> int:
    try:
        value = float(text)
    except ValueError:
        raise RecordError(f"cannot parse count {text!r}", line) from None
    if value < 0:
        raise RecordError(f"negative count {text}", line)
    if value != int(value):
        raise RecordError(f"count must be an integer, got {text}", line)
    return int(value)


def read_charcoal_csv(path, lake_id: str | None = None, allow_gaps: bool = False,
                      locations: dict | None = None) -> dict[str, SedimentRecord]:
    """Read a charcoal CSV holding one or several lakes.

    Returns records keyed by lake id, in order of first appearance.  When
    ``lake_id`` is given only that lake is kept.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"charcoal file not found: {path}")
    rows: dict[str, list[tuple[float, float, int]]] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise RecordError("empty file", 1) from None
        header = [h.strip() for h in header]
        if tuple(header) != CHARCOAL_HEADER:
            raise RecordError(f"expected header {','.join(CHARCOAL_HEADER)}, got {','.join(header)}", 1)
        for line, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise RecordError(f"expected 4 fields, got {len(row)}", line)
            lid = row[0].strip()
            if not lid:
                raise RecordError("empty lake_id", line)
            top = _parse_float(row[1], "top_age", line)
            bottom = _parse_float(row[2], "bottom_age", line)
            if bottom <= top:
                raise RecordError(f"bottom_age {bottom} <= top_age {top}", line)
            rows.setdefault(lid, []).append((top, bottom, _parse_count(row[3], line)))
    if lake_id is not None:
        if lake_id not in rows:
            raise RecordError(f"lake {lake_id!r} not present in {path}")
        rows = {lake_id: rows[lake_id]}
    locations = locations or {}
    out = {}
    for lid, vals in rows.items():
        t, b, c = zip(*vals)
        out[lid] = SedimentRecord(lid, t, b, c, location=locations.get(lid, (0.0, 0.0)),
                                  allow_gaps=allow_gaps)
    return out


def ingest_record(path, lake_id: str, allow_gaps: bool = False,
                  location: tuple[float, float] = (0.0, 0.0)) -> SedimentRecord:
    """Load and validate the record for ``lake_id`` from a charcoal CSV."""
    rec = read_charcoal_csv(path, lake_id=lake_id, allow_gaps=allow_gaps)[lake_id]
    if location != (0.0, 0.0):
        rec = SedimentRecord(rec.lake_id, rec.top_ages, rec.bottom_ages, rec.counts,
                             location=location, allow_gaps=allow_gaps)
    return rec


def read_lake_locations(path) -> dict[str, tuple[float, float]]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"lake metadata file not found: {path}")
    out = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader, [])]
        if tuple(header) != LAKES_HEADER:
            raise RecordError(f"expected header {','.join(LAKES_HEADER)}", 1)
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise RecordError(f"expected 3 fields, got {len(row)}", line)
            out[row[0].strip()] = (_parse_float(row[1], "x_km", line),
                                   _parse_float(row[2], "y_km", line))
    return out


def write_charcoal_csv(path, records: Sequence[SedimentRecord]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CHARCOAL_HEADER)
        for rec in records:
            for t, b, c in zip(rec.top_ages, rec.bottom_ages, rec.counts):
                w.writerow([rec.lake_id, repr(float(t)), repr(float(b)), int(c)])


def write_lake_locations(path, records: Sequence[SedimentRecord]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LAKES_HEADER)
        for rec in records:
            w.writerow([rec.lake_id, repr(rec.location[0]), repr(rec.location[1])])


# ---------------------------------------------------------------------------
# regional grid


@dataclass(frozen=True)
class CommonSupport:
    """Equal-length regional grid; cell l covers [start + l*L, start + (l+1)*L)."""

    start: float
    interval_length: float
    n_star: int

    def __post_init__(self):
        if not self.interval_length > 0:
            raise ValueError("interval_length must be positive")
        if self.n_star < 1:
            raise ValueError("n_star must be >= 1")

    @property
    def edges(self) -> np.ndarray:
        return self.start + self.interval_length * np.arange(self.n_star + 1)

    @property
    def tops(self) -> np.ndarray:
        return self.edges[:-1]

    @property
    def bottoms(self) -> np.ndarray:
        return self.edges[1:]

    @property
    def midpoints(self) -> np.ndarray:
        return self.tops + 0.5 * self.interval_length

    @property
    def end(self) -> float:
        return self.start + self.n_star * self.interval_length

    @property
    def span(self) -> float:
        return self.n_star * self.interval_length


def default_common_interval(records: Sequence[SedimentRecord]) -> float:
    """Median sample resolution over all lakes."""
    lengths = np.concatenate([r.lengths for r in records])
    return float(np.median(lengths))


def build_common_support(records: Sequence[SedimentRecord],
                         interval_length: float | None = None) -> CommonSupport:
    """Grid anchored at the youngest top age that covers every record."""
    records = list(records)
    if not records or all(len(r) == 0 for r in records):
        raise ValueError("need at least one non-empty record")
    if interval_length is None:
        interval_length = default_common_interval(records)
    if not interval_length > 0:
        raise ValueError(f"interval_length must be positive, got {interval_length}")
    start = min(r.start for r in records if len(r))
    end = max(r.end for r in records if len(r))
    n_star = math.ceil((end - start) / interval_length - 1e-12)
    return CommonSupport(float(start), float(interval_length), max(int(n_star), 1))


@dataclass(frozen=True, eq=False)
class AggregationMatrix:
    """Overlap lengths |tau_{j,i} ∩ tau*_l| (rows: lake intervals, cols: grid cells)."""

    entries: np.ndarray
    lake_id: str = ""

    @property
    def shape(self):
        return self.entries.shape


def build_aggregation_matrix(record: SedimentRecord, support: CommonSupport) -> AggregationMatrix:
    top, bottom = record.top_ages, record.bottom_ages
    tol = 1e-9 * max(1.0, abs(support.end), abs(support.start))
    if len(record) and (top[0] < support.start - tol or bottom[-1] > support.end + tol):
        raise ValueError(
            f"{record.lake_id}: record [{top[0]}, {bottom[-1]}] extends outside the "
            f"common support [{support.start}, {support.end}]"
        )
    edges = support.edges
    lo = np.maximum(top[:, None], edges[None, :-1])
    hi = np.minimum(bottom[:, None], edges[None, 1:])
    A = np.clip(hi - lo, 0.0, None)
    # snap tiny rounding residue so rows sum to the interval length
    resid = record.lengths - A.sum(axis=1)
    if A.size:
        j = np.argmax(A, axis=1)
        A[np.arange(A.shape[0]), j] += resid
    A.setflags(write=False)
    return AggregationMatrix(A, record.lake_id)


def cells_covered(records: Sequence[SedimentRecord], support: CommonSupport) -> np.ndarray:
    """Number of lake records overlapping each grid cell."""
    edges = support.edges
    n = np.zeros(support.n_star, dtype=int)
    for rec in records:
        if len(rec) == 0:
            continue
        lo = np.maximum(rec.top_ages[:, None], edges[None, :-1])
        hi = np.minimum(rec.bottom_ages[:, None], edges[None, 1:])
        n += np.any(hi - lo > 0, axis=0)
    return n
