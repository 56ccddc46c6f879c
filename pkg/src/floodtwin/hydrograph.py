"""Discharge time series at a boundary station."""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from datetime import datetime, timedelta

import numpy as np

from .errors import DataError


def parse_timestamp(text: str) -> datetime:
    text = text.strip()
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    try:
        ts = datetime.fromisoformat(text)
    except ValueError:
        raise DataError(f"invalid ISO-8601 timestamp {text!r}") from None
    # naive UTC throughout
    if ts.tzinfo is not None:
        ts = ts.replace(tzinfo=None) - ts.utcoffset()
    return ts


@dataclass(frozen=True)
class Hydrograph:
    """Discharge (m3/s) at strictly increasing timestamps.

    ``offsets`` are seconds since ``start``; interpolation is linear between knots.
    """

    start: datetime
    offsets: np.ndarray = field(repr=False)
    discharge: np.ndarray = field(repr=False)
    station: str = ""

    def __post_init__(self):
        t = np.asarray(self.offsets, dtype=np.float64).copy()
        q = np.asarray(self.discharge, dtype=np.float64).copy()
        if t.ndim != 1 or t.shape != q.shape or t.size < 1:
            raise DataError("hydrograph needs matching 1-D time and discharge arrays")
        if np.any(np.diff(t) <= 0):
            raise DataError(f"hydrograph {self.station!r}: timestamps must be strictly increasing")
        if np.any(q < 0) or not np.all(np.isfinite(q)):
            raise DataError(f"hydrograph {self.station!r}: discharge must be finite and >= 0")
        t.setflags(write=False)
        q.setflags(write=False)
        object.__setattr__(self, "offsets", t)
        object.__setattr__(self, "discharge", q)

    @classmethod
    def from_times(cls, times: list[datetime], discharge, station: str = "") -> Hydrograph:
        start = times[0]
        offsets = [(t - start).total_seconds() for t in times]
        return cls(start, np.array(offsets), np.asarray(discharge, dtype=np.float64), station)

    @property
    def peak(self) -> float:
        return float(self.discharge.max())

    @property
    def times(self) -> list[datetime]:
        return [self.start + timedelta(seconds=float(s)) for s in self.offsets]

    @property
    def span(self) -> tuple[float, float]:
        return float(self.offsets[0]), float(self.offsets[-1])

    def at(self, seconds) -> np.ndarray | float:
        """Discharge at ``seconds`` after ``start``; outside the span raises."""
        s = np.asarray(seconds, dtype=np.float64)
        lo, hi = self.span
        if np.any(s < lo) or np.any(s > hi):
            raise DataError(f"hydrograph {self.station!r}: time {seconds} s outside span [{lo}, {hi}]")
        out = np.interp(s, self.offsets, self.discharge)
        return float(out) if out.ndim == 0 else out

    def scaled(self, factor: float) -> Hydrograph:
        return Hydrograph(self.start, self.offsets, self.discharge * factor, self.station)


def read_hydrograph_csv(path, station: str = "") -> Hydrograph:
    """CSV with header ``timestamp,discharge_m3s``."""
    path = os.fspath(path)
    times, values = [], []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or not {"timestamp", "discharge_m3s"} <= set(reader.fieldnames):
            raise DataError(f"{path}: expected columns timestamp,discharge_m3s")
        for lineno, row in enumerate(reader, start=2):
            try:
                times.append(parse_timestamp(row["timestamp"]))
                values.append(float(row["discharge_m3s"]))
            except (DataError, ValueError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
    if not times:
        raise DataError(f"{path}: no data rows")
    return Hydrograph.from_times(times, values, station or os.path.splitext(os.path.basename(path))[0])


def write_hydrograph_csv(hydrograph: Hydrograph, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["timestamp", "discharge_m3s"])
        for t, q in zip(hydrograph.times, hydrograph.discharge.tolist()):
            w.writerow([t.isoformat(), repr(q)])
