"""Ensemble streamflow forecasts and their mapping onto datacube layers."""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from datetime import date, datetime, timedelta

import numpy as np

from .errors import DataError

CONTROL_IDS = ("0", "control", "cf")


@dataclass(frozen=True)
class ForecastEnsemble:
    """Daily-mean discharge per member and lead day (lead day 1 is ``values[:, 0]``)."""

    issue_date: date
    members: tuple
    values: np.ndarray = field(repr=False)
    control: np.ndarray | None = field(default=None, repr=False)
    station: str = ""

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] != len(self.members):
            raise DataError("forecast values must be a members x lead-days matrix")
        if v.shape[0] == 0 or v.shape[1] == 0:
            raise DataError("forecast ensemble is empty")
        if np.any(v < 0) or not np.all(np.isfinite(v)):
            raise DataError("forecast discharges must be finite and non-negative")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "members", tuple(self.members))
        if self.control is not None:
            c = np.array(self.control, dtype=np.float64)
            if c.shape != (v.shape[1],):
                raise DataError("control forecast must cover the same lead days")
            c.setflags(write=False)
            object.__setattr__(self, "control", c)

    @property
    def n_members(self) -> int:
        return self.values.shape[0]

    @property
    def lead_days(self) -> int:
        return self.values.shape[1]

    def day_start(self, lead_day: int) -> datetime:
        """Start of the 24-hour window that lead day ``lead_day`` averages over."""
        return datetime.combine(self.issue_date, datetime.min.time()) + timedelta(days=lead_day - 1)

    def lead_day_of(self, when: datetime) -> int:
        """Lead day whose 24-hour window contains ``when`` (may be out of range)."""
        delta = when - datetime.combine(self.issue_date, datetime.min.time())
        return int(delta // timedelta(days=1)) + 1

    def member_matrix(self, include_control: bool = False) -> tuple[tuple, np.ndarray]:
        if include_control and self.control is not None:
            return ("control",) + self.members, np.vstack([self.control, self.values])
        return self.members, self.values


def _is_control(member: str) -> bool:
    return member.strip().lower() in CONTROL_IDS


def load_forecast_ensemble(path) -> ForecastEnsemble:
    """Read ``issue_date,member,lead_day,discharge_m3s`` rows (optional ``station`` column).

    Member ``0`` (or ``control``/``cf``) is the control forecast and is kept apart.
    """
    path = os.fspath(path)
    cells: dict[tuple[str, int], float] = {}
    issue = None
    station = ""
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        need = {"issue_date", "member", "lead_day", "discharge_m3s"}
        if reader.fieldnames is None or not need <= set(reader.fieldnames):
            raise DataError(f"{path}: expected columns issue_date,member,lead_day,discharge_m3s")
        for lineno, row in enumerate(reader, start=2):
            try:
                d = date.fromisoformat(row["issue_date"].strip())
                member = row["member"].strip()
                lead = int(row["lead_day"])
                q = float(row["discharge_m3s"])
            except (TypeError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            if issue is None:
                issue = d
            elif d != issue:
                raise DataError(f"{path}:{lineno}: file mixes issue dates {issue} and {d}")
            if q < 0 or not np.isfinite(q):
                raise DataError(f"{path}:{lineno}: negative or non-finite discharge {q}")
            if lead < 1:
                raise DataError(f"{path}:{lineno}: lead days start at 1")
            key = ("control" if _is_control(member) else member, lead)
            if key in cells:
                raise DataError(f"{path}:{lineno}: duplicate row for member {member}, lead day {lead}")
            cells[key] = q
            station = row.get("station", station) or station
    if issue is None:
        raise DataError(f"{path}: no forecast rows")

    members = sorted({m for m, _ in cells if m != "control"}, key=_member_key)
    horizon = max(lead for _, lead in cells)
    everyone = members + (["control"] if any(m == "control" for m, _ in cells) else [])
    gaps = [(m, d) for m in everyone for d in range(1, horizon + 1) if (m, d) not in cells]
    if gaps:
        shown = ", ".join(f"{m}/day {d}" for m, d in gaps[:10])
        more = f" (+{len(gaps) - 10} more)" if len(gaps) > 10 else ""
        raise DataError(f"{path}: missing member/lead-day cells: {shown}{more}")
    values = np.array([[cells[(m, d)] for d in range(1, horizon + 1)] for m in members]).reshape(
        len(members), horizon)
    control = None
    if "control" in everyone:
        control = np.array([cells[("control", d)] for d in range(1, horizon + 1)])
    if not members:
        raise DataError(f"{path}: only a control forecast is present")
    return ForecastEnsemble(issue, tuple(members), values, control, station.strip())


def _member_key(m: str):
    return (0, int(m), m) if m.isdigit() else (1, 0, m)


def write_forecast_ensemble(fc: ForecastEnsemble, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["issue_date", "member", "lead_day", "discharge_m3s"])
        rows = list(zip(fc.members, fc.values.tolist()))
        if fc.control is not None:
            rows = [("0", fc.control.tolist())] + rows
        for member, series in rows:
            for lead, q in enumerate(series, start=1):
                w.writerow([fc.issue_date.isoformat(), member, lead, repr(q)])


def match_to_layer(q: float, peaks) -> int:
    """0-based index of the ladder peak nearest ``q``; ties go to the lower layer,
    discharges beyond the ladder clamp to its ends."""
    return int(match_layers(np.array([q], dtype=np.float64), peaks)[0])


def match_layers(q: np.ndarray, peaks) -> np.ndarray:
    """Vectorised :func:`match_to_layer`."""
    p = np.asarray(peaks, dtype=np.float64)
    if p.size == 0:
        raise DataError("datacube manifest has no layers")
    if np.any(np.diff(p) <= 0):
        raise DataError("datacube peaks must be strictly increasing")
    q = np.asarray(q, dtype=np.float64)
    hi = np.clip(np.searchsorted(p, q, side="left"), 1, p.size - 1) if p.size > 1 else np.zeros(q.shape, int)
    if p.size == 1:
        return hi
    lo = hi - 1
    take_hi = (p[hi] - q) < (q - p[lo])
    return np.where(take_hi, hi, lo)


@dataclass(frozen=True)
class ParticleSet:
    members: tuple
    layers: np.ndarray
    discharge: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64)
        n = len(self.members)
        if not (len(self.layers) == len(self.discharge) == w.size == n) or n == 0:
            raise DataError("particle arrays must be non-empty and equally long")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise DataError("particle weights must be non-negative and sum to 1")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "layers", np.asarray(self.layers, dtype=np.int64))
        object.__setattr__(self, "discharge", np.asarray(self.discharge, dtype=np.float64))

    def __len__(self):
        return len(self.members)

    def reweighted(self, weights) -> ParticleSet:
        return ParticleSet(self.members, self.layers, self.discharge, weights)


def uniform_weights(n: int) -> np.ndarray:
    return np.full(n, 1.0 / n)


def ensemble_to_particles(fc: ForecastEnsemble, lead_day: int, peaks, include_control: bool = False) -> ParticleSet:
    """One particle per member for ``lead_day`` (1-based), uniformly weighted."""
    if not 1 <= lead_day <= fc.lead_days:
        raise DataError(f"lead day {lead_day} outside 1..{fc.lead_days}")
    members, values = fc.member_matrix(include_control)
    q = values[:, lead_day - 1]
    return ParticleSet(members, match_layers(q, peaks), q, uniform_weights(len(members)))
