"""Scenario ladder and flood-hazard datacube.

Peaks at the anchor station are converted to a return period, which is mapped
back to a peak at every other boundary station, so that all inflows of one
scenario share the same return period. The base event hydrographs are scaled
to those peaks and each scenario is run through the solver; the per-cell
maximum depths form the datacube layers.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, FloodTwinError, GridMismatchError
from .hydrograph import Hydrograph
from .raster import GridSpec, Raster, binarize_depth, read_ascii_grid, write_ascii_grid

log = logging.getLogger(__name__)

DEFAULT_LADDER = tuple(float(q) for q in range(5, 191, 5))
MANIFEST_SCHEMA = "floodtwin.datacube/1"


class RatingTable:
    """Per-station return periods (years) and peak discharges (m3/s)."""

    def __init__(self, stations: dict):
        self._tables = {}
        for name, pairs in stations.items():
            pairs = sorted((float(t), float(q)) for t, q in pairs)
            t = np.array([p[0] for p in pairs])
            q = np.array([p[1] for p in pairs])
            if len(t) < 2:
                raise DataError(f"rating table for {name!r} needs at least two return periods")
            if np.any(t <= 0) or np.any(np.diff(t) <= 0):
                raise DataError(f"rating table for {name!r}: return periods must be positive and distinct")
            if np.any(np.diff(q) <= 0):
                raise DataError(f"rating table for {name!r}: discharge must increase with return period")
            self._tables[name] = (t, q)

    def __contains__(self, station):
        return station in self._tables

    @property
    def stations(self) -> list[str]:
        return list(self._tables)

    def knots(self, station: str) -> tuple[np.ndarray, np.ndarray]:
        try:
            return self._tables[station]
        except KeyError:
            raise DataError(f"no rating table for station {station!r}") from None


def read_rating_table(path) -> RatingTable:
    """CSV with columns ``station,return_period_years,peak_discharge_m3s``."""
    stations: dict[str, list] = {}
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        need = {"station", "return_period_years", "peak_discharge_m3s"}
        if reader.fieldnames is None or not need <= set(reader.fieldnames):
            raise DataError(f"{path}: expected columns {','.join(sorted(need))}")
        for lineno, row in enumerate(reader, start=2):
            try:
                stations.setdefault(row["station"].strip(), []).append(
                    (float(row["return_period_years"]), float(row["peak_discharge_m3s"])))
            except (TypeError, ValueError):
                raise DataError(f"{path}:{lineno}: non-numeric value") from None
    return RatingTable(stations)


def _segment(x: float, knots: np.ndarray) -> int:
    # end segments are reused for extrapolation
    i = int(np.searchsorted(knots, x, side="right")) - 1
    return min(max(i, 0), len(knots) - 2)


def return_period_of_peak(q: float, table: RatingTable, station: str) -> float:
    """Return period (years) of peak ``q``: linear interpolation of log(T) against q."""
    if not q > 0:
        raise DataError(f"peak discharge must be positive, got {q}")
    t, qs = table.knots(station)
    logt = np.log(t)
    i = _segment(q, qs)
    if q == qs[i]:
        return float(t[i])
    if q == qs[i + 1]:
        return float(t[i + 1])
    frac = (q - qs[i]) / (qs[i + 1] - qs[i])
    return math.exp(logt[i] + frac * (logt[i + 1] - logt[i]))


def peak_for_return_period(period: float, table: RatingTable, station: str) -> float:
    """Inverse of :func:`return_period_of_peak` on the same table.

    Raises ``DataError`` if extrapolation below the table gives a non-positive peak.
    """
    if not period > 0:
        raise DataError(f"return period must be positive, got {period}")
    t, qs = table.knots(station)
    logt = np.log(t)
    x = math.log(period)
    i = _segment(x, logt)
    if period == t[i]:
        return float(qs[i])
    if period == t[i + 1]:
        return float(qs[i + 1])
    frac = (x - logt[i]) / (logt[i + 1] - logt[i])
    q = float(qs[i] + frac * (qs[i + 1] - qs[i]))
    if q <= 0:
        raise DataError(f"{station}: return period {period:.4g} y lies below the extrapolable range")
    return q


def scale_hydrograph(base: Hydrograph, target_peak: float) -> Hydrograph:
    if not target_peak > 0:
        raise DataError(f"target peak must be positive, got {target_peak}")
    peak = base.peak
    if not peak > 0:
        raise DataError(f"base hydrograph {base.station!r} has no positive peak")
    if target_peak == peak:
        return base
    return base.scaled(target_peak / peak)


@dataclass(frozen=True)
class Scenario:
    index: int  # 1-based, S1 is the smallest anchor peak
    anchor_peak: float
    return_period: float
    peaks: dict
    hydrographs: dict = field(repr=False)
    floored: tuple = ()


@dataclass(frozen=True)
class ScenarioSet:
    base_event: dict = field(repr=False)
    anchor: str = ""
    scenarios: tuple = ()

    @property
    def peaks(self) -> list[float]:
        return [s.anchor_peak for s in self.scenarios]

    def __len__(self):
        return len(self.scenarios)

    def __getitem__(self, i) -> Scenario:
        return self.scenarios[i]


def build_scenario_set(base_event: dict, table: RatingTable, anchor: str,
                       anchor_peaks=DEFAULT_LADDER, min_peak_fraction: float = 0.01) -> ScenarioSet:
    """Scale every station's base hydrograph to the peak sharing the anchor's return period.

    When extrapolating below a station's table would give a peak under
    ``min_peak_fraction`` times its smallest tabulated peak, the peak is floored
    there and the station is listed in ``Scenario.floored``.
    """
    if anchor not in base_event:
        raise DataError(f"anchor station {anchor!r} has no base hydrograph")
    for station in base_event:
        if station not in table:
            raise DataError(f"no rating table for boundary station {station!r}")
    peaks = [float(q) for q in anchor_peaks]
    if not peaks:
        raise DataError("scenario ladder is empty")
    if any(q <= 0 for q in peaks):
        raise DataError("scenario peaks must be positive")
    if any(b <= a for a, b in zip(peaks, peaks[1:])):
        raise DataError("scenario peaks must be strictly increasing")

    scenarios = []
    for k, qa in enumerate(peaks, start=1):
        period = return_period_of_peak(qa, table, anchor)
        targets, floored = {}, []
        for station in base_event:
            if station == anchor:
                targets[station] = qa
                continue
            floor = min_peak_fraction * float(table.knots(station)[1][0])
            try:
                q = peak_for_return_period(period, table, station)
            except DataError:
                q = -math.inf
            if q < floor:
                q = floor
                floored.append(station)
            targets[station] = q
        hydros = {s: scale_hydrograph(base_event[s], targets[s]) for s in base_event}
        scenarios.append(Scenario(k, qa, period, targets, hydros, tuple(floored)))
    return ScenarioSet(dict(base_event), anchor, tuple(scenarios))


# --- Datacube -------------------------------------------------------------------


def _hash_update(h, obj):
    if isinstance(obj, np.ndarray):
        h.update(str(obj.dtype).encode())
        h.update(str(obj.shape).encode())
        h.update(np.ascontiguousarray(obj).tobytes())
    elif isinstance(obj, dict):
        for key in sorted(obj, key=str):
            h.update(repr(key).encode())
            _hash_update(h, obj[key])
    elif isinstance(obj, (list, tuple)):
        h.update(b"[")
        for item in obj:
            _hash_update(h, item)
        h.update(b"]")
    else:
        h.update(repr(obj).encode())


def fingerprint(*objs) -> str:
    h = hashlib.sha256()
    for obj in objs:
        _hash_update(h, obj)
    return h.hexdigest()


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def domain_fingerprint(domain) -> str:
    parts = [domain.dem.spec.to_dict(), domain.dem.values, repr(domain.n_fp), domain.g]
    if domain.region_mask is not None:
        parts.append(domain.region_mask.values)
    ch = domain.channel
    if ch is not None:
        parts += [ch.cells, ch.width, ch.bed, ch.bank, ch.n_ch]
    return fingerprint(*parts)


def scenario_fingerprint(scenario: Scenario, domain_hash: str, setup: dict) -> str:
    hydros = {s: [h.start.isoformat(), h.offsets, h.discharge] for s, h in scenario.hydrographs.items()}
    return fingerprint(domain_hash, setup, scenario.anchor_peak, hydros)


@dataclass
class HazardDatacube:
    layers: list
    manifest: dict

    def __post_init__(self):
        rows = self.manifest.get("layers", [])
        if len(rows) != len(self.layers):
            raise DataError(f"datacube has {len(self.layers)} layers but {len(rows)} manifest rows")
        if self.layers:
            spec = self.layers[0].spec
            for lyr in self.layers[1:]:
                if lyr.spec != spec:
                    raise GridMismatchError("datacube layers are not aligned")
        peaks = self.peaks
        if any(b <= a for a, b in zip(peaks, peaks[1:])):
            raise DataError("datacube anchor peaks must increase with layer index")

    def __len__(self):
        return len(self.layers)

    @property
    def spec(self) -> GridSpec:
        return self.layers[0].spec

    @property
    def peaks(self) -> list[float]:
        return [float(r["anchor_peak_m3s"]) for r in self.manifest["layers"]]

    @property
    def gauge_names(self) -> list[str]:
        rows = self.manifest["layers"]
        return sorted(rows[0].get("gauges", {})) if rows else []

    def gauge_peak_levels(self, name: str) -> np.ndarray:
        return np.array([r["gauges"][name]["peak_level_m"] for r in self.manifest["layers"]])

    def gauge_peak_discharges(self, name: str) -> np.ndarray:
        return np.array([r["gauges"][name]["peak_discharge_m3s"] for r in self.manifest["layers"]])

    def stack(self) -> np.ndarray:
        """(layers, rows, cols) depths with nodata set to 0."""
        return np.stack([lyr.filled(0.0) for lyr in self.layers])

    def valid(self) -> np.ndarray:
        v = self.layers[0].valid.copy()
        for lyr in self.layers[1:]:
            v &= lyr.valid
        return v


def monotonicity_violations(layers: list, tol: float = 0.0) -> int:
    """Count (cell, consecutive-layer) pairs where max depth decreases by more than ``tol``."""
    if len(layers) < 2:
        return 0
    st = np.stack([lyr.filled(0.0) for lyr in layers])
    return int(np.count_nonzero(np.diff(st, axis=0) < -tol))


def _run_scenario(args):
    from .solver import BoundaryForcing, Inflow, Outlet, simulate

    scenario, domain, inflow_locations, outlets, gauges, duration, sim_config = args
    inflows = [Inflow(inflow_locations[s], h) for s, h in scenario.hydrographs.items()]
    forcing = BoundaryForcing(inflows, [o if isinstance(o, Outlet) else Outlet(o) for o in outlets])
    return simulate(domain, forcing, duration, gauges, sim_config)


def build_datacube(scenarios: ScenarioSet, domain, inflow_locations: dict, outlets, gauges: dict,
                   duration: float, sim_config=None, workers: int = 1,
                   wet_threshold: float = 0.10) -> HazardDatacube:
    """Run one simulation per scenario and assemble the ordered datacube.

    Simulations are independent; with ``workers > 1`` they run in separate
    processes and are reassembled in ladder order. A failing scenario marks the
    datacube incomplete (``manifest["complete"] is False``) and is listed in
    ``manifest["failed"]``; its layer is omitted.
    """
    from .solver import SimConfig

    sim_config = sim_config or SimConfig()
    missing = set(scenarios.base_event) - set(inflow_locations)
    if missing:
        raise DataError(f"no inflow location for stations {sorted(missing)}")
    dhash, setup = _setup_fingerprint(domain, inflow_locations, outlets, gauges, duration, sim_config,
                                      wet_threshold)
    jobs = [(s, domain, inflow_locations, list(outlets), dict(gauges), duration, sim_config)
            for s in scenarios.scenarios]

    results = []
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_run_scenario, j) for j in jobs]
            for fut in futures:
                try:
                    results.append(fut.result())
                except FloodTwinError as exc:
                    results.append(exc)
    else:
        for j in jobs:
            try:
                results.append(_run_scenario(j))
            except FloodTwinError as exc:
                results.append(exc)

    layers, rows, failed = [], [], []
    cell_area = domain.spec.cellsize ** 2
    for scenario, res in zip(scenarios.scenarios, results):
        if isinstance(res, Exception):
            log.error("scenario S%d (peak %g) failed: %s", scenario.index, scenario.anchor_peak, res)
            failed.append({"index": scenario.index, "anchor_peak_m3s": scenario.anchor_peak, "error": str(res)})
            continue
        wet = binarize_depth(res.max_depth, wet_threshold)
        layers.append(res.max_depth)
        rows.append({
            "index": scenario.index,
            "anchor_peak_m3s": scenario.anchor_peak,
            "return_period_years": scenario.return_period,
            "station_peaks_m3s": scenario.peaks,
            "floored_stations": list(scenario.floored),
            "scenario_hash": scenario_fingerprint(scenario, dhash, setup),
            "wet_area_m2": wet.wet_count * cell_area,
            "mass_relative_error": float(res.mass.relative_error),
            "mass_ok": bool(res.mass_ok),
            "gauges": {name: {"peak_level_m": g.peak_level, "peak_discharge_m3s": g.peak_discharge}
                       for name, g in res.gauges.items()},
        })
    manifest = {
        "schema": MANIFEST_SCHEMA,
        "anchor_station": scenarios.anchor,
        "grid": domain.spec.to_dict(),
        "domain_hash": dhash,
        "wet_threshold_m": wet_threshold,
        "complete": not failed,
        "failed": failed,
        "monotonicity_violations": monotonicity_violations(layers),
        "layers": rows,
    }
    manifest["config_hash"] = fingerprint([r["scenario_hash"] for r in rows], failed)
    return HazardDatacube(layers, manifest)


def _setup_fingerprint(domain, inflow_locations, outlets, gauges, duration, sim_config, wet_threshold):
    setup = {
        "inflows": {k: repr(v) for k, v in inflow_locations.items()},
        "outlets": [repr(o) for o in outlets],
        "gauges": {k: repr(v) for k, v in dict(gauges).items()},
        "duration": duration,
        "sim": repr(sim_config),
        "wet_threshold": wet_threshold,
    }
    return domain_fingerprint(domain), setup


def datacube_config_hash(scenarios: ScenarioSet, domain, inflow_locations: dict, outlets, gauges: dict,
                         duration: float, sim_config=None, wet_threshold: float = 0.10) -> str:
    """The ``config_hash`` a complete build of these inputs would record, without simulating."""
    from .solver import SimConfig

    dhash, setup = _setup_fingerprint(domain, inflow_locations, outlets, gauges, duration,
                                      sim_config or SimConfig(), wet_threshold)
    return fingerprint([scenario_fingerprint(s, dhash, setup) for s in scenarios.scenarios], [])


def layer_filename(index: int) -> str:
    return f"layer_{index:03d}.asc"


def save_datacube(cube: HazardDatacube, directory) -> None:
    """Write ``layer_NNN.asc`` files and ``manifest.json`` (with per-file sha256)."""
    os.makedirs(directory, exist_ok=True)
    for row, lyr in zip(cube.manifest["layers"], cube.layers):
        name = layer_filename(row["index"])
        path = os.path.join(directory, name)
        write_ascii_grid(lyr, path)
        row["file"] = name
        row["sha256"] = file_sha256(path)
    text = json.dumps(cube.manifest, indent=2, sort_keys=True) + "\n"
    tmp = os.path.join(directory, "manifest.json.tmp")
    with open(tmp, "w") as f:
        f.write(text)
    os.replace(tmp, os.path.join(directory, "manifest.json"))


def read_manifest(directory) -> dict:
    path = os.path.join(directory, "manifest.json")
    try:
        with open(path) as f:
            manifest = json.load(f)
    except FileNotFoundError:
        raise DataError(f"no datacube manifest at {path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from None
    if manifest.get("schema") != MANIFEST_SCHEMA:
        raise DataError(f"{path}: unsupported manifest schema {manifest.get('schema')!r}")
    return manifest


def load_datacube(directory, verify: bool = True) -> HazardDatacube:
    """Load a datacube directory; with ``verify`` every layer's sha256 is checked."""
    manifest = read_manifest(directory)
    layers = []
    for row in manifest["layers"]:
        path = os.path.join(directory, row["file"])
        if not os.path.exists(path):
            raise DataError(f"datacube layer {row['file']} is missing")
        if verify and file_sha256(path) != row.get("sha256"):
            raise DataError(f"datacube layer {row['file']} failed its integrity check")
        layers.append(read_ascii_grid(path))
    grid = GridSpec.from_dict(manifest["grid"])
    if layers and layers[0].spec != grid:
        raise GridMismatchError("datacube layers do not match the manifest grid")
    return HazardDatacube(layers, manifest)
