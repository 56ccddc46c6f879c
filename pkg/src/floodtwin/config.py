"""JSON run configuration and domain description.

Relative paths are resolved against the directory of the file that names them.
A run manifest written by the CLI embeds its resolved configuration, so it can
be passed back as ``--config`` to repeat the run.
"""
from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from datetime import date

import numpy as np

from .assimilation import PFConfig
from .calibration import DEFAULT_RANGES, ParameterSample, RegionParameters, apply_sample
from .errors import DataError, UsageError
from .hydrograph import read_hydrograph_csv
from .raster import read_ascii_grid, require_aligned
from .scenario import DEFAULT_LADDER, fingerprint, read_rating_table
from .solver import ChannelNetwork, ModelDomain, Outlet, SimConfig
from .twin import TwinSpec

PATH_KEYS = ("domain", "datacube", "forecasts", "observations", "gauges", "output_dir")


def _read_json(path) -> dict:
    try:
        with open(path) as f:
            data = json.load(f)
    except FileNotFoundError:
        raise DataError(f"configuration file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise DataError(f"{path}: expected a JSON object")
    return data


def _resolve(base: str, value):
    if value is None or value == "":
        return None
    return os.path.normpath(os.path.join(base, os.path.expanduser(str(value))))


# --- domain ---------------------------------------------------------------------


@dataclass
class DomainSetup:
    """Everything needed to run the solver for the base event."""

    domain: ModelDomain
    base_event: dict  # station -> Hydrograph
    inflow_locations: dict  # station -> channel index or (row, col)
    outlets: list
    gauges: dict  # name -> channel index or (row, col)
    files: dict = field(default_factory=dict)  # role -> absolute path


def _location(entry: dict, what: str):
    if "channel_index" in entry:
        return int(entry["channel_index"])
    if "cell" in entry:
        cell = entry["cell"]
        if len(cell) != 2:
            raise DataError(f"{what}: cell must be [row, col]")
        return (int(cell[0]), int(cell[1]))
    raise DataError(f"{what}: give either channel_index or cell")


def read_channel_csv(path, n_ch: float = 0.035) -> ChannelNetwork:
    """Ordered channel cells from ``row,col,width_m,bed_elev_m,bank_elev_m`` (optional ``n_ch``)."""
    rows = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        need = {"row", "col", "width_m", "bed_elev_m", "bank_elev_m"}
        if reader.fieldnames is None or not need <= set(reader.fieldnames):
            raise DataError(f"{path}: expected columns row,col,width_m,bed_elev_m,bank_elev_m")
        for lineno, row in enumerate(reader, start=2):
            try:
                rows.append((int(row["row"]), int(row["col"]), float(row["width_m"]),
                             float(row["bed_elev_m"]), float(row["bank_elev_m"]),
                             float(row["n_ch"]) if row.get("n_ch") else n_ch))
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise DataError(f"{path}: channel has no cells")
    a = np.array(rows)
    return ChannelNetwork(a[:, :2].astype(np.int64), a[:, 2], a[:, 3], a[:, 4], a[:, 5])


def _parameter_sample(params: dict) -> ParameterSample | None:
    """Depth law and roughness as a one-off sample, or None when the depth law is absent."""
    regions = params.get("regions")
    table = {int(k): v for k, v in regions.items()} if regions else {0: params}
    if not all("r_ch" in p and "p_ch" in p for p in table.values()):
        return None
    out = {}
    for label, p in table.items():
        try:
            out[label] = RegionParameters(float(p["r_ch"]), float(p["p_ch"]), float(p["n_ch"]), float(p["n_fp"]))
        except KeyError as exc:
            raise DataError(f"region {label}: missing parameter {exc}") from None
    return ParameterSample(0, out)


def load_domain(path) -> DomainSetup:
    """Read a domain JSON: DEM, optional region mask, channel CSV, parameters and boundaries."""
    path = os.path.abspath(path)
    base = os.path.dirname(path)
    spec = _read_json(path)
    files = {}
    for key in ("dem", "channel"):
        if not spec.get(key):
            raise DataError(f"{path}: missing {key!r}")
    files["dem"] = _resolve(base, spec["dem"])
    dem = read_ascii_grid(files["dem"])
    mask = None
    if spec.get("region_mask"):
        files["region_mask"] = _resolve(base, spec["region_mask"])
        mask = read_ascii_grid(files["region_mask"])
        require_aligned(dem.spec, mask.spec)
    params = dict(spec.get("parameters", {}))
    files["channel"] = _resolve(base, spec["channel"])
    channel = read_channel_csv(files["channel"], float(params.get("n_ch", 0.035)))
    domain = ModelDomain(dem, channel, float(params.get("n_fp", 0.06)), mask)
    sample = _parameter_sample(params)
    if sample is not None:
        domain = apply_sample(domain, sample)
    elif params.get("regions"):
        domain = ModelDomain(dem, channel, {int(k): float(v["n_fp"]) for k, v in params["regions"].items()}, mask)

    base_event, inflow_locations = {}, {}
    for i, entry in enumerate(spec.get("inflows", [])):
        station = entry.get("station")
        if not station or not entry.get("hydrograph"):
            raise DataError(f"{path}: inflow {i} needs station and hydrograph")
        if station in base_event:
            raise DataError(f"{path}: station {station!r} has two inflows")
        hpath = _resolve(base, entry["hydrograph"])
        files[f"hydrograph:{station}"] = hpath
        base_event[station] = read_hydrograph_csv(hpath, station)
        inflow_locations[station] = _location(entry, f"inflow {station}")
    if not base_event:
        raise DataError(f"{path}: at least one inflow is required")
    outlets = [Outlet(_location(o, f"outlet {i}"), o.get("slope")) for i, o in enumerate(spec.get("outlets", []))]
    gauges = {}
    for i, g in enumerate(spec.get("gauges", [])):
        name = g.get("name")
        if not name:
            raise DataError(f"{path}: gauge {i} has no name")
        gauges[name] = _location(g, f"gauge {name}")
    return DomainSetup(domain, base_event, inflow_locations, outlets, gauges, files)


# --- run configuration ------------------------------------------------------------


@dataclass
class RunConfig:
    """Resolved run configuration.

    ``data`` holds the JSON with every path made absolute; ``output_dir`` is
    kept apart so that moving a run's output does not change its hash.
    """

    data: dict
    output_dir: str
    source: str = ""

    def __post_init__(self):
        self.pf_config()
        self.sim_config()
        ladder = self.ladder()
        if any(q <= 0 for q in ladder) or any(b <= a for a, b in zip(ladder, ladder[1:])):
            raise DataError("scenario ladder must be positive and strictly increasing")
        seed = self.data.get("seed", 0)
        if not isinstance(seed, int) or seed < 0:
            raise DataError(f"seed must be a non-negative integer, got {seed!r}")

    @property
    def seed(self) -> int:
        return int(self.data.get("seed", 0))

    def path(self, key: str) -> str | None:
        return self.data.get(key)

    def require(self, *keys: str) -> None:
        """Fail unless every named path is configured and exists."""
        missing = [k for k in keys if not self.data.get(k)]
        if missing:
            raise UsageError(f"configuration does not set {', '.join(missing)}")
        absent = [f"{k}={self.data[k]}" for k in keys if not os.path.exists(self.data[k])]
        if absent:
            raise DataError(f"configured paths do not exist: {', '.join(absent)}")

    def hash(self) -> str:
        """Fingerprint of everything that affects results; worker counts are left out."""
        data = {k: v for k, v in self.data.items() if k != "workers"}
        if isinstance(data.get("calibration"), dict):
            data["calibration"] = {k: v for k, v in data["calibration"].items() if k != "workers"}
        return fingerprint(json.dumps(data, sort_keys=True))

    def pf_config(self) -> PFConfig:
        pf = self.data.get("pf", {})
        return PFConfig(
            alpha_mode=pf.get("alpha_mode", "adaptive"),
            alpha=float(pf.get("alpha", 1.0)),
            tau=float(pf.get("tau", 0.5)),
            wet_threshold=float(pf.get("wet_threshold_m", 0.10)),
            prob_clip=float(pf.get("prob_clip", 1e-6)),
            include_control=bool(pf.get("include_control", False)),
        )

    @property
    def wet_threshold(self) -> float:
        return self.pf_config().wet_threshold

    def sim_config(self) -> SimConfig:
        s = self.data.get("simulation", {})
        return SimConfig(
            cfl=float(s.get("cfl", 0.7)),
            dt_min=float(s.get("dt_min_s", 0.01)),
            dt_max=float(s.get("dt_max_s", 10.0)),
            output_interval=float(s.get("output_interval_s", 900.0)),
        )

    @property
    def duration(self) -> float | None:
        d = self.data.get("simulation", {}).get("duration_s")
        return None if d is None else float(d)

    @property
    def workers(self) -> int:
        return int(self.data.get("workers", 1))

    def ladder(self) -> tuple:
        lad = self.data.get("scenarios", {}).get("ladder")
        if lad is None:
            return DEFAULT_LADDER
        if isinstance(lad, dict):
            start, stop, step = float(lad["start"]), float(lad["stop"]), float(lad["step"])
            if step <= 0:
                raise DataError("ladder step must be positive")
            n = int(round((stop - start) / step)) + 1
            return tuple(start + i * step for i in range(n))
        return tuple(float(q) for q in lad)

    def rating_table(self):
        sc = self.data.get("scenarios", {})
        if not sc.get("rating_table"):
            raise UsageError("configuration does not set scenarios.rating_table")
        return read_rating_table(sc["rating_table"])

    @property
    def anchor_station(self) -> str:
        anchor = self.data.get("scenarios", {}).get("anchor_station")
        if not anchor:
            raise UsageError("configuration does not set scenarios.anchor_station")
        return anchor

    @property
    def min_peak_fraction(self) -> float:
        return float(self.data.get("scenarios", {}).get("min_peak_fraction", 0.01))

    def calibration(self) -> dict:
        c = dict(self.data.get("calibration", {}))
        ranges = dict(DEFAULT_RANGES)
        ranges.update({k: tuple(v) for k, v in c.get("ranges", {}).items()})
        c["ranges"] = ranges
        c.setdefault("samples", 500)
        return c

    def twin_spec(self, seed: int | None = None) -> TwinSpec:
        t = dict(self.data.get("twin", {}))
        if "truth_layer" not in t:
            raise UsageError("configuration does not set twin.truth_layer")
        kw = {k: t[k] for k in ("truth_layer", "false_wet", "false_dry", "sigma", "observation_hour",
                                "members", "lead_days", "persistence") if k in t}
        if "observation_days" in t:
            kw["observation_days"] = tuple(int(d) for d in t["observation_days"])
        if "issue_date" in t:
            kw["issue_date"] = date.fromisoformat(t["issue_date"])
        return TwinSpec(seed=self.seed if seed is None else seed, **kw)


def _resolve_tree(data: dict, base: str) -> dict:
    out = dict(data)
    for key in PATH_KEYS:
        if key in out:
            out[key] = _resolve(base, out[key])
    for section, keys in (("scenarios", ("rating_table",)), ("calibration", ("observed", "reference_extent"))):
        if isinstance(out.get(section), dict):
            sec = dict(out[section])
            for k in keys:
                if k in sec:
                    sec[k] = _resolve(base, sec[k])
            out[section] = sec
    return out


@dataclass
class LoadedConfig:
    config: RunConfig
    manifest: dict | None = None  # set when --config pointed at a run manifest


def load_run_config(path, output_dir: str | None = None) -> LoadedConfig:
    """Read a run configuration, or the configuration embedded in a run manifest."""
    path = os.path.abspath(path)
    raw = _read_json(path)
    if "command" in raw and "config" in raw:
        data = dict(raw["config"])
        default_out = os.path.dirname(os.path.dirname(path))
        out = os.path.abspath(output_dir) if output_dir else default_out
        return LoadedConfig(RunConfig(data, out, path), raw)
    data = _resolve_tree(raw, os.path.dirname(path))
    out = data.pop("output_dir", None) or os.path.join(os.path.dirname(path), "out")
    if output_dir:
        out = os.path.abspath(output_dir)
    return LoadedConfig(RunConfig(data, out, path), None)
