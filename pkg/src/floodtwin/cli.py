"""Command-line pipeline: datacube build, forecast, assimilation, verification,
calibration and synthetic twin datasets.

Every run directory gets a ``run_manifest.json`` recording the command, the
resolved configuration and its hash, the seed and the sha256 of every input and
output. Passing that manifest back as ``--config`` repeats the run.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from datetime import date, datetime, timedelta

import numpy as np

from . import __version__
from .assimilation import CycleResult, assimilation_cycle, load_observations, write_observation
from .calibration import CalibrationProblem, ObservedSeries, calibrate, lhs_sample, write_results_csv
from .config import LoadedConfig, RunConfig, load_domain, load_run_config
from .errors import DataError, FloodTwinError, NumericalError, UsageError
from .forecast import ForecastEnsemble, load_forecast_ensemble, write_forecast_ensemble
from .hydrograph import parse_timestamp
from .metrics import LEGEND, contingency, csi, score_series
from .raster import BinaryMap, binarize_depth, binarize_probability, read_ascii_grid, write_ascii_grid
from .scenario import (build_datacube, build_scenario_set, datacube_config_hash, file_sha256, load_datacube,
                       read_manifest, save_datacube)
from .twin import generate_twin, twin_scores

log = logging.getLogger("floodtwin")

COMMANDS = ("build-datacube", "forecast", "assimilate", "verify", "calibrate", "twin")
MANIFEST_NAME = "run_manifest.json"
PROB_THRESHOLD = 0.25


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="floodtwin", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"floodtwin {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "build-datacube": "simulate the scenario ladder and write the hazard datacube",
        "forecast": "open-loop products for one forecast issue date",
        "assimilate": "particle-filter products using the configured observation maps",
        "verify": "score open-loop and filtered runs against observed gauges and extents",
        "calibrate": "Latin hypercube calibration of channel and floodplain parameters",
        "twin": "write a synthetic identical-twin dataset from one datacube layer",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", required=True, help="run configuration JSON or a run manifest")
        p.add_argument("--issue-date", type=_iso_date, help="forecast issue date (YYYY-MM-DD)")
        p.add_argument("--seed", type=int, help="override the configured seed")
        p.add_argument("--out", help="output directory (overrides the configuration)")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _iso_date(text: str) -> date:
    try:
        return date.fromisoformat(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a YYYY-MM-DD date: {text!r}") from None


# --- helpers ----------------------------------------------------------------------


def _fmt(v) -> str:
    return repr(float(v))


def _input_record(paths: dict, root: str | None = None) -> dict:
    """sha256 per input; paths under ``root`` (the output directory) are stored relative to it."""
    def shown(path):
        if root and os.path.commonpath([os.path.abspath(path), os.path.abspath(root)]) == os.path.abspath(root):
            return os.path.relpath(path, root)
        return path

    out = {}
    for role, path in sorted(paths.items()):
        if path is None:
            continue
        if os.path.isdir(path):
            target = os.path.join(path, "manifest.json")
            if not os.path.exists(target):
                names = sorted(os.listdir(path))
                out[role] = {"path": shown(path), "files": {n: file_sha256(os.path.join(path, n)) for n in names
                                                     if os.path.isfile(os.path.join(path, n))}}
                continue
            path = target
        out[role] = {"path": shown(path), "sha256": file_sha256(path)}
    return out


def write_run_manifest(run_dir: str, command: str, cfg: RunConfig, seed: int, issue: date | None,
                       inputs: dict, outputs: list) -> str:
    manifest = {
        "command": command,
        "version": __version__,
        "config": cfg.data,
        "config_hash": cfg.hash(),
        "seed": seed,
        "issue_date": issue.isoformat() if issue else None,
        "inputs": _input_record(inputs, cfg.output_dir),
        "outputs": {name: file_sha256(os.path.join(run_dir, name)) for name in sorted(outputs)},
    }
    path = os.path.join(run_dir, MANIFEST_NAME)
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def _cached_run(run_dir: str, cfg: RunConfig, seed: int, inputs: dict) -> bool:
    """True when ``run_dir`` already holds intact outputs of this exact configuration."""
    path = os.path.join(run_dir, MANIFEST_NAME)
    if not os.path.exists(path):
        return False
    try:
        with open(path) as f:
            old = json.load(f)
        if (old.get("config_hash"), old.get("seed"), old.get("inputs")) != (cfg.hash(), seed, _input_record(inputs, cfg.output_dir)):
            return False
        return all(os.path.exists(os.path.join(run_dir, n)) and file_sha256(os.path.join(run_dir, n)) == h
                   for n, h in old.get("outputs", {}).items())
    except (OSError, ValueError):
        return False


def _issue_date(args, loaded: LoadedConfig) -> date | None:
    if args.issue_date is not None:
        return args.issue_date
    if loaded.manifest and loaded.manifest.get("issue_date"):
        return date.fromisoformat(loaded.manifest["issue_date"])
    return None


def _seed(args, loaded: LoadedConfig) -> int:
    if args.seed is not None:
        if args.seed < 0:
            raise UsageError("--seed must be non-negative")
        return args.seed
    if loaded.manifest is not None and loaded.manifest.get("seed") is not None:
        return int(loaded.manifest["seed"])
    return loaded.config.seed


def _forecast_issue(path: str) -> date | None:
    with open(path, newline="") as f:
        row = next(csv.DictReader(f), None)
    try:
        return date.fromisoformat(row["issue_date"].strip()) if row else None
    except (KeyError, AttributeError, ValueError):
        return None


def find_forecast(cfg: RunConfig, issue: date | None) -> str:
    """Forecast CSV for ``issue`` (a configured file, or a match in a directory)."""
    cfg.require("forecasts")
    src = cfg.path("forecasts")
    if os.path.isfile(src):
        candidates = [src]
    else:
        candidates = [os.path.join(src, n) for n in sorted(os.listdir(src)) if n.endswith(".csv")]
    dated = [(p, _forecast_issue(p)) for p in candidates]
    dated = [(p, d) for p, d in dated if d is not None]
    if issue is None:
        dates = sorted({d for _, d in dated})
        if len(dates) != 1:
            raise UsageError(f"--issue-date is required ({len(dates)} issue dates available)")
        issue = dates[0]
    hits = [p for p, d in dated if d == issue]
    if not hits:
        raise DataError(f"no forecast issued on {issue} under {src}")
    if len(hits) > 1:
        raise DataError(f"several forecasts issued on {issue}: {', '.join(hits)}")
    return hits[0]


def write_products(run_dir: str, result: CycleResult, fc: ForecastEnsemble) -> list[str]:
    """Daily depth rasters, gauge levels and expected discharge."""
    os.makedirs(run_dir, exist_ok=True)
    names = []
    for d in result.days:
        name = f"depth_day_{d.lead_day:02d}.asc"
        write_ascii_grid(d.depth, os.path.join(run_dir, name))
        names.append(name)
    with open(os.path.join(run_dir, "gauges.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["lead_day", "date", "gauge", "water_level_m"])
        for d in result.days:
            for g in sorted(d.gauge_levels):
                w.writerow([d.lead_day, d.start.date().isoformat(), g, _fmt(d.gauge_levels[g])])
    with open(os.path.join(run_dir, "discharge.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["lead_day", "date", "station", "discharge_m3s"])
        for d in result.days:
            w.writerow([d.lead_day, d.start.date().isoformat(), fc.station, _fmt(d.discharge)])
    return names + ["gauges.csv", "discharge.csv"]


def write_weight_trace(path: str, result: CycleResult) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["lead_day", "observations", "alpha", "ess", "member", "layer", "loglik", "weight"])
        for a in result.analyses:
            particles = result.days[a.lead_day - 1].particles
            for m, k, ll, wt in zip(particles.members, particles.layers.tolist(), a.loglik.tolist(),
                                    a.weights.tolist()):
                w.writerow([a.lead_day, ";".join(a.observations), _fmt(a.alpha), _fmt(a.ess), m, k + 1,
                            _fmt(ll), _fmt(wt)])


def read_gauge_observations(path: str) -> dict:
    """``gauge,timestamp,water_level_m`` rows as gauge -> list of (datetime, level)."""
    out: dict[str, list] = {}
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        need = {"gauge", "timestamp", "water_level_m"}
        if reader.fieldnames is None or not need <= set(reader.fieldnames):
            raise DataError(f"{path}: expected columns gauge,timestamp,water_level_m")
        for lineno, row in enumerate(reader, start=2):
            try:
                value = float(row["water_level_m"])
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric water level") from None
            if not np.isfinite(value):
                continue
            out.setdefault(row["gauge"].strip(), []).append((parse_timestamp(row["timestamp"]), value))
    for series in out.values():
        series.sort(key=lambda tv: tv[0])
    return out


def _read_run_gauges(run_dir: str) -> dict:
    path = os.path.join(run_dir, "gauges.csv")
    if not os.path.exists(path):
        raise DataError(f"{run_dir} has no gauges.csv")
    out: dict[str, dict] = {}
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            out.setdefault(row["gauge"], {})[date.fromisoformat(row["date"])] = float(row["water_level_m"])
    return out


# --- commands ---------------------------------------------------------------------


def cmd_build_datacube(loaded: LoadedConfig, args) -> int:
    cfg = loaded.config
    cfg.require("domain")
    if not cfg.path("datacube"):
        raise UsageError("configuration does not set datacube")
    setup = load_domain(cfg.path("domain"))
    scenarios = build_scenario_set(setup.base_event, cfg.rating_table(), cfg.anchor_station, cfg.ladder(),
                                   cfg.min_peak_fraction)
    duration = cfg.duration or _event_duration(setup)
    target = cfg.path("datacube")
    if args.out:
        target = os.path.join(cfg.output_dir, os.path.basename(os.path.normpath(target)))
    expected = datacube_config_hash(scenarios, setup.domain, setup.inflow_locations, setup.outlets, setup.gauges,
                                    duration, cfg.sim_config(), cfg.wet_threshold)
    if os.path.exists(os.path.join(target, "manifest.json")):
        try:
            old = read_manifest(target)
            if old.get("complete") and old.get("config_hash") == expected:
                load_datacube(target, verify=True)
                print(f"datacube at {target} is up to date ({len(old['layers'])} layers); nothing to do")
                return 0
        except DataError as exc:
            log.warning("existing datacube will be rebuilt: %s", exc)
    cube = build_datacube(scenarios, setup.domain, setup.inflow_locations, setup.outlets, setup.gauges, duration,
                          cfg.sim_config(), workers=cfg.workers, wet_threshold=cfg.wet_threshold)
    save_datacube(cube, target)
    outputs = [row["file"] for row in cube.manifest["layers"]] + ["manifest.json"]
    inputs = {"domain": cfg.path("domain"), "rating_table": cfg.data["scenarios"]["rating_table"], **setup.files}
    write_run_manifest(target, "build-datacube", cfg, _seed(args, loaded), None, inputs, outputs)
    print(f"{'layer':>5} {'peak_m3s':>10} {'T_years':>9} {'wet_area_m2':>12}")
    for row in cube.manifest["layers"]:
        print(f"S{row['index']:<4d} {row['anchor_peak_m3s']:10.2f} {row['return_period_years']:9.2f} "
              f"{row['wet_area_m2']:12.0f}")
    if cube.manifest["monotonicity_violations"]:
        log.warning("%d cells decrease in depth between consecutive layers",
                    cube.manifest["monotonicity_violations"])
    if cube.manifest["failed"]:
        names = ", ".join(f"S{f['index']} ({f['error']})" for f in cube.manifest["failed"])
        raise NumericalError(f"scenario simulation failed: {names}")
    print(f"wrote {len(cube)} layers to {target}")
    return 0


def _event_duration(setup) -> float:
    t0 = min(h.start for h in setup.base_event.values())
    end = min((h.start - t0).total_seconds() + h.span[1] for h in setup.base_event.values())
    if end <= 0:
        raise DataError("base event hydrographs do not overlap")
    return end


def _open_loop_inputs(cfg: RunConfig, issue):
    cfg.require("datacube")
    cube = load_datacube(cfg.path("datacube"))
    fpath = find_forecast(cfg, issue)
    fc = load_forecast_ensemble(fpath)
    return cube, fc, fpath


def cmd_forecast(loaded: LoadedConfig, args) -> int:
    cfg = loaded.config
    cube, fc, fpath = _open_loop_inputs(cfg, _issue_date(args, loaded))
    result = assimilation_cycle(fc, cube, (), cfg.pf_config())
    run_dir = os.path.join(cfg.output_dir, f"forecast_{fc.issue_date.isoformat()}")
    outputs = write_products(run_dir, result, fc)
    write_run_manifest(run_dir, "forecast", cfg, _seed(args, loaded), fc.issue_date,
                       {"datacube": cfg.path("datacube"), "forecast": fpath}, outputs)
    print(f"open loop for {fc.issue_date}: {fc.n_members} members, {fc.lead_days} lead days -> {run_dir}")
    return 0


def cmd_assimilate(loaded: LoadedConfig, args) -> int:
    cfg = loaded.config
    cube, fc, fpath = _open_loop_inputs(cfg, _issue_date(args, loaded))
    obs_dir = cfg.path("observations")
    if obs_dir and not os.path.isdir(obs_dir):
        raise DataError(f"observation directory {obs_dir} does not exist")
    observations = load_observations(obs_dir, cube.spec)
    if not observations:
        log.warning("no observation maps found; products equal the open loop")
    result = assimilation_cycle(fc, cube, observations, cfg.pf_config())
    run_dir = os.path.join(cfg.output_dir, f"assimilate_{fc.issue_date.isoformat()}")
    outputs = write_products(run_dir, result, fc)
    write_weight_trace(os.path.join(run_dir, "weights.csv"), result)
    outputs.append("weights.csv")
    inputs = {"datacube": cfg.path("datacube"), "forecast": fpath}
    if obs_dir:
        inputs["observations"] = obs_dir
    write_run_manifest(run_dir, "assimilate", cfg, _seed(args, loaded), fc.issue_date, inputs, outputs)
    for a in result.analyses:
        print(f"lead day {a.lead_day}: {len(a.observations)} map(s), alpha={a.alpha:.6f}, ESS={a.ess:.2f}")
    print(f"filtered products for {fc.issue_date} -> {run_dir}")
    return 0


def _run_dates(out_dir: str) -> list[date]:
    dates = set()
    if os.path.isdir(out_dir):
        for name in os.listdir(out_dir):
            for prefix in ("forecast_", "assimilate_"):
                if name.startswith(prefix):
                    try:
                        dates.add(date.fromisoformat(name[len(prefix):]))
                    except ValueError:
                        pass
    return sorted(dates)


def cmd_verify(loaded: LoadedConfig, args) -> int:
    cfg = loaded.config
    cfg.require("gauges")
    observed = read_gauge_observations(cfg.path("gauges"))
    issue = _issue_date(args, loaded)
    dates = [issue] if issue else _run_dates(cfg.output_dir)
    if not dates:
        raise DataError(f"no forecast or assimilate runs under {cfg.output_dir}")
    obs_dir = cfg.path("observations")
    wet_threshold = cfg.wet_threshold
    report = {"legend": LEGEND, "gauges": [], "extents": []}
    tag = dates[0].isoformat() if len(dates) == 1 else "all"
    ver_dir = os.path.join(cfg.output_dir, f"verify_{tag}")
    os.makedirs(ver_dir, exist_ok=True)
    outputs = []
    inputs = {"gauges": cfg.path("gauges")}
    for d in dates:
        runs = [(label, os.path.join(cfg.output_dir, f"{kind}_{d.isoformat()}"))
                for label, kind in (("OL", "forecast"), ("PF", "assimilate"))]
        runs = [(label, rd) for label, rd in runs if os.path.isdir(rd)]
        if not runs:
            raise DataError(f"no forecast or assimilate run for {d} under {cfg.output_dir}")
        if len(runs) == 1:
            log.warning("only the %s run exists for %s", runs[0][0], d)
        for label, rd in runs:
            inputs[f"{label}:{d.isoformat()}"] = os.path.join(rd, MANIFEST_NAME)
            sim = _read_run_gauges(rd)
            gaps = sorted(set(observed) - set(sim))
            gaps = [f"{g} (not simulated)" for g in gaps]
            for g, series in sorted(sim.items()):
                daily = _daily_max(observed.get(g, []))
                days = [day for day in sorted(series) if day in daily]
                if len(days) < 2:
                    gaps.append(f"{g} (observed on {len(days)} of {len(series)} forecast days)")
                    continue
                scores = score_series([daily[x] for x in days], [series[x] for x in days])
                report["gauges"].append({"station": g, "issue_date": d.isoformat(), "run": label, **scores})
            if gaps:
                raise DataError(f"missing gauge series for {label} {d}: {'; '.join(gaps)}")
            if obs_dir:
                outputs += _verify_extents(rd, label, d, obs_dir, wet_threshold, ver_dir, report)
    if obs_dir:
        inputs["observations"] = obs_dir
    with open(os.path.join(ver_dir, "report.json"), "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
    text = format_report(report)
    with open(os.path.join(ver_dir, "report.txt"), "w") as f:
        f.write(text)
    print(text, end="")
    outputs += ["report.json", "report.txt"]
    write_run_manifest(ver_dir, "verify", cfg, _seed(args, loaded), issue, inputs, outputs)
    return 0


def _daily_max(series) -> dict:
    out: dict[date, float] = {}
    for t, v in series:
        day = t.date()
        out[day] = max(out.get(day, -np.inf), v)
    return out


def _verify_extents(run_dir, label, issue, obs_dir, wet_threshold, ver_dir, report) -> list[str]:
    outputs = []
    for name in sorted(os.listdir(run_dir)):
        if name.startswith("depth_day_"):
            grid = read_ascii_grid(os.path.join(run_dir, name)).spec
            break
    else:
        raise DataError(f"{run_dir} has no depth rasters")
    t0 = datetime.combine(issue, datetime.min.time())
    for obs in load_observations(obs_dir, grid):
        lead = int((obs.timestamp - t0) // timedelta(days=1)) + 1
        depth_path = os.path.join(run_dir, f"depth_day_{lead:02d}.asc")
        if lead < 1 or not os.path.exists(depth_path):
            continue
        sim = binarize_depth(read_ascii_grid(depth_path), wet_threshold)
        ref = binarize_probability(obs.probability, PROB_THRESHOLD, obs.exclusion)
        c = contingency(sim, ref, obs.exclusion)
        fname = f"contingency_{label}_{issue.isoformat()}_{obs.name}.asc"
        write_ascii_grid(c.labels, os.path.join(ver_dir, fname))
        outputs.append(fname)
        try:
            score = csi(c)
        except NumericalError:
            score = None
        report["extents"].append({"observation": obs.name, "timestamp": obs.timestamp.isoformat(),
                                  "issue_date": issue.isoformat(), "run": label, "lead_day": lead,
                                  "tp": c.tp, "fn": c.fn, "fp": c.fp, "tn": c.tn, "csi": score, "file": fname})
    return outputs


def format_report(report: dict) -> str:
    def cell(v, width=8):
        return f"{'n/a':>{width}}" if v is None else f"{v:{width}.3f}"

    lines = [f"{'station':<12} {'issue':<10} {'run':<3} {'n':>3} {'rmse_m':>8} {'nse':>8} {'kge':>8} "
             f"{'r':>8} {'beta':>8} {'gamma':>8}"]
    for row in report["gauges"]:
        lines.append(f"{row['station']:<12} {row['issue_date']:<10} {row['run']:<3} {row['n']:>3} "
                     + " ".join(cell(row[k]) for k in ("rmse", "nse", "kge", "r", "beta", "gamma")))
    if report["extents"]:
        lines.append("")
        lines.append(f"{'observation':<28} {'issue':<10} {'run':<3} {'day':>3} {'hits':>6} {'miss':>6} "
                     f"{'false':>6} {'csi':>8}")
        for row in report["extents"]:
            lines.append(f"{row['observation']:<28} {row['issue_date']:<10} {row['run']:<3} {row['lead_day']:>3} "
                         f"{row['tp']:>6} {row['fn']:>6} {row['fp']:>6} {cell(row['csi'])}")
    return "\n".join(lines) + "\n"


def cmd_calibrate(loaded: LoadedConfig, args) -> int:
    cfg = loaded.config
    cfg.require("domain")
    setup = load_domain(cfg.path("domain"))
    cal = cfg.calibration()
    observed = []
    inputs = {"domain": cfg.path("domain"), **setup.files}
    if cal.get("observed"):
        inputs["observed"] = cal["observed"]
        for g, series in sorted(read_gauge_observations(cal["observed"]).items()):
            if g not in setup.gauges:
                raise DataError(f"observed gauge {g!r} is not defined in the domain")
            observed.append(ObservedSeries(g, [t for t, _ in series], np.array([v for _, v in series])))
    reference = None
    if cal.get("reference_extent"):
        inputs["reference_extent"] = cal["reference_extent"]
        ext = read_ascii_grid(cal["reference_extent"])
        reference = BinaryMap(ext.spec, ext.valid & (ext.values != 0), ext.valid)
    if not observed and reference is None:
        raise UsageError("calibration needs calibration.observed and/or calibration.reference_extent")
    regions = tuple(setup.domain.regions()) if cal.get("per_region") else (0,)
    seed = _seed(args, loaded)
    run_dir = os.path.join(cfg.output_dir, "calibrate")
    if _cached_run(run_dir, cfg, seed, inputs):
        print(f"calibration results in {run_dir} are up to date; nothing to do")
        return 0
    samples = lhs_sample(cal["ranges"], int(cal["samples"]), seed, regions)
    problem = CalibrationProblem(setup.domain, {setup.inflow_locations[s]: h for s, h in setup.base_event.items()},
                                 setup.outlets, setup.gauges, cfg.duration or _event_duration(setup), observed,
                                 reference, cfg.sim_config(), cfg.wet_threshold)
    result = calibrate(problem, samples, cal.get("order"), int(cal.get("workers", cfg.workers)))
    os.makedirs(run_dir, exist_ok=True)
    write_results_csv(result, os.path.join(run_dir, "results.csv"))
    best = {"sample_id": result.best.sample_id, "order": result.datasets,
            "weight": float(dict(zip(result.combined.sample_ids, result.combined.weights))[result.best.sample_id]),
            "parameters": {str(k): vars(v) for k, v in result.best.regions.items()}}
    with open(os.path.join(run_dir, "best.json"), "w") as f:
        json.dump(best, f, indent=2, sort_keys=True)
        f.write("\n")
    write_run_manifest(run_dir, "calibrate", cfg, seed, None, inputs, ["results.csv", "best.json"])
    print(f"best sample {best['sample_id']} (weight {best['weight']:.4g}): {best['parameters']}")
    return 0


def cmd_twin(loaded: LoadedConfig, args) -> int:
    cfg = loaded.config
    cfg.require("datacube")
    cube = load_datacube(cfg.path("datacube"))
    seed = _seed(args, loaded)
    spec = cfg.twin_spec(seed)
    data = generate_twin(cube, spec, cfg.wet_threshold)
    run_dir = os.path.join(cfg.output_dir, f"twin_seed{seed}")
    for sub in ("forecasts", "observations"):
        os.makedirs(os.path.join(run_dir, sub), exist_ok=True)
    outputs = []
    name = f"forecasts/forecast_{spec.issue_date.isoformat()}.csv"
    write_forecast_ensemble(data.forecast, os.path.join(run_dir, name))
    outputs.append(name)
    for obs in data.observations:
        name = f"observations/{obs.name}.asc"
        write_observation(obs, os.path.join(run_dir, name))
        outputs += [name, name[:-4] + ".json"]
    write_ascii_grid(data.truth_depth, os.path.join(run_dir, "truth_depth.asc"))
    with open(os.path.join(run_dir, "truth_gauges.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["gauge", "timestamp", "water_level_m"])
        for g in sorted(data.truth_levels):
            for day in range(1, spec.lead_days + 1):
                w.writerow([g, data.forecast.day_start(day).isoformat(), _fmt(data.truth_levels[g])])
    scores = twin_scores(cube, data, cfg.pf_config())
    summary = {
        "truth_layer": spec.truth_layer,
        "truth_anchor_peak_m3s": data.truth_discharge,
        "truth_levels_m": data.truth_levels,
        "spec": {k: (v.isoformat() if isinstance(v, date) else list(v) if isinstance(v, tuple) else v)
                 for k, v in vars(spec).items()},
        "scores": scores,
    }
    with open(os.path.join(run_dir, "twin.json"), "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
    twin_cfg = {k: v for k, v in cfg.data.items() if k not in ("forecasts", "observations", "gauges")}
    twin_cfg.update(forecasts="forecasts", observations="observations", gauges="truth_gauges.csv",
                    output_dir="runs", seed=seed)
    with open(os.path.join(run_dir, "config.json"), "w") as f:
        json.dump(twin_cfg, f, indent=2, sort_keys=True)
        f.write("\n")
    outputs += ["truth_depth.asc", "truth_gauges.csv", "twin.json", "config.json"]
    write_run_manifest(run_dir, "twin", cfg, seed, spec.issue_date, {"datacube": cfg.path("datacube")}, outputs)
    for g, s in sorted(scores.items()):
        print(f"{g}: OL RMSE {s['ol_rmse']:.4f} m, PF RMSE {s['pf_rmse']:.4f} m, "
              f"improvement {100 * s['improvement']:.1f}%")
    print(f"twin dataset (truth S{spec.truth_layer}, seed {seed}) -> {run_dir}")
    return 0


HANDLERS = {
    "build-datacube": cmd_build_datacube,
    "forecast": cmd_forecast,
    "assimilate": cmd_assimilate,
    "verify": cmd_verify,
    "calibrate": cmd_calibrate,
    "twin": cmd_twin,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        loaded = load_run_config(args.config, args.out)
        if loaded.manifest is not None and loaded.manifest["command"] != args.command:
            raise UsageError(f"{args.config} is a manifest for {loaded.manifest['command']!r}, not {args.command!r}")
        return HANDLERS[args.command](loaded, args)
    except FloodTwinError as exc:
        print(f"floodtwin {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"floodtwin {args.command}: error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
