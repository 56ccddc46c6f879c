"""Identical-twin experiments.

One datacube layer plays the true flood. Synthetic probability maps are drawn
around it and a synthetic ensemble perturbs its anchor discharge, so the
filter's gain over the Open Loop can be measured against a known truth.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from datetime import date, datetime, timedelta

import numpy as np

from .assimilation import ObservationMap, PFConfig, assimilation_cycle
from .errors import DataError
from .forecast import ForecastEnsemble
from .metrics import rmse
from .raster import Raster
from .scenario import HazardDatacube


@dataclass(frozen=True)
class TwinSpec:
    """Settings for one synthetic dataset.

    ``truth_layer`` is the 1-based datacube index. Member discharges are the
    truth's anchor peak times a lognormal factor with log-sd ``sigma`` on every
    lead day; ``persistence`` is the day-to-day correlation of each member's
    log factor (1.0 keeps a member's error fixed over the horizon).
    """

    truth_layer: int
    false_wet: float = 0.1
    false_dry: float = 0.1
    sigma: float = 0.3
    observation_days: tuple = (3, 10)
    observation_hour: float = 5.5
    members: int = 50
    lead_days: int = 30
    persistence: float = 1.0
    issue_date: date = date(2021, 7, 10)
    seed: int = 0

    def __post_init__(self):
        for name in ("false_wet", "false_dry"):
            v = getattr(self, name)
            if not 0 <= v < 0.5:
                raise DataError(f"{name} rate must lie in [0, 0.5), got {v}")
        if self.sigma < 0:
            raise DataError("sigma must be non-negative")
        if not 0 <= self.persistence <= 1:
            raise DataError("persistence must lie in [0, 1]")
        if self.members < 1 or self.lead_days < 1:
            raise DataError("need at least one member and one lead day")
        if any(not 1 <= d <= self.lead_days for d in self.observation_days):
            raise DataError("observation days must fall inside the forecast horizon")
        if not 0 <= self.observation_hour < 24:
            raise DataError("observation hour must lie in [0, 24)")

    def observation_times(self) -> list[datetime]:
        t0 = datetime.combine(self.issue_date, datetime.min.time())
        return [t0 + timedelta(days=d - 1, hours=self.observation_hour) for d in self.observation_days]


@dataclass(frozen=True)
class TwinDataset:
    spec: TwinSpec
    forecast: ForecastEnsemble
    observations: tuple
    truth_depth: Raster = field(repr=False)
    truth_levels: dict = field(default_factory=dict)
    truth_discharge: float = 0.0


def synthetic_observation(truth: Raster, false_wet: float, false_dry: float, rng: np.random.Generator,
                          wet_threshold: float = 0.10) -> np.ndarray:
    """Probabilities scattered around ``1 - false_dry`` on truly wet pixels and
    around ``false_wet`` on dry ones (normal noise with sd equal to the rate),
    clipped to [0, 1]. Zero rates give sharp 0/1 maps."""
    wet = truth.values > wet_threshold
    noise = rng.standard_normal(truth.spec.shape)
    p = np.where(wet, 1.0 - false_dry + false_dry * noise, false_wet + false_wet * noise)
    p = np.clip(p, 0.0, 1.0)
    return np.where(truth.valid, p, truth.spec.nodata)


def synthetic_ensemble(truth_q: float, spec: TwinSpec, rng: np.random.Generator) -> np.ndarray:
    """members x lead_days discharges with lognormal(sigma) marginals per day."""
    shocks = rng.standard_normal((spec.members, spec.lead_days))
    rho = spec.persistence
    innov = math.sqrt(max(1.0 - rho * rho, 0.0))
    logf = np.empty_like(shocks)
    logf[:, 0] = shocks[:, 0]
    for d in range(1, spec.lead_days):
        logf[:, d] = rho * logf[:, d - 1] + innov * shocks[:, d]
    return truth_q * np.exp(spec.sigma * logf)


def generate_twin(cube: HazardDatacube, spec: TwinSpec, wet_threshold: float = 0.10) -> TwinDataset:
    if not 1 <= spec.truth_layer <= len(cube):
        raise DataError(f"truth layer {spec.truth_layer} outside 1..{len(cube)}")
    k = spec.truth_layer - 1
    truth = cube.layers[k]
    truth_q = cube.peaks[k]
    rng = np.random.default_rng(spec.seed)
    values = synthetic_ensemble(truth_q, spec, rng)
    members = tuple(str(i) for i in range(1, spec.members + 1))
    fc = ForecastEnsemble(spec.issue_date, members, values, None, cube.manifest.get("anchor_station", ""))
    obs = []
    for i, t in enumerate(spec.observation_times(), start=1):
        p = synthetic_observation(truth, spec.false_wet, spec.false_dry, rng, wet_threshold)
        obs.append(ObservationMap(Raster(truth.spec, p), t, None, f"obs_{i:02d}_{t:%Y%m%dT%H%M}"))
    levels = {g: float(cube.gauge_peak_levels(g)[k]) for g in cube.gauge_names}
    return TwinDataset(spec, fc, tuple(obs), truth, levels, truth_q)


def twin_scores(cube: HazardDatacube, data: TwinDataset, config: PFConfig | None = None) -> dict:
    """Gauge RMSE over the horizon for the Open Loop and the filter."""
    config = config or PFConfig()
    ol = assimilation_cycle(data.forecast, cube, (), config)
    pf = assimilation_cycle(data.forecast, cube, data.observations, config)
    out = {}
    for g, level in data.truth_levels.items():
        truth = np.full(data.forecast.lead_days, level)
        r_ol = rmse(truth, ol.gauge_series(g)) if truth.size > 1 else abs(ol.gauge_series(g)[0] - level)
        r_pf = rmse(truth, pf.gauge_series(g)) if truth.size > 1 else abs(pf.gauge_series(g)[0] - level)
        out[g] = {
            "ol_rmse": r_ol,
            "pf_rmse": r_pf,
            "improvement": (r_ol - r_pf) / r_ol if r_ol > 0 else 0.0,
        }
    return out


def twin_experiment(cube: HazardDatacube, base: TwinSpec, seeds, config: PFConfig | None = None) -> dict:
    """Run ``base`` over several seeds; returns per-gauge improvement arrays and summaries."""
    per_seed = []
    for seed in seeds:
        data = generate_twin(cube, replace(base, seed=int(seed)))
        per_seed.append(twin_scores(cube, data, config))
    gauges = sorted(per_seed[0]) if per_seed else []
    summary = {}
    for g in gauges:
        imp = np.array([s[g]["improvement"] for s in per_seed])
        summary[g] = {
            "improvement": imp,
            "median_improvement": float(np.median(imp)),
            "negative_seeds": int(np.count_nonzero(imp < 0)),
            "ol_rmse": np.array([s[g]["ol_rmse"] for s in per_seed]),
            "pf_rmse": np.array([s[g]["pf_rmse"] for s in per_seed]),
        }
    return summary
