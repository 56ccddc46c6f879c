"""Tempered particle filter on flood-probability maps.

Each particle is a datacube layer picked by one forecast member. Its likelihood
given an observation is the product over pixels of ``p`` where the layer is wet
and ``1 - p`` where it is dry, accumulated in log space. Weights are tempered
by ``alpha`` and kept until the next analysis; there is no resampling.
"""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from datetime import datetime

import numpy as np

from .errors import DataError, GridMismatchError
from .forecast import ForecastEnsemble, ParticleSet, ensemble_to_particles, uniform_weights
from .hydrograph import parse_timestamp
from .raster import BinaryMap, Raster, read_ascii_grid, require_aligned, resample_nearest
from .scenario import HazardDatacube

log = logging.getLogger(__name__)

PROB_CLIP = 1e-6


@dataclass(frozen=True)
class ObservationMap:
    probability: Raster
    timestamp: datetime
    exclusion: BinaryMap | None = None
    name: str = ""

    def __post_init__(self):
        p = self.probability
        vals = p.values[p.valid]
        if vals.size and (vals.min() < 0 or vals.max() > 1):
            raise DataError(f"observation {self.name or self.timestamp}: probabilities must lie in [0, 1]")
        if self.exclusion is not None:
            require_aligned(p.spec, self.exclusion.spec)

    @property
    def included(self) -> np.ndarray:
        mask = self.probability.valid
        if self.exclusion is not None:
            mask = mask & ~(self.exclusion.wet & self.exclusion.valid)
        return mask


def load_observation(path, grid=None) -> ObservationMap:
    """Read a probability ``.asc`` and its sidecar JSON (``<stem>.json``).

    The sidecar holds ``timestamp`` and optionally ``exclusion_mask`` (path of an
    ``.asc`` whose non-zero cells are ignored). With ``grid`` the raster is
    resampled (nearest neighbour) onto it.
    """
    path = os.fspath(path)
    stem = os.path.splitext(path)[0]
    try:
        with open(stem + ".json") as f:
            meta = json.load(f)
    except FileNotFoundError:
        raise DataError(f"observation {path} has no sidecar {stem}.json") from None
    if "timestamp" not in meta:
        raise DataError(f"{stem}.json: missing timestamp")
    prob = read_ascii_grid(path)
    exclusion = None
    if meta.get("exclusion_mask"):
        mpath = os.path.join(os.path.dirname(path), meta["exclusion_mask"])
        mask = read_ascii_grid(mpath)
        if grid is not None and mask.spec != grid:
            mask = resample_nearest(mask, grid)
        exclusion = BinaryMap(mask.spec, mask.valid & (mask.values != 0), mask.valid)
    if grid is not None and prob.spec != grid:
        prob = resample_nearest(prob, grid)
    return ObservationMap(prob, parse_timestamp(meta["timestamp"]), exclusion, os.path.basename(stem))


def load_observations(directory, grid=None) -> list[ObservationMap]:
    """All ``*.asc`` maps with a sidecar in ``directory``, sorted by time."""
    if not directory or not os.path.isdir(directory):
        return []
    obs = []
    for name in sorted(os.listdir(directory)):
        if name.endswith(".asc") and os.path.exists(os.path.join(directory, name[:-4] + ".json")):
            obs.append(load_observation(os.path.join(directory, name), grid))
    obs.sort(key=lambda o: o.timestamp)
    return obs


def write_observation(obs: ObservationMap, path) -> None:
    from .raster import write_ascii_grid

    write_ascii_grid(obs.probability, path)
    stem = os.path.splitext(os.fspath(path))[0]
    with open(stem + ".json", "w") as f:
        json.dump({"timestamp": obs.timestamp.isoformat()}, f, indent=2)
        f.write("\n")


# --- weights --------------------------------------------------------------------


def local_weight(p, wet, eps: float = PROB_CLIP):
    """Pixel likelihood: ``p`` if the particle is wet there, else ``1 - p``."""
    p = np.clip(np.asarray(p, dtype=np.float64), eps, 1.0 - eps)
    out = np.where(np.asarray(wet, dtype=bool), p, 1.0 - p)
    return float(out) if out.ndim == 0 else out


def _log_terms(obs: ObservationMap, eps: float):
    p = np.clip(obs.probability.values, eps, 1.0 - eps)
    inc = obs.included
    if not inc.any():
        raise DataError(f"observation {obs.name or obs.timestamp} has no usable pixels")
    return np.log(p[inc]), np.log1p(-p[inc]), inc


def global_log_weights(obs: ObservationMap, extents, eps: float = PROB_CLIP) -> np.ndarray:
    """Sum of log pixel likelihoods per particle extent over included pixels.

    Pixels that are nodata in the observation, excluded, or invalid in an
    extent are skipped.
    """
    logp, log1mp, inc = _log_terms(obs, eps)
    out = np.empty(len(extents))
    for n, ext in enumerate(extents):
        if ext.spec != obs.probability.spec:
            raise GridMismatchError("particle extent is not aligned with the observation")
        valid = ext.valid[inc]
        wet = ext.wet[inc]
        out[n] = np.sum(np.where(wet, logp, log1mp)[valid])
    return out


def layer_log_likelihoods(obs: ObservationMap, cube: HazardDatacube, wet_threshold: float = 0.10,
                          eps: float = PROB_CLIP) -> np.ndarray:
    """Log-likelihood of every datacube layer's extent (depth > threshold)."""
    if obs.probability.spec != cube.spec:
        raise GridMismatchError("observation grid is not aligned with the datacube")
    logp, log1mp, inc = _log_terms(obs, eps)
    out = np.empty(len(cube))
    for k, layer in enumerate(cube.layers):
        valid = layer.valid[inc]
        wet = layer.values[inc] > wet_threshold
        out[k] = np.sum(np.where(wet, logp, log1mp)[valid])
    return out


@dataclass(frozen=True)
class WeightVector:
    loglik: np.ndarray
    weights: np.ndarray
    alpha: float

    @property
    def ess(self) -> float:
        return effective_sample_size(self.weights)


def tempered_weights(logw, alpha: float) -> WeightVector:
    """Normalised ``exp(alpha * (logw - max logw))``."""
    if not 0.0 <= alpha <= 1.0:
        raise DataError(f"tempering coefficient must lie in [0, 1], got {alpha}")
    lw = np.asarray(logw, dtype=np.float64)
    if lw.size == 0:
        raise DataError("no particles to weight")
    if not np.all(np.isfinite(lw)):
        raise DataError("log-likelihoods must be finite")
    w = np.exp(alpha * (lw - lw.max()))
    return WeightVector(lw, w / w.sum(), float(alpha))


def effective_sample_size(weights) -> float:
    w = np.asarray(weights, dtype=np.float64)
    return float(1.0 / np.sum(w * w))


def select_alpha(logw, tau: float = 0.5, tol: float = 1e-6) -> float:
    """Largest alpha in [0, 1] keeping ESS >= tau * N, by bisection."""
    if not 0.0 < tau <= 1.0:
        raise DataError(f"target ESS fraction must lie in (0, 1], got {tau}")
    lw = np.asarray(logw, dtype=np.float64)
    target = tau * lw.size
    # guard against round-off at ESS == N
    slack = 1e-9 * lw.size

    def ok(a):
        return effective_sample_size(tempered_weights(lw, a).weights) >= target - slack

    if ok(1.0):
        return 1.0
    lo, hi = 0.0, 1.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if ok(mid):
            lo = mid
        else:
            hi = mid
    return lo


def weighted_depth_map(particles: ParticleSet, cube: HazardDatacube) -> Raster:
    """Per-pixel weighted mean depth over the particles' datacube layers."""
    if np.any(particles.layers < 0) or np.any(particles.layers >= len(cube)):
        raise DataError("particle refers to a layer outside the datacube")
    layer_w = np.bincount(particles.layers, weights=particles.weights, minlength=len(cube))
    used = np.flatnonzero(layer_w)
    valid = np.ones(cube.spec.shape, dtype=bool)
    acc = np.zeros(cube.spec.shape)
    for k in used:
        lyr = cube.layers[k]
        valid &= lyr.valid
        acc += layer_w[k] * lyr.filled(0.0)
    return Raster(cube.spec, np.where(valid, acc, cube.spec.nodata))


def weighted_discharge(particles: ParticleSet, discharges=None) -> float:
    """Weighted discharge; defaults to the particles' own member discharges."""
    q = particles.discharge if discharges is None else np.asarray(discharges, dtype=np.float64)
    return float(np.dot(particles.weights, q))


def weighted_gauge_levels(particles: ParticleSet, cube: HazardDatacube) -> dict:
    return {name: float(np.dot(particles.weights, cube.gauge_peak_levels(name)[particles.layers]))
            for name in cube.gauge_names}


# --- cycle ----------------------------------------------------------------------


@dataclass(frozen=True)
class PFConfig:
    alpha_mode: str = "adaptive"
    alpha: float = 1.0
    tau: float = 0.5
    wet_threshold: float = 0.10
    prob_clip: float = PROB_CLIP
    include_control: bool = False

    def __post_init__(self):
        if self.alpha_mode not in ("adaptive", "fixed"):
            raise DataError(f"alpha_mode must be 'adaptive' or 'fixed', got {self.alpha_mode!r}")
        if not 0 <= self.alpha <= 1:
            raise DataError("alpha must lie in [0, 1]")
        if not 0 < self.tau <= 1:
            raise DataError("tau must lie in (0, 1]")
        if self.wet_threshold < 0:
            raise DataError("wet threshold must be non-negative")
        if not 0 < self.prob_clip < 0.5:
            raise DataError("probability clip must lie in (0, 0.5)")


@dataclass(frozen=True)
class Analysis:
    lead_day: int
    observations: tuple
    alpha: float
    ess: float
    weights: np.ndarray = field(repr=False)
    loglik: np.ndarray = field(repr=False)


@dataclass(frozen=True)
class DailyProduct:
    lead_day: int
    start: datetime
    particles: ParticleSet
    depth: Raster = field(repr=False)
    gauge_levels: dict = field(default_factory=dict)
    discharge: float = 0.0


@dataclass(frozen=True)
class CycleResult:
    days: tuple
    analyses: tuple

    def gauge_series(self, name: str) -> np.ndarray:
        return np.array([d.gauge_levels[name] for d in self.days])

    @property
    def discharge(self) -> np.ndarray:
        return np.array([d.discharge for d in self.days])


def assimilation_cycle(fc: ForecastEnsemble, cube: HazardDatacube, observations=(),
                       config: PFConfig | None = None) -> CycleResult:
    """Daily weighted products over the forecast horizon.

    Observations are assigned to the lead day containing their timestamp; all
    maps falling on one day form a single analysis. Weights start uniform, are
    replaced at each analysis (reset, then reweighted) and carried forward by
    member until the next one. Without observations this is the Open Loop.
    """
    config = config or PFConfig()
    obs = list(observations)
    if any(b.timestamp < a.timestamp for a, b in zip(obs, obs[1:])):
        raise DataError("observations must be sorted by time")
    by_day: dict[int, list] = {}
    for o in obs:
        if o.probability.spec != cube.spec:
            raise GridMismatchError(f"observation {o.name or o.timestamp} is not aligned with the datacube")
        day = fc.lead_day_of(o.timestamp)
        if day < 1:
            raise DataError(f"observation at {o.timestamp} precedes issue date {fc.issue_date}")
        if day > fc.lead_days:
            log.warning("observation at %s is beyond the %d-day horizon; ignored", o.timestamp, fc.lead_days)
            continue
        by_day.setdefault(day, []).append(o)

    peaks = cube.peaks
    n = len(fc.member_matrix(config.include_control)[0])
    weights = uniform_weights(n)
    days, analyses = [], []
    for day in range(1, fc.lead_days + 1):
        particles = ensemble_to_particles(fc, day, peaks, config.include_control)
        if day in by_day:
            layer_ll = sum(layer_log_likelihoods(o, cube, config.wet_threshold, config.prob_clip)
                           for o in by_day[day])
            loglik = layer_ll[particles.layers]
            if config.alpha_mode == "adaptive":
                alpha = select_alpha(loglik, config.tau)
            else:
                alpha = config.alpha
            wv = tempered_weights(loglik, alpha)
            weights = wv.weights
            analyses.append(Analysis(day, tuple(o.name or o.timestamp.isoformat() for o in by_day[day]),
                                     alpha, wv.ess, weights, loglik))
        particles = particles.reweighted(weights)
        days.append(DailyProduct(day, fc.day_start(day), particles, weighted_depth_map(particles, cube),
                                 weighted_gauge_levels(particles, cube), weighted_discharge(particles)))
    return CycleResult(tuple(days), tuple(analyses))
