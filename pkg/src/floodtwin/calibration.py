"""GLUE-style calibration of channel and floodplain parameters.

Parameter sets are drawn by Latin hypercube sampling, each is scored against
gauge series (KGE) and a reference flood extent (CSI), scores are turned into
weights, and the datasets are combined by repeated application of Bayes' rule.
"""
from __future__ import annotations

import csv
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from datetime import datetime

import numpy as np

from .errors import DataError, FloodTwinError, NumericalError
from .metrics import SeriesPair, contingency, csi, kge
from .raster import BinaryMap, binarize_depth
from .solver import BoundaryForcing, Inflow, ModelDomain, Outlet, SimConfig, simulate

log = logging.getLogger(__name__)

PARAMETERS = ("r_ch", "p_ch", "n_ch", "n_fp")
DEFAULT_RANGES = {
    "r_ch": (0.01, 0.15),
    "p_ch": (0.01, 1.00),
    "n_ch": (0.01, 0.05),
    "n_fp": (0.03, 0.15),
}


@dataclass(frozen=True)
class RegionParameters:
    r_ch: float
    p_ch: float
    n_ch: float
    n_fp: float


@dataclass(frozen=True)
class ParameterSample:
    """One parameter set; ``regions`` maps a region label to its parameters."""

    sample_id: int
    regions: dict

    def flat(self) -> dict:
        single = len(self.regions) == 1
        out = {}
        for label in sorted(self.regions):
            p = self.regions[label]
            for name in PARAMETERS:
                out[name if single else f"{name}@{label}"] = getattr(p, name)
        return out


@dataclass(frozen=True)
class LikelihoodWeights:
    sample_ids: tuple
    weights: np.ndarray = field(repr=False)
    scores: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.shape != (len(self.sample_ids),):
            raise DataError("one weight per sample is required")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise DataError("likelihood weights must be non-negative and sum to 1")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "sample_ids", tuple(self.sample_ids))

    @classmethod
    def uniform(cls, sample_ids) -> LikelihoodWeights:
        ids = tuple(sample_ids)
        return cls(ids, np.full(len(ids), 1.0 / len(ids)))


def lhs_sample(ranges: dict | None = None, n: int = 500, seed: int = 0, regions=(0,)) -> list[ParameterSample]:
    """Latin hypercube over every (region, parameter) pair.

    Each dimension gets exactly one value in each of ``n`` equal-width strata,
    placed uniformly within the stratum; strata are permuted independently per
    dimension.
    """
    ranges = dict(DEFAULT_RANGES if ranges is None else ranges)
    if n < 1:
        raise DataError("need at least one sample")
    for name in PARAMETERS:
        if name not in ranges:
            raise DataError(f"no range given for {name}")
        lo, hi = ranges[name]
        if not lo < hi:
            raise DataError(f"inverted or empty range for {name}: ({lo}, {hi})")
    regions = tuple(regions)
    rng = np.random.default_rng(seed)
    dims = [(label, name) for label in regions for name in PARAMETERS]
    values = {}
    for dim in dims:
        lo, hi = ranges[dim[1]]
        strata = rng.permutation(n)
        u = rng.random(n)
        values[dim] = lo + (hi - lo) * (strata + u) / n
    samples = []
    for i in range(n):
        regs = {label: RegionParameters(*(float(values[(label, name)][i]) for name in PARAMETERS))
                for label in regions}
        samples.append(ParameterSample(i + 1, regs))
    return samples


def scores_to_weights(scores, sample_ids=None, floor: float = 0.0) -> LikelihoodWeights:
    """Scores at or below ``floor`` are non-behavioural (weight 0); the rest are normalised."""
    s = np.asarray(scores, dtype=np.float64)
    ids = tuple(range(1, s.size + 1)) if sample_ids is None else tuple(sample_ids)
    w = np.where(np.isfinite(s) & (s > floor), s - floor, 0.0)
    total = w.sum()
    if total <= 0:
        raise NumericalError("no behavioural parameter set: every score is at or below the floor")
    return LikelihoodWeights(ids, w / total, s)


def bayes_combine(prior: LikelihoodWeights, likelihood: LikelihoodWeights) -> LikelihoodWeights:
    if prior.sample_ids != likelihood.sample_ids:
        raise DataError("prior and likelihood refer to different samples")
    post = prior.weights * likelihood.weights
    total = post.sum()
    if total <= 0:
        raise NumericalError("posterior is zero for every sample")
    return LikelihoodWeights(prior.sample_ids, post / total)


def select_best(samples, combined: LikelihoodWeights) -> ParameterSample:
    """Highest-weight sample; ties go to the lowest sample id."""
    samples = list(samples)
    if not samples:
        raise DataError("no samples to choose from")
    weight = dict(zip(combined.sample_ids, combined.weights.tolist()))
    return max(samples, key=lambda s: (weight.get(s.sample_id, 0.0), -s.sample_id))


def apply_sample(domain: ModelDomain, sample: ParameterSample) -> ModelDomain:
    """Domain with the sample's roughness and channel depth law applied per region."""
    labels = sorted(sample.regions)
    if domain.region_mask is None or len(labels) == 1:
        p = sample.regions[labels[0]]
        channel = domain.channel
        if channel is not None:
            channel = channel.with_depth_law(p.r_ch, p.p_ch).with_roughness(p.n_ch)
        return replace(domain, channel=channel, n_fp=p.n_fp)
    missing = set(domain.regions()) - set(labels)
    if missing:
        raise DataError(f"sample has no parameters for regions {sorted(missing)}")
    channel = domain.channel
    if channel is not None:
        cell_region = domain.region_of_cells(channel.cells)
        fallback = sample.regions[labels[0]]
        per = [sample.regions.get(int(k), fallback) for k in cell_region]
        r = np.array([p.r_ch for p in per])
        pp = np.array([p.p_ch for p in per])
        n = np.array([p.n_ch for p in per])
        channel = channel.with_depth_law(r, pp).with_roughness(n)
    return replace(domain, channel=channel, n_fp={k: p.n_fp for k, p in sample.regions.items()})


@dataclass
class ObservedSeries:
    """Observed gauge record; ``variable`` is ``level`` (m) or ``discharge`` (m3/s)."""

    gauge: str
    times: list
    values: np.ndarray
    variable: str = "level"


@dataclass
class CalibrationProblem:
    domain: ModelDomain
    inflows: dict  # location -> Hydrograph
    outlets: list
    gauges: dict
    duration: float
    observed: list = field(default_factory=list)
    reference_extent: BinaryMap | None = None
    sim_config: SimConfig = field(default_factory=SimConfig)
    wet_threshold: float = 0.10


@dataclass(frozen=True)
class SampleResult:
    sample: ParameterSample
    kge: dict
    csi: float | None
    error: str | None = None


def evaluate_sample(problem: CalibrationProblem, sample: ParameterSample) -> SampleResult:
    try:
        domain = apply_sample(problem.domain, sample)
        forcing = BoundaryForcing([Inflow(loc, h) for loc, h in problem.inflows.items()],
                                  [o if isinstance(o, Outlet) else Outlet(o) for o in problem.outlets])
        out = simulate(domain, forcing, problem.duration, problem.gauges, problem.sim_config)
    except FloodTwinError as exc:
        return SampleResult(sample, {}, None, str(exc))
    scores = {}
    start = out.start or datetime(1970, 1, 1)
    for obs in problem.observed:
        g = out.gauges[obs.gauge]
        sim = g.level if obs.variable == "level" else g.discharge
        ot = [(t - start).total_seconds() for t in obs.times]
        try:
            scores[obs.gauge] = kge(SeriesPair.sampled(ot, obs.values, g.times, sim)).kge
        except (NumericalError, DataError):
            scores[obs.gauge] = float("nan")
    score_csi = None
    if problem.reference_extent is not None:
        sim_ext = binarize_depth(out.max_depth, problem.wet_threshold)
        try:
            score_csi = csi(contingency(sim_ext, problem.reference_extent))
        except NumericalError:
            score_csi = 0.0
    return SampleResult(sample, scores, score_csi)


def _evaluate(args):
    return evaluate_sample(*args)


@dataclass
class CalibrationResult:
    results: list
    datasets: list
    combined: LikelihoodWeights
    best: ParameterSample


def calibrate(problem: CalibrationProblem, samples, order=None, workers: int = 1) -> CalibrationResult:
    """Score every sample and combine the datasets in ``order``.

    Datasets are named by gauge, plus ``"extent"`` for the reference map; by
    default gauges come first in the order given, then the extent. Starting
    from a uniform prior, each dataset's weights update the running posterior.
    """
    samples = list(samples)
    jobs = [(problem, s) for s in samples]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_evaluate, jobs))
    else:
        results = [_evaluate(j) for j in jobs]
    for r in results:
        if r.error:
            log.warning("sample %d failed: %s", r.sample.sample_id, r.error)

    if order is None:
        order = [o.gauge for o in problem.observed]
        if problem.reference_extent is not None:
            order.append("extent")
    ids = tuple(s.sample_id for s in samples)
    posterior = LikelihoodWeights.uniform(ids)
    for name in order:
        if name == "extent":
            scores = [r.csi if r.csi is not None else float("nan") for r in results]
        else:
            scores = [r.kge.get(name, float("nan")) for r in results]
        posterior = bayes_combine(posterior, scores_to_weights(scores, ids))
    return CalibrationResult(results, list(order), posterior, select_best(samples, posterior))


def write_results_csv(result: CalibrationResult, path) -> None:
    gauges = [d for d in result.datasets if d != "extent"]
    weight = dict(zip(result.combined.sample_ids, result.combined.weights.tolist()))
    first = result.results[0].sample.flat() if result.results else {}
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["sample_id", *first, *(f"kge_{g}" for g in gauges), "csi", "combined_weight"])
        for r in result.results:
            row = [r.sample.sample_id, *(repr(v) for v in r.sample.flat().values())]
            row += [repr(r.kge.get(g, float("nan"))) for g in gauges]
            row += ["" if r.csi is None else repr(r.csi), repr(weight[r.sample.sample_id])]
            w.writerow(row)
