"""Verification scores: RMSE, NSE, KGE for series and CSI for flood extents."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DataError, GridMismatchError, NumericalError
from .raster import BinaryMap, Raster

# contingency label legend
TN, TP, FN, FP, EXCLUDED = 0, 1, 2, 3, 255
LEGEND = {"TN": TN, "TP": TP, "FN": FN, "FP": FP, "excluded": EXCLUDED}


@dataclass(frozen=True)
class SeriesPair:
    observed: np.ndarray
    simulated: np.ndarray
    times: np.ndarray | None = None

    def __post_init__(self):
        o = np.asarray(self.observed, dtype=np.float64)
        s = np.asarray(self.simulated, dtype=np.float64)
        if o.shape != s.shape or o.ndim != 1:
            raise DataError(f"series length mismatch: {o.shape} vs {s.shape}")
        if o.size < 2:
            raise DataError("need at least two paired values")
        object.__setattr__(self, "observed", o)
        object.__setattr__(self, "simulated", s)

    @classmethod
    def sampled(cls, obs_times, observed, sim_times, simulated) -> SeriesPair:
        """Pair observations with the simulation linearly interpolated to their times.

        Times are numbers (e.g. seconds); simulated values are held constant
        beyond the ends of the simulated series.
        """
        st = np.asarray(sim_times, dtype=np.float64)
        if np.any(np.diff(st) <= 0):
            raise DataError("simulated times must be strictly increasing")
        ot = np.asarray(obs_times, dtype=np.float64)
        return cls(np.asarray(observed, dtype=np.float64), np.interp(ot, st, simulated), ot)


def _pair(obs, sim=None) -> SeriesPair:
    if isinstance(obs, SeriesPair):
        return obs
    return SeriesPair(obs, sim)


def rmse(obs, sim=None) -> float:
    p = _pair(obs, sim)
    return math.sqrt(float(np.mean((p.simulated - p.observed) ** 2)))


def nse(obs, sim=None) -> float:
    p = _pair(obs, sim)
    # ptp rather than the variance: the mean of equal floats can be off by an ulp
    if np.ptp(p.observed) == 0:
        raise NumericalError("NSE undefined: observed series is constant")
    denom = float(np.sum((p.observed - p.observed.mean()) ** 2))
    return 1.0 - float(np.sum((p.simulated - p.observed) ** 2)) / denom


@dataclass(frozen=True)
class KGE:
    kge: float
    r: float
    beta: float
    gamma: float

    def __iter__(self):
        return iter((self.kge, self.r, self.beta, self.gamma))


def kge(obs, sim=None) -> KGE:
    """Kling-Gupta efficiency with correlation, bias ratio and CV ratio.

    Population (1/n) moments throughout.
    """
    p = _pair(obs, sim)
    o, s = p.observed, p.simulated
    mo, ms = o.mean(), s.mean()
    so, ss = o.std(), s.std()
    if np.ptp(o) == 0:
        raise NumericalError("KGE undefined: observed series has zero variance (r, gamma)")
    if np.ptp(s) == 0:
        raise NumericalError("KGE undefined: simulated series has zero variance (r, gamma)")
    if mo == 0:
        raise NumericalError("KGE undefined: observed mean is zero (beta, gamma)")
    if ms == 0:
        raise NumericalError("KGE undefined: simulated mean is zero (gamma)")
    r = float(np.mean((o - mo) * (s - ms)) / (so * ss))
    beta = float(ms / mo)
    gamma = float((ss / ms) / (so / mo))
    value = 1.0 - math.sqrt((1 - r) ** 2 + (1 - beta) ** 2 + (1 - gamma) ** 2)
    return KGE(value, r, beta, gamma)


@dataclass(frozen=True)
class ContingencyMap:
    labels: Raster = field(repr=False)
    tp: int
    fn: int
    fp: int
    tn: int

    @property
    def excluded(self) -> int:
        return int(np.count_nonzero(self.labels.values == EXCLUDED))


def contingency(sim: BinaryMap, obs: BinaryMap, exclusion: BinaryMap | None = None) -> ContingencyMap:
    """Pixelwise hit/miss/false-alarm/correct-negative map.

    Pixels invalid in either map, or wet in ``exclusion``, are labelled excluded.
    """
    if sim.spec != obs.spec:
        raise GridMismatchError("simulated and observed extents are not aligned")
    valid = sim.valid & obs.valid
    if exclusion is not None:
        if exclusion.spec != sim.spec:
            raise GridMismatchError("exclusion mask is not aligned")
        valid &= ~(exclusion.wet & exclusion.valid)
    s, o = sim.wet, obs.wet
    labels = np.full(sim.spec.shape, EXCLUDED, dtype=np.float64)
    labels[valid & s & o] = TP
    labels[valid & ~s & o] = FN
    labels[valid & s & ~o] = FP
    labels[valid & ~s & ~o] = TN
    counts = [int(np.count_nonzero(labels == k)) for k in (TP, FN, FP, TN)]
    spec = sim.spec
    if spec.nodata in (TN, TP, FN, FP):
        # keep label codes distinct from the file's nodata marker
        spec = replace(spec, nodata=-9999.0)
    return ContingencyMap(Raster(spec, labels), *counts)


def csi(c: ContingencyMap) -> float:
    denom = c.tp + c.fp + c.fn
    if denom == 0:
        raise NumericalError("CSI undefined: both extents are entirely dry")
    return c.tp / denom


def score_series(obs, sim) -> dict:
    """RMSE, NSE and KGE components; undefined scores are returned as None."""
    p = _pair(obs, sim)
    out = {"n": int(p.observed.size), "rmse": rmse(p)}
    try:
        out["nse"] = nse(p)
    except NumericalError:
        out["nse"] = None
    try:
        k = kge(p)
        out.update(kge=k.kge, r=k.r, beta=k.beta, gamma=k.gamma)
    except NumericalError:
        out.update(kge=None, r=None, beta=None, gamma=None)
    return out
