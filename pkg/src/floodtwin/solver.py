"""Raster flood solver: local-inertial floodplain flow with a 1-D sub-grid channel.

The prognostic variable is the water volume held in each raster cell. On
floodplain cells depth is ``volume / dx**2``. A channel cell stores water in a
rectangular channel of width ``W`` up to its bank; any volume beyond bankfull
spreads over the cell above the bank elevation, so channel and floodplain at
that cell always share one water surface.

Fluxes use the explicit momentum update with semi-implicit friction,

    q_new = (q - g h_f dt dS/dx) / (1 + g dt n^2 |q| / h_f^(7/3))

on every floodplain face, and its rectangular-section analogue on every channel
link. Outgoing volume from a cell is limited to the volume it holds, which keeps
depths non-negative without breaking conservation.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta

import numpy as np

from .errors import DataError, NumericalError
from .hydrograph import Hydrograph
from .raster import GridSpec, Raster, require_aligned

G = 9.81
MIN_SLOPE = 1e-5


def channel_depth_from_width(width, r_ch, p_ch):
    """Bankfull depth from the power law ``D = r_ch * W**p_ch``."""
    w = np.asarray(width, dtype=np.float64)
    if np.any(w <= 0):
        raise DataError("channel width must be positive")
    if np.any(np.asarray(r_ch) <= 0):
        raise DataError("r_ch must be positive")
    d = np.asarray(r_ch, dtype=np.float64) * w ** np.asarray(p_ch, dtype=np.float64)
    return float(d) if d.ndim == 0 else d


@dataclass(frozen=True, eq=False)
class ChannelNetwork:
    """Ordered chain of channel cells, upstream first.

    ``n_ch`` may be a scalar or one value per cell.
    """

    cells: np.ndarray
    width: np.ndarray
    bed: np.ndarray
    bank: np.ndarray
    n_ch: np.ndarray | float = 0.03

    def __post_init__(self):
        cells = np.asarray(self.cells, dtype=np.int64).reshape(-1, 2)
        n = len(cells)
        width = np.asarray(self.width, dtype=np.float64).reshape(-1)
        bed = np.asarray(self.bed, dtype=np.float64).reshape(-1)
        bank = np.asarray(self.bank, dtype=np.float64).reshape(-1)
        n_ch = np.broadcast_to(np.asarray(self.n_ch, dtype=np.float64), (n,)).copy()
        if n == 0:
            raise DataError("channel network is empty")
        if not (width.size == bed.size == bank.size == n):
            raise DataError("channel arrays must have one entry per cell")
        if np.any(width <= 0):
            raise DataError("channel widths must be positive")
        if np.any(bank < bed):
            j = int(np.argmax(bank < bed))
            raise DataError(f"channel cell {j}: bank elevation below bed")
        if np.any(n_ch <= 0):
            raise DataError("channel Manning's n must be positive")
        steps = np.abs(np.diff(cells, axis=0)).sum(axis=1)
        if np.any(steps != 1):
            j = int(np.argmax(steps != 1))
            raise DataError(f"channel cells {j} and {j + 1} are not 4-neighbours")
        if len({tuple(c) for c in cells.tolist()}) != n:
            raise DataError("channel visits a cell twice")
        for name, arr in (("cells", cells), ("width", width), ("bed", bed), ("bank", bank), ("n_ch", n_ch)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def __len__(self):
        return len(self.cells)

    @property
    def depth(self) -> np.ndarray:
        return self.bank - self.bed

    def with_depth_law(self, r_ch, p_ch) -> ChannelNetwork:
        """Copy with beds reset to ``bank - r_ch * W**p_ch`` (scalars or per-cell arrays)."""
        return replace(self, bed=self.bank - channel_depth_from_width(self.width, r_ch, p_ch))

    def with_roughness(self, n_ch) -> ChannelNetwork:
        return replace(self, n_ch=n_ch)


@dataclass(frozen=True, eq=False)
class ModelDomain:
    """DEM, channel and roughness. ``n_fp`` is a scalar or ``{region_label: n}``
    used together with ``region_mask``."""

    dem: Raster
    channel: ChannelNetwork | None = None
    n_fp: float | dict = 0.06
    region_mask: Raster | None = None
    g: float = G

    def __post_init__(self):
        if self.region_mask is not None:
            require_aligned(self.dem.spec, self.region_mask.spec)
        if isinstance(self.n_fp, dict):
            if self.region_mask is None:
                raise DataError("per-region n_fp requires a region mask")
            labels = set(self.regions())
            missing = labels - {int(k) for k in self.n_fp}
            if missing:
                raise DataError(f"no floodplain roughness for regions {sorted(missing)}")
        if self.channel is not None:
            r, c = self.channel.cells[:, 0], self.channel.cells[:, 1]
            nr, nc = self.dem.spec.shape
            if r.min() < 0 or c.min() < 0 or r.max() >= nr or c.max() >= nc:
                raise DataError("channel cell outside the DEM")
            if not self.dem.valid[r, c].all():
                raise DataError("channel cell on a nodata DEM cell")

    @property
    def spec(self) -> GridSpec:
        return self.dem.spec

    def regions(self) -> list[int]:
        if self.region_mask is None:
            return []
        m = self.region_mask
        return sorted({int(v) for v in np.unique(m.values[m.valid])})

    def floodplain_roughness(self) -> np.ndarray:
        if not isinstance(self.n_fp, dict):
            return np.full(self.spec.shape, float(self.n_fp))
        out = np.full(self.spec.shape, np.nan)
        labels = self.region_mask.values
        for k, v in self.n_fp.items():
            out[labels == int(k)] = float(v)
        # unlabeled cells take the first region's value
        first = float(self.n_fp[min(self.n_fp, key=int)])
        return np.where(np.isnan(out), first, out)

    def region_of_cells(self, cells: np.ndarray) -> np.ndarray | None:
        if self.region_mask is None:
            return None
        return self.region_mask.values[cells[:, 0], cells[:, 1]].astype(np.int64)


@dataclass(frozen=True)
class Inflow:
    """``location`` is a channel cell index (int) or a raster cell ``(row, col)``."""

    location: int | tuple
    hydrograph: Hydrograph


@dataclass(frozen=True)
class Outlet:
    """Free (normal-flow) outflow. ``slope`` defaults to the local bed slope."""

    location: int | tuple
    slope: float | None = None


@dataclass(frozen=True)
class BoundaryForcing:
    inflows: tuple = ()
    outlets: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "inflows", tuple(self.inflows))
        object.__setattr__(self, "outlets", tuple(self.outlets))

    @property
    def start(self) -> datetime | None:
        if not self.inflows:
            return None
        return min(i.hydrograph.start for i in self.inflows)

    def span(self) -> tuple[float, float]:
        """Seconds (relative to ``start``) during which every inflow is defined."""
        if not self.inflows:
            return (0.0, math.inf)
        t0 = self.start
        lo, hi = -math.inf, math.inf
        for inflow in self.inflows:
            off = (inflow.hydrograph.start - t0).total_seconds()
            a, b = inflow.hydrograph.span
            lo, hi = max(lo, off + a), min(hi, off + b)
        return lo, hi


@dataclass(frozen=True)
class SimConfig:
    cfl: float = 0.7
    dt_min: float = 0.01
    dt_max: float = 10.0
    output_interval: float = 900.0
    min_flow_depth: float = 1e-6
    mass_tolerance: float = 1e-6

    def __post_init__(self):
        if not 0 < self.cfl <= 1:
            raise DataError(f"CFL coefficient must lie in (0, 1], got {self.cfl}")
        if not 0 < self.dt_min <= self.dt_max:
            raise DataError("need 0 < dt_min <= dt_max")
        if self.output_interval <= 0:
            raise DataError("output interval must be positive")


@dataclass(frozen=True)
class FlowState:
    """Cell volumes (m3), face unit discharges (m2/s), channel link flows (m3/s),
    the clock, and cumulative boundary volumes for the mass ledger."""

    volume: np.ndarray = field(repr=False)
    qx: np.ndarray = field(repr=False)
    qy: np.ndarray = field(repr=False)
    qc: np.ndarray = field(repr=False)
    t: float = 0.0
    inflow_volume: float = 0.0
    outflow_volume: float = 0.0

    def depth(self, domain: ModelDomain) -> Raster:
        """Water depth above the DEM (bank level on channel cells)."""
        k = _kernel(domain)
        d = k.derive(self.volume)[1]
        return Raster(domain.spec, np.where(k.active, d, domain.spec.nodata))

    def water_surface(self, domain: ModelDomain) -> np.ndarray:
        return _kernel(domain).derive(self.volume)[0]

    def storage(self) -> float:
        return float(self.volume.sum())


@dataclass(frozen=True)
class GaugeSeries:
    name: str
    cell: tuple
    times: np.ndarray = field(repr=False)
    level: np.ndarray = field(repr=False)
    discharge: np.ndarray = field(repr=False)
    peak_level: float = float("nan")
    peak_discharge: float = float("nan")


@dataclass(frozen=True)
class MassBalance:
    inflow: float
    outflow: float
    initial_storage: float
    final_storage: float

    @property
    def error(self) -> float:
        return self.inflow - self.outflow - (self.final_storage - self.initial_storage)

    @property
    def relative_error(self) -> float:
        return abs(self.error) / max(self.inflow, 1e-12)


@dataclass(frozen=True)
class SimulationOutput:
    max_depth: Raster
    gauges: dict
    mass: MassBalance
    start: datetime | None
    steps: int
    mass_ok: bool = True
    final_state: FlowState | None = field(default=None, repr=False)


class _Kernel:
    """Precomputed geometry for one domain; all methods are pure."""

    def __init__(self, domain: ModelDomain):
        spec = domain.spec
        self.domain = domain
        self.dx = dx = spec.cellsize
        self.g = domain.g
        self.shape = spec.shape
        self.active = domain.dem.valid.copy()
        z = np.where(self.active, domain.dem.values, 0.0)
        n_fp = domain.floodplain_roughness()
        self.area = np.full(self.shape, dx * dx)

        ch = domain.channel
        self.has_channel = ch is not None
        if ch is not None:
            r, c = ch.cells[:, 0], ch.cells[:, 1]
            self.ch_r, self.ch_c = r, c
            z[r, c] = ch.bank
            self.ch_width = ch.width
            self.ch_bed = ch.bed
            self.ch_bank = ch.bank
            self.ch_n = ch.n_ch
            self.ch_depth = ch.bank - ch.bed
            self.ch_bankfull = ch.width * dx * self.ch_depth
            self.ch_top = dx * np.maximum(dx, ch.width)
            self.area[r, c] = self.ch_top
            self.ch_fp_width = np.maximum(dx - ch.width, 0.0)
            self.ch_n_fp = n_fp[r, c]
            # links j -> j+1
            self.lk_w = 0.5 * (ch.width[:-1] + ch.width[1:])
            self.lk_n = 0.5 * (ch.n_ch[:-1] + ch.n_ch[1:])
            self.lk_bed = np.maximum(ch.bed[:-1], ch.bed[1:])
            self.ch_index = {(int(a), int(b)): j for j, (a, b) in enumerate(ch.cells.tolist())}
        else:
            self.ch_index = {}
        self.z = z

        # faces between active cells; x faces (r, c)|(r, c+1), y faces (r, c)|(r+1, c)
        self.x_open = self.active[:, :-1] & self.active[:, 1:]
        self.y_open = self.active[:-1, :] & self.active[1:, :]
        self.zx = np.maximum(z[:, :-1], z[:, 1:])
        self.zy = np.maximum(z[:-1, :], z[1:, :])
        self.nx2 = (0.5 * (n_fp[:, :-1] + n_fp[:, 1:])) ** 2
        self.ny2 = (0.5 * (n_fp[:-1, :] + n_fp[1:, :])) ** 2
        self.n_fp = n_fp

    # -- geometry ----------------------------------------------------------------

    def derive(self, volume: np.ndarray):
        """Return (water surface, floodplain depth, channel depth or None)."""
        hfp = volume / self.area
        if not self.has_channel:
            return self.z + hfp, hfp, None
        r, c = self.ch_r, self.ch_c
        vc = volume[r, c]
        over = vc > self.ch_bankfull
        above = np.where(over, (vc - self.ch_bankfull) / self.ch_top, 0.0)
        hch = np.where(over, self.ch_depth + above, vc / (self.ch_width * self.dx))
        hfp[r, c] = above
        wse = self.z + hfp
        wse[r, c] = np.where(over, self.ch_bank + above, self.ch_bed + hch)
        return wse, hfp, hch

    def cell_of(self, location) -> tuple[int, int]:
        if isinstance(location, (int, np.integer)):
            if not self.has_channel:
                raise DataError("channel index given but the domain has no channel")
            n = len(self.ch_r)
            j = int(location)
            if j < 0:
                j += n
            if not 0 <= j < n:
                raise DataError(f"channel index {location} out of range")
            return int(self.ch_r[j]), int(self.ch_c[j])
        r, c = (int(v) for v in location)
        if not (0 <= r < self.shape[0] and 0 <= c < self.shape[1]) or not self.active[r, c]:
            raise DataError(f"cell {(r, c)} is outside the active domain")
        return r, c

    def outlet_rate(self, outlet: Outlet, hfp: np.ndarray, hch) -> float:
        """Normal-flow discharge (m3/s) leaving through ``outlet``."""
        r, c = self.cell_of(outlet.location)
        j = self.ch_index.get((r, c))
        slope = outlet.slope
        if slope is None:
            if j is not None and j > 0:
                slope = (self.ch_bed[j - 1] - self.ch_bed[j]) / self.dx
            else:
                nb = [self.z[rr, cc] for rr, cc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1))
                      if 0 <= rr < self.shape[0] and 0 <= cc < self.shape[1] and self.active[rr, cc]]
                slope = (max(nb) - self.z[r, c]) / self.dx if nb else MIN_SLOPE
        sq = math.sqrt(max(slope, MIN_SLOPE))
        h = float(hfp[r, c])
        if j is None:
            return self.dx * h ** (5.0 / 3.0) * sq / self.n_fp[r, c]
        w = self.ch_width[j]
        d = float(hch[j])
        area = w * d
        q = 0.0
        if d > 0:
            q = area * (area / (w + 2 * d)) ** (2.0 / 3.0) * sq / self.ch_n[j]
        if h > 0:
            q += self.ch_fp_width[j] * h ** (5.0 / 3.0) * sq / self.ch_n_fp[j]
        return q

    # -- momentum and continuity ------------------------------------------------

    def fluxes(self, state: FlowState, dt: float, min_depth: float):
        wse, _, hch = self.derive(state.volume)
        g, dx = self.g, self.dx
        with np.errstate(divide="ignore", invalid="ignore"):
            hf = np.maximum(wse[:, :-1], wse[:, 1:]) - self.zx
            wet = self.x_open & (hf > min_depth)
            slope = (wse[:, 1:] - wse[:, :-1]) / dx
            qx = (state.qx - g * hf * dt * slope) / (1 + g * dt * self.nx2 * np.abs(state.qx) / hf ** (7.0 / 3.0))
            qx = np.where(wet, qx, 0.0)

            hf = np.maximum(wse[:-1, :], wse[1:, :]) - self.zy
            wet = self.y_open & (hf > min_depth)
            slope = (wse[1:, :] - wse[:-1, :]) / dx
            qy = (state.qy - g * hf * dt * slope) / (1 + g * dt * self.ny2 * np.abs(state.qy) / hf ** (7.0 / 3.0))
            qy = np.where(wet, qy, 0.0)

            if self.has_channel and len(self.lk_w):
                w_ch = wse[self.ch_r, self.ch_c]
                hl = np.maximum(w_ch[:-1], w_ch[1:]) - self.lk_bed
                wet = hl > min_depth
                area = self.lk_w * hl
                radius = area / (self.lk_w + 2 * hl)
                slope = (w_ch[1:] - w_ch[:-1]) / dx
                qc = (state.qc - g * area * dt * slope) / (
                    1 + g * dt * self.lk_n ** 2 * np.abs(state.qc) / (area * radius ** (4.0 / 3.0)))
                qc = np.where(wet, qc, 0.0)
            else:
                qc = state.qc.copy()
        return qx, qy, qc

    def transport(self, state: FlowState, qx, qy, qc, dt: float):
        """Limit outgoing volume per cell to the stored volume and update volumes."""
        dx = self.dx
        vol = state.volume
        fx = qx * (dx * dt)
        fy = qy * (dx * dt)
        fc = qc * dt

        out = np.zeros(self.shape)
        out[:, :-1] += np.maximum(fx, 0.0)
        out[:, 1:] += np.maximum(-fx, 0.0)
        out[:-1, :] += np.maximum(fy, 0.0)
        out[1:, :] += np.maximum(-fy, 0.0)
        if fc.size:
            r, c = self.ch_r, self.ch_c
            np.add.at(out, (r[:-1], c[:-1]), np.maximum(fc, 0.0))
            np.add.at(out, (r[1:], c[1:]), np.maximum(-fc, 0.0))

        with np.errstate(divide="ignore", invalid="ignore"):
            factor = np.where(out > vol, vol / out, 1.0)
        sx = np.where(fx > 0, factor[:, :-1], factor[:, 1:])
        sy = np.where(fy > 0, factor[:-1, :], factor[1:, :])
        fx = fx * sx
        fy = fy * sy
        qx = qx * sx
        qy = qy * sy
        if fc.size:
            sc = np.where(fc > 0, factor[r[:-1], c[:-1]], factor[r[1:], c[1:]])
            fc = fc * sc
            qc = qc * sc

        new = vol.copy()
        new[:, :-1] -= fx
        new[:, 1:] += fx
        new[:-1, :] -= fy
        new[1:, :] += fy
        if fc.size:
            np.add.at(new, (r[:-1], c[:-1]), -fc)
            np.add.at(new, (r[1:], c[1:]), fc)
        # the limiter can leave round-off sized negatives
        np.maximum(new, 0.0, out=new)
        return new, qx, qy, qc


@functools.lru_cache(maxsize=16)
def _kernel(domain: ModelDomain) -> _Kernel:
    return _Kernel(domain)


def initial_state(domain: ModelDomain, depth: Raster | np.ndarray | None = None,
                  water_surface: np.ndarray | float | None = None) -> FlowState:
    """Build a state from a floodplain depth field or a water-surface elevation.

    With ``water_surface``, every active cell (channel included) is filled up to
    that level where it lies below it.
    """
    k = _kernel(domain)
    vol = np.zeros(k.shape)
    if water_surface is not None:
        wse = np.broadcast_to(np.asarray(water_surface, dtype=np.float64), k.shape)
        vol = np.maximum(wse - k.z, 0.0) * k.area
        if k.has_channel:
            r, c = k.ch_r, k.ch_c
            level = wse[r, c]
            in_bank = np.clip(level - k.ch_bed, 0.0, k.ch_depth) * k.ch_width * k.dx
            vol[r, c] = in_bank + np.maximum(level - k.ch_bank, 0.0) * k.ch_top
    elif depth is not None:
        d = depth.filled(0.0) if isinstance(depth, Raster) else np.asarray(depth, dtype=np.float64)
        if np.any(d < 0):
            raise DataError("initial depth must be non-negative")
        vol = d * k.area
        if k.has_channel:
            vol[k.ch_r, k.ch_c] = k.ch_bankfull + d[k.ch_r, k.ch_c] * k.ch_top
    vol = np.where(k.active, vol, 0.0)
    nr, nc = k.shape
    nlinks = max(len(domain.channel) - 1, 0) if domain.channel is not None else 0
    return FlowState(vol, np.zeros((nr, nc - 1)), np.zeros((nr - 1, nc)), np.zeros(nlinks))


def stable_dt(state: FlowState, cellsize: float, cfl: float = 0.7, dt_min: float = 0.01,
              dt_max: float = 10.0, g: float = G, domain: ModelDomain | None = None,
              h_max: float | None = None) -> float:
    """CFL time step ``cfl * dx / sqrt(g * h_max)``, clamped to [dt_min, dt_max].

    ``h_max`` is the deepest floodplain or channel water; it is computed from
    ``state`` (which requires ``domain``) unless given.
    """
    if not 0 < cfl <= 1:
        raise DataError(f"CFL coefficient must lie in (0, 1], got {cfl}")
    if h_max is None:
        if domain is None:
            raise DataError("stable_dt needs the domain to evaluate water depths")
        _, hfp, hch = _kernel(domain).derive(state.volume)
        h_max = float(hfp.max())
        if hch is not None and hch.size:
            h_max = max(h_max, float(hch.max()))
    if h_max <= 0:
        return dt_max
    return min(max(cfl * cellsize / math.sqrt(g * h_max), dt_min), dt_max)


def _check_finite(arr: np.ndarray, what: str, t: float):
    if not np.all(np.isfinite(arr)):
        idx = np.argwhere(~np.isfinite(arr))[0]
        raise NumericalError(f"non-finite {what} at index {tuple(int(i) for i in idx)} (t={t:.3f} s)")


def step_floodplain(state: FlowState, domain: ModelDomain, dt: float, min_flow_depth: float = 1e-6) -> FlowState:
    """Advance floodplain faces and channel links by ``dt`` and update cell volumes."""
    k = _kernel(domain)
    _check_finite(state.volume, "volume", state.t)
    qx, qy, qc = k.fluxes(state, dt, min_flow_depth)
    for arr, what in ((qx, "x-face discharge"), (qy, "y-face discharge"), (qc, "channel discharge")):
        _check_finite(arr, what, state.t)
    vol, qx, qy, qc = k.transport(state, qx, qy, qc, dt)
    return replace(state, volume=vol, qx=qx, qy=qy, qc=qc, t=state.t + dt)


def apply_boundaries(state: FlowState, domain: ModelDomain, forcing: BoundaryForcing,
                     t: float, dt: float, outlet_depths=None) -> FlowState:
    """Add inflow volume over ``[t, t + dt]`` and drain outlets at normal-flow rate.

    Inflow uses the hydrograph at the step midpoint, which integrates piecewise
    linear hydrographs exactly within a segment. ``outlet_depths`` optionally
    passes precomputed ``(floodplain depth, channel depth)`` for the outlets.
    """
    k = _kernel(domain)
    lo, hi = forcing.span()
    if t < lo - 1e-9 or t + dt > hi + 1e-9:
        raise DataError(f"time window [{t}, {t + dt}] s outside forcing span [{lo}, {hi}]")
    vol = state.volume.copy()
    added = 0.0
    t0 = forcing.start
    for inflow in forcing.inflows:
        r, c = k.cell_of(inflow.location)
        off = (inflow.hydrograph.start - t0).total_seconds()
        tm = min(max(t + 0.5 * dt - off, inflow.hydrograph.span[0]), inflow.hydrograph.span[1])
        v = inflow.hydrograph.at(tm) * dt
        vol[r, c] += v
        added += v
    removed = 0.0
    if forcing.outlets:
        if outlet_depths is None:
            _, hfp, hch = k.derive(state.volume)
        else:
            hfp, hch = outlet_depths
        for outlet in forcing.outlets:
            r, c = k.cell_of(outlet.location)
            v = min(k.outlet_rate(outlet, hfp, hch) * dt, vol[r, c])
            vol[r, c] -= v
            removed += v
    return replace(state, volume=vol, inflow_volume=state.inflow_volume + added,
                   outflow_volume=state.outflow_volume + removed)


def simulate(domain: ModelDomain, forcing: BoundaryForcing, duration: float,
             gauges=(), config: SimConfig | None = None, initial: FlowState | None = None) -> SimulationOutput:
    """Run the solver for ``duration`` seconds.

    ``gauges`` is a sequence of ``(name, (row, col))`` pairs or a mapping. Gauge
    water level and discharge are recorded every ``config.output_interval``
    seconds; peaks are tracked at every step.
    """
    config = config or SimConfig()
    if not duration > 0:
        raise DataError("duration must be positive")
    lo, hi = forcing.span()
    if lo > 0 or hi < duration:
        raise DataError(f"forcing covers [{lo}, {hi}] s but the run needs [0, {duration}] s")
    k = _kernel(domain)
    state = initial if initial is not None else initial_state(domain)
    gauge_list = list(gauges.items()) if isinstance(gauges, dict) else list(gauges)
    gauge_cells = [k.cell_of(loc) for _, loc in gauge_list]
    gauge_links = [_gauge_link(k, cell) for cell in gauge_cells]
    outlet_flow = {}

    storage0 = state.storage()
    times: list[float] = []
    levels: list[list[float]] = []
    flows: list[list[float]] = []
    peak_level = np.full(len(gauge_list), -np.inf)
    peak_flow = np.full(len(gauge_list), -np.inf)
    max_depth = np.zeros(k.shape)
    next_out = 0.0
    steps = 0

    def record(wse, hfp, hch, st):
        lv, fl = [], []
        for (r, c), link in zip(gauge_cells, gauge_links):
            lv.append(float(wse[r, c]))
            fl.append(_gauge_discharge(k, st, hfp, hch, r, c, link, outlet_flow))
        return lv, fl

    while True:
        wse, hfp, hch = k.derive(state.volume)
        np.maximum(max_depth, hfp, out=max_depth)
        lv, fl = record(wse, hfp, hch, state)
        np.maximum(peak_level, lv, out=peak_level)
        np.maximum(peak_flow, fl, out=peak_flow)
        if state.t >= next_out - 1e-9 * config.output_interval:
            times.append(state.t)
            levels.append(lv)
            flows.append(fl)
            next_out += config.output_interval
        if state.t >= duration:
            break
        h_max = float(hfp.max())
        if hch is not None and hch.size:
            h_max = max(h_max, float(hch.max()))
        dt = stable_dt(state, k.dx, config.cfl, config.dt_min, config.dt_max, k.g, h_max=h_max)
        dt = min(dt, next_out - state.t, duration - state.t)
        t = state.t
        stepped = step_floodplain(state, domain, dt, config.min_flow_depth)
        for outlet in forcing.outlets:
            outlet_flow[k.cell_of(outlet.location)] = k.outlet_rate(outlet, hfp, hch)
        state = apply_boundaries(stepped, domain, forcing, t, dt, outlet_depths=(hfp, hch))
        steps += 1

    mass = MassBalance(state.inflow_volume, state.outflow_volume, storage0, state.storage())
    ok = abs(mass.error) <= config.mass_tolerance * max(mass.inflow, 1e-12)
    series = {}
    lv_arr = np.array(levels).reshape(len(times), len(gauge_list))
    fl_arr = np.array(flows).reshape(len(times), len(gauge_list))
    for i, (name, _) in enumerate(gauge_list):
        series[name] = GaugeSeries(name, gauge_cells[i], np.array(times), lv_arr[:, i], fl_arr[:, i],
                                   float(peak_level[i]), float(peak_flow[i]))
    depth = np.where(k.active, max_depth, domain.spec.nodata)
    return SimulationOutput(Raster(domain.spec, depth), series, mass, forcing.start, steps, ok, state)


def _gauge_link(k: _Kernel, cell):
    j = k.ch_index.get(cell)
    if j is None:
        return None
    n = len(k.ch_r)
    return j if j < n - 1 else -1


def _gauge_discharge(k, state, hfp, hch, r, c, link, outlet_flow) -> float:
    if link is None:
        # floodplain cell: magnitude of the cell-centred unit discharge times the cell width
        qx = state.qx[r, max(c - 1, 0):c + 1]
        qy = state.qy[max(r - 1, 0):r + 1, c]
        ux = float(qx.mean()) if qx.size else 0.0
        uy = float(qy.mean()) if qy.size else 0.0
        return k.dx * math.hypot(ux, uy)
    if link >= 0:
        return float(state.qc[link]) if state.qc.size else 0.0
    if (r, c) in outlet_flow:
        return float(outlet_flow[(r, c)])
    return float(state.qc[-1]) if state.qc.size else 0.0


def gauge_times(output: SimulationOutput, name: str) -> list[datetime]:
    start = output.start or datetime(1970, 1, 1)
    return [start + timedelta(seconds=float(s)) for s in output.gauges[name].times]
