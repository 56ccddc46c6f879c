"""Synthetic valley domains and events for twin experiments and tests."""
from __future__ import annotations

from dataclasses import dataclass
from datetime import datetime

import numpy as np

from .hydrograph import Hydrograph
from .raster import GridSpec, Raster
from .scenario import RatingTable
from .solver import ChannelNetwork, ModelDomain, Outlet

EVENT_START = datetime(2021, 7, 14)


@dataclass
class ValleySetup:
    domain: ModelDomain
    base_event: dict
    inflow_locations: dict
    outlets: list
    gauges: dict
    rating: RatingTable
    anchor: str
    duration: float


def valley_domain(nrows: int = 21, ncols: int = 60, cellsize: float = 20.0, slope: float = 1e-3,
                  side_slope: float = 0.02, channel_width: float = 10.0, channel_depth: float = 1.0,
                  n_ch: float = 0.035, n_fp: float = 0.06, seed: int | None = 0,
                  roughness_amp: float = 0.3) -> ModelDomain:
    """Straight valley draining east with a channel along the middle row.

    Ground rises linearly away from the channel (``side_slope``) and falls
    downstream (``slope``). ``roughness_amp`` adds seeded micro-topography.
    """
    spec = GridSpec(ncols, nrows, 0.0, 0.0, cellsize)
    mid = nrows // 2
    cols = np.arange(ncols)
    rows = np.arange(nrows)
    along = slope * cellsize * (ncols - 1 - cols)
    across = side_slope * cellsize * np.abs(rows - mid)
    z = 10.0 + along[None, :] + across[:, None]
    if roughness_amp > 0:
        rng = np.random.default_rng(seed)
        z = z + rng.uniform(0.0, roughness_amp, z.shape)
    cells = np.column_stack([np.full(ncols, mid), cols])
    bank = z[mid, :].copy()
    channel = ChannelNetwork(cells, np.full(ncols, channel_width), bank - channel_depth, bank, n_ch)
    return ModelDomain(Raster(spec, z), channel, n_fp)


def flood_wave(peak: float, base: float, rise: float, hold: float, fall: float, station: str,
               start: datetime = EVENT_START, tail: float = 0.0) -> Hydrograph:
    """Trapezoidal hydrograph: base flow, linear rise to ``peak``, plateau, recession."""
    t = np.array([0.0, rise, rise + hold, rise + hold + fall, rise + hold + fall + max(tail, 1.0)])
    q = np.array([base, peak, peak, base, base])
    return Hydrograph(start, t, q, station)


def default_rating() -> RatingTable:
    """Return-period table for the synthetic anchor and tributary stations."""
    periods = [2, 5, 10, 20, 50, 100]
    return RatingTable({
        "main": list(zip(periods, [40.0, 60.0, 75.0, 90.0, 110.0, 125.0])),
        "trib": list(zip(periods, [8.0, 13.0, 17.0, 21.0, 27.0, 31.0])),
    })


def valley_setup(nrows: int = 21, ncols: int = 60, cellsize: float = 20.0, duration: float = 5400.0,
                 **domain_kw) -> ValleySetup:
    """Valley with a main inflow at the upstream end, a tributary halfway down,
    a free outlet at the downstream end, and two channel gauges."""
    domain = valley_domain(nrows, ncols, cellsize, **domain_kw)
    rise, hold = duration / 3, duration / 3
    fall = duration - rise - hold
    base = {
        "main": flood_wave(100.0, 2.0, rise, hold, fall, "main", tail=duration),
        "trib": flood_wave(20.0, 0.5, rise, hold, fall, "trib", tail=duration),
    }
    n = len(domain.channel)
    slope = domain_kw.get("slope", 1e-3)
    # free outflow across the whole downstream edge
    edge = [Outlet((r, ncols - 1), slope=slope) for r in range(nrows) if r != nrows // 2]
    return ValleySetup(
        domain=domain,
        base_event=base,
        inflow_locations={"main": 0, "trib": n // 2},
        outlets=[Outlet(n - 1, slope=slope)] + edge,
        gauges={"upper": n // 4, "lower": (3 * n) // 4},
        rating=default_rating(),
        anchor="main",
        duration=duration,
    )


def write_valley_project(directory, ladder=None, duration: float = 5400.0, twin: dict | None = None,
                         pf: dict | None = None, **domain_kw) -> str:
    """Write the synthetic valley as an on-disk project and return its config path.

    The project holds ``dem.asc``, ``channel.csv``, base-event hydrographs, a
    rating table, ``domain.json`` and ``config.json``; ``ladder`` defaults to
    20 scenarios with anchor peaks 10..200 m3/s.
    """
    import csv
    import json
    import os

    from .hydrograph import write_hydrograph_csv
    from .raster import write_ascii_grid

    os.makedirs(os.path.join(directory, "hydrographs"), exist_ok=True)
    setup = valley_setup(duration=duration, **domain_kw)
    domain = setup.domain
    write_ascii_grid(domain.dem, os.path.join(directory, "dem.asc"))
    ch = domain.channel
    with open(os.path.join(directory, "channel.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["row", "col", "width_m", "bed_elev_m", "bank_elev_m", "n_ch"])
        for (r, c), wd, bed, bank, n in zip(ch.cells.tolist(), ch.width.tolist(), ch.bed.tolist(),
                                            ch.bank.tolist(), np.broadcast_to(ch.n_ch, ch.width.shape).tolist()):
            w.writerow([r, c, repr(wd), repr(bed), repr(bank), repr(n)])
    with open(os.path.join(directory, "rating.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["station", "return_period_years", "peak_discharge_m3s"])
        for station in setup.rating.stations:
            for t, q in zip(*setup.rating.knots(station)):
                w.writerow([station, repr(float(t)), repr(float(q))])
    inflows = []
    for station, hydro in setup.base_event.items():
        name = f"hydrographs/{station}.csv"
        write_hydrograph_csv(hydro, os.path.join(directory, name))
        inflows.append({"station": station, "channel_index": setup.inflow_locations[station], "hydrograph": name})

    def loc(x):
        return {"channel_index": int(x)} if isinstance(x, (int, np.integer)) else {"cell": [int(v) for v in x]}

    domain_json = {
        "dem": "dem.asc",
        "channel": "channel.csv",
        "parameters": {"n_fp": float(domain.n_fp)},
        "inflows": inflows,
        "outlets": [{**loc(o.location), "slope": o.slope} for o in setup.outlets],
        "gauges": [{"name": name, **loc(x)} for name, x in setup.gauges.items()],
    }
    with open(os.path.join(directory, "domain.json"), "w") as f:
        json.dump(domain_json, f, indent=2)
        f.write("\n")
    config = {
        "domain": "domain.json",
        "datacube": "datacube",
        "output_dir": "out",
        "scenarios": {
            "rating_table": "rating.csv",
            "anchor_station": setup.anchor,
            "ladder": list(ladder) if ladder is not None else {"start": 10, "stop": 200, "step": 10},
        },
        "simulation": {"duration_s": duration},
        "pf": {"alpha_mode": "adaptive", "tau": 0.05, "wet_threshold_m": 0.10, **(pf or {})},
        "twin": {"truth_layer": 10, **(twin or {})},
        "seed": 0,
    }
    path = os.path.join(directory, "config.json")
    with open(path, "w") as f:
        json.dump(config, f, indent=2)
        f.write("\n")
    return path


if __name__ == "__main__":
    import sys

    print(write_valley_project(sys.argv[1] if len(sys.argv) > 1 else "valley"))
