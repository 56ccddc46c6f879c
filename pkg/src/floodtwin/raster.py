"""Georeferenced rasters, ESRI ASCII Grid I/O, resampling and wet/dry binarization.

Arrays are stored image-style: ``values[0, :]`` is the northernmost row, matching
the row order of the ASCII Grid format.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, GridMismatchError

DEFAULT_NODATA = -9999.0
WET_THRESHOLD_M = 0.10

_HEADER_KEYS = ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize", "nodata_value")


@dataclass(frozen=True)
class GridSpec:
    ncols: int
    nrows: int
    xll: float
    yll: float
    cellsize: float
    nodata: float = DEFAULT_NODATA

    def __post_init__(self):
        if self.ncols < 1 or self.nrows < 1:
            raise DataError(f"grid must have at least one row and column, got {self.nrows}x{self.ncols}")
        if not self.cellsize > 0:
            raise DataError(f"cellsize must be positive, got {self.cellsize}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nrows, self.ncols)

    @property
    def xmax(self) -> float:
        return self.xll + self.ncols * self.cellsize

    @property
    def ymax(self) -> float:
        return self.yll + self.nrows * self.cellsize

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Return (x, y) center coordinates as 1-D arrays over columns and rows (north first)."""
        x = self.xll + (np.arange(self.ncols) + 0.5) * self.cellsize
        y = self.ymax - (np.arange(self.nrows) + 0.5) * self.cellsize
        return x, y

    def aligned(self, other: GridSpec) -> bool:
        return self == other

    def to_dict(self) -> dict:
        return {
            "ncols": self.ncols,
            "nrows": self.nrows,
            "xll": self.xll,
            "yll": self.yll,
            "cellsize": self.cellsize,
            "nodata": self.nodata,
        }

    @classmethod
    def from_dict(cls, d: dict) -> GridSpec:
        return cls(int(d["ncols"]), int(d["nrows"]), float(d["xll"]), float(d["yll"]),
                   float(d["cellsize"]), float(d.get("nodata", DEFAULT_NODATA)))


def require_aligned(*specs: GridSpec) -> None:
    first = specs[0]
    for s in specs[1:]:
        if not first.aligned(s):
            raise GridMismatchError(f"grids are not aligned: {first} vs {s}")


@dataclass(frozen=True)
class Raster:
    """A single scalar field on a grid. Cells equal to ``spec.nodata`` are masked."""

    spec: GridSpec
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        arr = np.array(self.values, dtype=np.float64)
        if arr.shape != self.spec.shape:
            raise DataError(f"values shape {arr.shape} does not match grid {self.spec.shape}")
        bad = ~np.isfinite(arr) & (arr != self.spec.nodata)
        if bad.any():
            r, c = np.argwhere(bad)[0]
            raise DataError(f"non-finite value at row {r}, col {c}")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @classmethod
    def full(cls, spec: GridSpec, value: float) -> Raster:
        return cls(spec, np.full(spec.shape, value, dtype=np.float64))

    @property
    def valid(self) -> np.ndarray:
        """Boolean mask, True where the cell holds data."""
        return self.values != self.spec.nodata

    def filled(self, fill: float = 0.0) -> np.ndarray:
        """Writable copy with nodata replaced by ``fill``."""
        return np.where(self.valid, self.values, fill)

    def __eq__(self, other):
        if not isinstance(other, Raster):
            return NotImplemented
        return self.spec == other.spec and np.array_equal(self.values, other.values)

    __hash__ = None


@dataclass(frozen=True)
class BinaryMap:
    """Wet/dry map. ``valid`` is False on nodata or excluded pixels."""

    spec: GridSpec
    wet: np.ndarray = field(repr=False)
    valid: np.ndarray = field(repr=False)

    def __post_init__(self):
        wet = np.asarray(self.wet, dtype=bool).copy()
        valid = np.asarray(self.valid, dtype=bool).copy()
        if wet.shape != self.spec.shape or valid.shape != self.spec.shape:
            raise DataError("binary map arrays do not match grid shape")
        wet.setflags(write=False)
        valid.setflags(write=False)
        object.__setattr__(self, "wet", wet)
        object.__setattr__(self, "valid", valid)

    @property
    def wet_count(self) -> int:
        return int(np.count_nonzero(self.wet & self.valid))


# --- ESRI ASCII Grid --------------------------------------------------------------


def read_ascii_grid(path) -> Raster:
    """Read an ESRI ASCII Grid file.

    ``xllcenter``/``yllcenter`` headers are converted to corner coordinates.
    A missing NODATA_value header defaults to -9999.
    """
    path = os.fspath(path)
    with open(path, "r") as f:
        lines = f.read().splitlines()

    header: dict[str, str] = {}
    lineno = 0
    while lineno < len(lines):
        parts = lines[lineno].split()
        if not parts:
            lineno += 1
            continue
        key = parts[0].lower()
        if key not in _HEADER_KEYS and key not in ("xllcenter", "yllcenter"):
            break
        if len(parts) != 2:
            raise DataError(f"{path}:{lineno + 1}: malformed header line {lines[lineno]!r}")
        header[key] = parts[1]
        lineno += 1

    for key in ("ncols", "nrows", "cellsize"):
        if key not in header:
            raise DataError(f"{path}: header is missing {key}")
    try:
        ncols = int(header["ncols"])
        nrows = int(header["nrows"])
        cellsize = float(header["cellsize"])
        nodata = float(header.get("nodata_value", DEFAULT_NODATA))
        if "xllcorner" in header:
            xll = float(header["xllcorner"])
        elif "xllcenter" in header:
            xll = float(header["xllcenter"]) - cellsize / 2
        else:
            raise DataError(f"{path}: header is missing xllcorner")
        if "yllcorner" in header:
            yll = float(header["yllcorner"])
        elif "yllcenter" in header:
            yll = float(header["yllcenter"]) - cellsize / 2
        else:
            raise DataError(f"{path}: header is missing yllcorner")
    except ValueError as exc:
        raise DataError(f"{path}: malformed header value ({exc})") from None
    spec = GridSpec(ncols, nrows, xll, yll, cellsize, nodata)

    values = np.empty(spec.shape, dtype=np.float64)
    row = 0
    for i in range(lineno, len(lines)):
        text = lines[i].split()
        if not text:
            continue
        if row >= nrows:
            raise DataError(f"{path}:{i + 1}: more than {nrows} data rows")
        if len(text) != ncols:
            raise DataError(f"{path}:{i + 1}: expected {ncols} values, found {len(text)}")
        try:
            values[row] = [float(t) for t in text]
        except ValueError:
            raise DataError(f"{path}:{i + 1}: non-numeric cell value") from None
        row += 1
    if row != nrows:
        raise DataError(f"{path}: expected {nrows} data rows, found {row}")
    return Raster(spec, values)


def _fmt(v: float) -> str:
    if v.is_integer() and abs(v) < 1e15:
        return str(int(v))
    return repr(v)


def write_ascii_grid(raster: Raster, path) -> None:
    """Write ``raster`` so that :func:`read_ascii_grid` reproduces it exactly."""
    path = os.fspath(path)
    if not path:
        raise DataError("output path is empty")
    s = raster.spec
    lines = [
        f"ncols {s.ncols}",
        f"nrows {s.nrows}",
        f"xllcorner {_fmt(float(s.xll))}",
        f"yllcorner {_fmt(float(s.yll))}",
        f"cellsize {_fmt(float(s.cellsize))}",
        f"NODATA_value {_fmt(float(s.nodata))}",
    ]
    # float repr is the shortest string that round-trips exactly
    for row in raster.values.tolist():
        lines.append(" ".join(_fmt(v) for v in row))
    with open(path, "w") as f:
        f.write("\n".join(lines))
        f.write("\n")


# --- Resampling and binarization ---------------------------------------------------


def resample_nearest(source: Raster, target: GridSpec) -> Raster:
    """Nearest-neighbour resampling of ``source`` onto ``target``.

    Target cells whose centers fall outside the source extent become nodata.
    """
    src = source.spec
    if (target.xll >= src.xmax or target.xmax <= src.xll
            or target.yll >= src.ymax or target.ymax <= src.yll):
        raise DataError("source and target grids do not overlap")
    if target == src:
        return source

    x, y = target.cell_centers()
    col = np.floor((x - src.xll) / src.cellsize).astype(np.int64)
    row = np.floor((src.ymax - y) / src.cellsize).astype(np.int64)
    col_ok = (col >= 0) & (col < src.ncols)
    row_ok = (row >= 0) & (row < src.nrows)

    out = np.full(target.shape, target.nodata, dtype=np.float64)
    rr, cc = np.meshgrid(np.clip(row, 0, src.nrows - 1), np.clip(col, 0, src.ncols - 1), indexing="ij")
    picked = source.values[rr, cc]
    inside = np.outer(row_ok, col_ok) & (picked != src.nodata)
    out[inside] = picked[inside]
    return Raster(target, out)


def binarize_depth(depth: Raster, threshold: float = WET_THRESHOLD_M) -> BinaryMap:
    """Wet where depth strictly exceeds ``threshold``; nodata cells are invalid."""
    if threshold < 0 or math.isnan(threshold):
        raise DataError(f"wet threshold must be non-negative, got {threshold}")
    valid = depth.valid
    return BinaryMap(depth.spec, valid & (depth.values > threshold), valid)


def binarize_probability(prob: Raster, threshold: float = 0.25, exclude: BinaryMap | None = None) -> BinaryMap:
    """Observed extent from a flood-probability raster: wet where ``p >= threshold``."""
    if not 0.0 <= threshold <= 1.0:
        raise DataError(f"probability threshold must lie in [0, 1], got {threshold}")
    valid = prob.valid
    if exclude is not None:
        require_aligned(prob.spec, exclude.spec)
        valid = valid & ~(exclude.wet & exclude.valid)
    return BinaryMap(prob.spec, valid & (prob.values >= threshold), valid)
