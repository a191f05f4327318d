"""Velocity-conditioned Gaussian terrain-cost map.

Each cell stores (peak_penalty, critical_velocity, sensitivity) = (A, mu,
sigma); the cost of crossing the cell at speed v is A * exp(-(v - mu)^2 /
(2 sigma^2)). Cost lookups use the nearest cell's parameters: interpolating
mu/sigma between cells with different critical velocities would produce a
Gaussian neither cell supports, so blending (when wanted) is done on the
evaluated cost instead.

Maps are immutable after construction; all queries are read-only and safe to
evaluate concurrently from many planner workers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidSpecError, MapValidationError, OutOfBoundsError


@dataclass(frozen=True)
class ParamBounds:
    """Valid ranges for the per-cell Gaussian parameters.

    Defaults: peak penalty normalised to [0, 1] (traversability scores are),
    critical velocity within 1.5x the platform top speed, sensitivity floored
    at 0.1 m/s so the cost never degenerates to a spike.
    """

    a_max: float = 1.0
    mu_lo: float = 0.0
    mu_hi: float = 12.0
    sigma_min: float = 0.1
    sigma_max: float = 10.0

    def __post_init__(self):
        if not (self.a_max > 0 and self.sigma_min > 0):
            raise InvalidSpecError("a_max and sigma_min must be positive")
        if self.mu_hi <= self.mu_lo or self.sigma_max <= self.sigma_min:
            raise InvalidSpecError("parameter bounds must be non-degenerate")

    def clip(self, a, mu, sigma):
        return (
            np.clip(a, 0.0, self.a_max),
            np.clip(mu, self.mu_lo, self.mu_hi),
            np.clip(sigma, self.sigma_min, self.sigma_max),
        )


DEFAULT_BOUNDS = ParamBounds()


@dataclass(frozen=True)
class GaussianParams:
    """Single-cell cost profile over velocity."""

    peak_penalty: float
    critical_velocity: float
    sensitivity: float

    def validate(self, bounds: ParamBounds = DEFAULT_BOUNDS) -> "GaussianParams":
        if not (0.0 <= self.peak_penalty <= bounds.a_max):
            raise MapValidationError(
                f"peak_penalty {self.peak_penalty} outside [0, {bounds.a_max}]"
            )
        if not (bounds.mu_lo <= self.critical_velocity <= bounds.mu_hi):
            raise MapValidationError(
                f"critical_velocity {self.critical_velocity} outside "
                f"[{bounds.mu_lo}, {bounds.mu_hi}]"
            )
        if not (bounds.sigma_min <= self.sensitivity <= bounds.sigma_max):
            raise MapValidationError(
                f"sensitivity {self.sensitivity} outside "
                f"[{bounds.sigma_min}, {bounds.sigma_max}]"
            )
        return self


def eval_cost(psi: GaussianParams, v: float) -> float:
    """Closed-form cost at speed v; always in [0, peak_penalty]."""
    d = v - psi.critical_velocity
    return psi.peak_penalty * math.exp(-(d * d) / (2.0 * psi.sensitivity * psi.sensitivity))


def eval_cost_arrays(a, mu, sigma, v):
    """Vectorised cost evaluation over broadcastable arrays."""
    d = np.asarray(v, dtype=np.float64) - mu
    return a * np.exp(-(d * d) / (2.0 * np.asarray(sigma) ** 2))


class MatMap:
    """Grid of Gaussian cost parameters aligned cell-for-cell with a height map."""

    def __init__(self, a, mu, sigma, resolution, origin=(0.0, 0.0),
                 bounds: ParamBounds = DEFAULT_BOUNDS):
        a = np.array(a, dtype=np.float64, copy=True)
        mu = np.array(mu, dtype=np.float64, copy=True)
        sigma = np.array(sigma, dtype=np.float64, copy=True)
        if not (a.ndim == 2 and a.shape == mu.shape == sigma.shape):
            raise InvalidSpecError("parameter channels must be equal-shape 2D grids")
        if resolution <= 0:
            raise InvalidSpecError("resolution must be positive")
        self.a = a
        self.mu = mu
        self.sigma = sigma
        for arr in (self.a, self.mu, self.sigma):
            arr.setflags(write=False)
        self.resolution = float(resolution)
        self.origin = (float(origin[0]), float(origin[1]))
        self.bounds = bounds
        self._validate_cells()

    def _validate_cells(self):
        b = self.bounds
        checks = (
            (self.a < 0) | (self.a > b.a_max),
            (self.mu < b.mu_lo) | (self.mu > b.mu_hi),
            (self.sigma < b.sigma_min) | (self.sigma > b.sigma_max),
        )
        names = ("peak_penalty", "critical_velocity", "sensitivity")
        for bad, name in zip(checks, names):
            if np.any(bad):
                row, col = np.argwhere(bad)[0]
                raise MapValidationError(
                    f"cell (col={col}, row={row}) has {name} outside bounds: "
                    f"A={self.a[row, col]}, mu={self.mu[row, col]}, "
                    f"sigma={self.sigma[row, col]}"
                )

    @property
    def width_cells(self) -> int:
        return self.a.shape[1]

    @property
    def height_cells(self) -> int:
        return self.a.shape[0]

    @property
    def shape(self):
        return self.a.shape

    def cell_params(self, col, row) -> GaussianParams:
        return GaussianParams(
            float(self.a[row, col]), float(self.mu[row, col]), float(self.sigma[row, col])
        )

    def _nearest_cells(self, points):
        pts = np.asarray(points, dtype=np.float64)
        ox, oy = self.origin
        col = np.rint((pts[..., 0] - ox) / self.resolution).astype(np.intp)
        row = np.rint((pts[..., 1] - oy) / self.resolution).astype(np.intp)
        oob = (col < 0) | (col >= self.width_cells) | (row < 0) | (row >= self.height_cells)
        return col, row, oob

    @staticmethod
    def aligned_with(height_map, bounds: ParamBounds = DEFAULT_BOUNDS,
                     a=None, mu=None, sigma=None) -> "MatMap":
        """Empty (zero-penalty) map sharing a height map's dims/resolution/origin."""
        shape = (height_map.height_cells, height_map.width_cells)
        return MatMap(
            np.zeros(shape) if a is None else a,
            np.full(shape, bounds.mu_lo) if mu is None else mu,
            np.full(shape, bounds.sigma_min) if sigma is None else sigma,
            height_map.resolution,
            height_map.origin,
            bounds,
        )


def query(mat: MatMap, p, v: float, oob_cost=None, interpolate=False) -> float:
    """Terrain cost at world point p and speed v (nearest-cell parameters).

    Out-of-map points raise OutOfBoundsError unless ``oob_cost`` is given, in
    which case that cost is returned instead. ``interpolate=True`` blends the
    *evaluated cost* of the four surrounding cells bilinearly.
    """
    if interpolate:
        return float(
            _query_bilinear(mat, np.asarray(p, float)[None, :], np.asarray([v]), oob_cost)[0]
        )
    return float(query_batch(mat, np.asarray(p, float)[None, :], np.asarray([v]), oob_cost)[0])


def query_batch(mat: MatMap, points, vels, oob_cost=None) -> np.ndarray:
    """Vectorised nearest-cell cost lookup for (N, 2) points and (N,) speeds."""
    col, row, oob = mat._nearest_cells(points)
    if np.any(oob):
        if oob_cost is None:
            idx = int(np.argmax(oob))
            raise OutOfBoundsError(np.asarray(points, float).reshape(-1, 2)[idx])
        col = np.where(oob, 0, col)
        row = np.where(oob, 0, row)
    cost = eval_cost_arrays(mat.a[row, col], mat.mu[row, col], mat.sigma[row, col], vels)
    if oob_cost is not None:
        cost = np.where(oob, float(oob_cost), cost)
    return cost


def position_only_cost(mat: MatMap, p, oob_cost=None) -> float:
    """Velocity-agnostic cost: the cell's peak penalty (sup over speeds)."""
    return float(position_only_batch(mat, np.asarray(p, float)[None, :], oob_cost)[0])


def position_only_batch(mat: MatMap, points, oob_cost=None) -> np.ndarray:
    col, row, oob = mat._nearest_cells(points)
    if np.any(oob):
        if oob_cost is None:
            idx = int(np.argmax(oob))
            raise OutOfBoundsError(np.asarray(points, float).reshape(-1, 2)[idx])
        col = np.where(oob, 0, col)
        row = np.where(oob, 0, row)
    cost = mat.a[row, col].astype(np.float64, copy=True)
    if oob_cost is not None:
        cost = np.where(oob, float(oob_cost), cost)
    return cost


def _query_bilinear(mat: MatMap, points, vels, oob_cost=None):
    pts = np.asarray(points, dtype=np.float64)
    ox, oy = mat.origin
    u = (pts[..., 0] - ox) / mat.resolution
    vv = (pts[..., 1] - oy) / mat.resolution
    nu, nv = mat.width_cells - 1, mat.height_cells - 1
    oob = (u < 0) | (u > nu) | (vv < 0) | (vv > nv)
    if np.any(oob) and oob_cost is None:
        idx = int(np.argmax(oob))
        raise OutOfBoundsError(pts.reshape(-1, 2)[idx])
    u = np.clip(u, 0, nu)
    vv = np.clip(vv, 0, nv)
    i0 = np.minimum(np.floor(u).astype(np.intp), max(nu - 1, 0))
    j0 = np.minimum(np.floor(vv).astype(np.intp), max(nv - 1, 0))
    fu, fv = u - i0, vv - j0
    vels = np.asarray(vels, dtype=np.float64)

    def corner(dj, di):
        r, c = j0 + dj, np.minimum(i0 + di, nu)
        r = np.minimum(r, nv)
        return eval_cost_arrays(mat.a[r, c], mat.mu[r, c], mat.sigma[r, c], vels)

    cost = (
        corner(0, 0) * (1 - fu) * (1 - fv)
        + corner(0, 1) * fu * (1 - fv)
        + corner(1, 0) * (1 - fu) * fv
        + corner(1, 1) * fu * fv
    )
    if oob_cost is not None:
        cost = np.where(oob, float(oob_cost), cost)
    return cost


def save_matmap(mat: MatMap, mask, path, encoding=None) -> None:
    """Write map + label mask; parameter channels round-trip bit-exactly.

    Binary payloads use <f8 for the three parameter channels (bit-exact) and
    <u1 for the mask, following the same small-text / large-binary split as
    height maps.
    """
    from . import gridio

    mask = np.asarray(mask)
    if mask.shape != mat.shape:
        raise InvalidSpecError(
            f"mask shape {mask.shape} does not match map shape {mat.shape}"
        )
    enc = gridio.pick_encoding(mat.width_cells * mat.height_cells, "f64", encoding)
    if enc not in ("csv", "f64"):
        raise InvalidSpecError(f"unknown matmap encoding {enc!r}")
    b = mat.bounds
    header = (
        f"MATMAP 1\n"
        f"dims {mat.width_cells} {mat.height_cells}\n"
        f"resolution {mat.resolution!r}\n"
        f"origin {mat.origin[0]!r} {mat.origin[1]!r}\n"
        f"bounds {b.a_max!r} {b.mu_lo!r} {b.mu_hi!r} {b.sigma_min!r} {b.sigma_max!r}\n"
        f"channels peak critical_velocity sensitivity mask\n"
        f"encoding {enc}\n"
        f"data\n"
    ).encode("ascii")
    with open(path, "wb") as f:
        f.write(header)
        if enc == "csv":
            for arr in (mat.a, mat.mu, mat.sigma):
                f.write(gridio.format_csv_array(arr))
            f.write(gridio.format_csv_array(mask.astype(np.uint8), as_int=True))
        else:
            for arr in (mat.a, mat.mu, mat.sigma):
                f.write(arr.astype("<f8").tobytes())
            f.write(mask.astype("<u1").tobytes())


def load_matmap(path):
    """Read a map written by save_matmap; returns (MatMap, mask).

    Cells violating the stored parameter bounds raise MapValidationError
    naming the offending cell.
    """
    from . import gridio

    with open(path, "rb") as f:
        reader = gridio.GridReader(f.read())
    header = reader.read_header("MATMAP")
    w, h = gridio.header_int(reader, header, "dims", 2)
    (res,) = gridio.header_float(reader, header, "resolution", 1)
    origin = gridio.header_float(reader, header, "origin", 2)
    bvals = gridio.header_float(reader, header, "bounds", 5)
    (enc,) = gridio.header_fields(reader, header, "encoding", 1)
    bounds = ParamBounds(*bvals)
    if enc == "csv":
        a = reader.read_csv_array(h, w)
        mu = reader.read_csv_array(h, w)
        sigma = reader.read_csv_array(h, w)
        mask = reader.read_csv_array(h, w).astype(bool)
    elif enc == "f64":
        a = reader.read_binary_array(h, w, "<f8").astype(np.float64)
        mu = reader.read_binary_array(h, w, "<f8").astype(np.float64)
        sigma = reader.read_binary_array(h, w, "<f8").astype(np.float64)
        mask = reader.read_binary_array(h, w, "<u1").astype(bool)
    else:
        reader.fail(f"unknown encoding {enc!r}")
    mat = MatMap(a, mu, sigma, res, origin, bounds)
    return mat, mask
