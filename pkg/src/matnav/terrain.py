"""Synthetic height maps, elevation sampling, and quasi-static vehicle orientation.

World convention: the travel direction of the canonical scenarios is +x,
terrain features are strips across +x unless noted. Cell (col, row) covers the
world point ``origin + (col, row) * resolution``; elevations are stored
row-major as ``elevations[row, col]``.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidSpecError, MapValidationError, OutOfBoundsError

TERRAIN_KINDS = (
    "flat",
    "short_ditch",
    "long_ditch",
    "bump",
    "curb",
    "rock",
    "wall",
    "composite",
)

# Canonical feature geometry per kind: (vertical magnitude m, width along
# travel m, wall slope dz/dx with inf = vertical face, lateral extent m).
# Finite lateral extents leave flat ground around the feature ends, so
# conservative planners can detour around them. Overridable per spec.
_KIND_DEFAULTS = {
    "short_ditch": (0.4, 0.8, math.inf, 6.0),
    "long_ditch": (0.4, 1.6, math.inf, 6.0),
    "bump": (0.12, 0.5, 1.0, 6.0),
    "curb": (0.15, 1.2, math.inf, 6.0),
    "rock": (0.35, 0.5, math.nan, 0.5),  # radial dome, slope unused
    "wall": (1.2, 0.3, math.inf, 6.0),
}

# Kinds that lower the ground rather than raise it.
_DIG_KINDS = ("short_ditch", "long_ditch")


@dataclass(frozen=True)
class VehicleGeometry:
    """Contact geometry of the platform (1/5-scale RC car by default)."""

    wheelbase: float = 0.5
    track_width: float = 0.4
    com_height: float = 0.2
    mass: float = 20.0

    def __post_init__(self):
        for name in ("wheelbase", "track_width", "com_height", "mass"):
            if getattr(self, name) <= 0:
                raise InvalidSpecError(f"VehicleGeometry.{name} must be positive")


@dataclass(frozen=True)
class TerrainSpec:
    """Declarative description of a synthetic terrain feature.

    ``depth`` is the vertical magnitude of the feature: digging depth for
    ditches, raised height for bumps/curbs/rocks/walls. ``width`` is the
    footprint extent along the travel (+x) direction, ``lateral`` the extent
    across it (0 means the feature spans the whole map). ``wall_slope`` is the
    dz/dx rate of the feature faces (``inf`` = vertical). NaN fields fall back
    to the per-kind canonical defaults.
    """

    kind: str = "flat"
    depth: float = math.nan
    width: float = math.nan
    lateral: float = math.nan
    center: tuple[float, float] = (0.0, 0.0)
    ground_slope: float = 0.0
    wall_slope: float = math.nan
    noise_amp: float = 0.0
    seed: int = 0
    children: tuple["TerrainSpec", ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.kind not in TERRAIN_KINDS:
            raise InvalidSpecError(f"unknown terrain kind {self.kind!r}")
        for name in ("depth", "width", "lateral", "noise_amp"):
            v = getattr(self, name)
            if not math.isnan(v) and v < 0:
                raise InvalidSpecError(f"TerrainSpec.{name} must be >= 0, got {v}")
        if self.kind == "composite":
            if len(self.children) < 1:
                raise InvalidSpecError("composite spec needs at least one child feature")
            if any(c.kind == "composite" for c in self.children):
                raise InvalidSpecError("composite children must be simple features")

    def resolved(self) -> "TerrainSpec":
        """Spec with NaN geometry fields replaced by the per-kind defaults."""
        if self.kind in ("flat", "composite"):
            return self
        d_depth, d_width, d_slope, d_lateral = _KIND_DEFAULTS[self.kind]
        kw = {}
        if math.isnan(self.depth):
            kw["depth"] = d_depth
        if math.isnan(self.width):
            kw["width"] = d_width
        if math.isnan(self.wall_slope):
            kw["wall_slope"] = d_slope
        if math.isnan(self.lateral):
            kw["lateral"] = d_lateral
        if not kw:
            return self
        return dataclasses.replace(self, **kw)


class HeightMap:
    """Immutable 2D elevation grid with a world <-> cell mapping.

    Bounds are the hull of cell centers: a point is in bounds when its
    fractional cell coordinates lie in [0, n-1] on both axes, which keeps
    bilinear interpolation total over the valid domain.
    """

    def __init__(self, elevations, resolution, origin=(0.0, 0.0)):
        elev = np.array(elevations, dtype=np.float64, copy=True)
        if elev.ndim != 2:
            raise InvalidSpecError("elevations must be a 2D grid")
        if resolution <= 0:
            raise InvalidSpecError("resolution must be positive")
        if not np.all(np.isfinite(elev)):
            raise InvalidSpecError("elevations must be finite")
        self._elev = elev
        self._elev.setflags(write=False)
        self.resolution = float(resolution)
        self.origin = (float(origin[0]), float(origin[1]))

    @property
    def elevations(self) -> np.ndarray:
        return self._elev

    @property
    def width_cells(self) -> int:
        return self._elev.shape[1]

    @property
    def height_cells(self) -> int:
        return self._elev.shape[0]

    @property
    def bounds(self):
        """((xmin, xmax), (ymin, ymax)) hull of cell centers in world metres."""
        ox, oy = self.origin
        return (
            (ox, ox + (self.width_cells - 1) * self.resolution),
            (oy, oy + (self.height_cells - 1) * self.resolution),
        )

    def world_to_cell(self, p) -> tuple[int, int]:
        """Nearest (col, row) for a world point; inverse of cell_to_world."""
        u, v = self._frac_coords(p)
        col = int(round(u))
        row = int(round(v))
        if not (0 <= col < self.width_cells and 0 <= row < self.height_cells):
            raise OutOfBoundsError(p, self.bounds)
        return col, row

    def cell_to_world(self, col, row) -> tuple[float, float]:
        ox, oy = self.origin
        return (ox + col * self.resolution, oy + row * self.resolution)

    def contains(self, p) -> bool:
        u, v = self._frac_coords(p)
        return 0.0 <= u <= self.width_cells - 1 and 0.0 <= v <= self.height_cells - 1

    def _frac_coords(self, p):
        return (
            (float(p[0]) - self.origin[0]) / self.resolution,
            (float(p[1]) - self.origin[1]) / self.resolution,
        )


def generate_terrain(spec: TerrainSpec, extent: float, resolution: float) -> HeightMap:
    """Realise a TerrainSpec as a square height map of the given extent.

    Pure function of (spec, extent, resolution): the same inputs always
    produce the same grid, including the seeded noise layer.
    """
    if extent <= 0 or resolution <= 0:
        raise InvalidSpecError("extent and resolution must be positive")
    n = int(round(extent / resolution))
    if n < 16:
        raise InvalidSpecError(
            f"extent/resolution give {n} cells per side; need at least 16"
        )
    spec = spec.resolved()

    xs = np.arange(n) * resolution  # world coords of cell centers, origin (0, 0)
    X, Y = np.meshgrid(xs, xs)  # X[row, col], Y[row, col]

    base = math.tan(spec.ground_slope) * X if spec.ground_slope else np.zeros_like(X)

    if spec.kind == "composite":
        dig = np.zeros_like(X)
        raise_ = np.zeros_like(X)
        for child in spec.children:
            child = child.resolved()
            layer = _feature_layer(child, X, Y)
            if child.kind in _DIG_KINDS:
                dig = np.minimum(dig, layer)
            else:
                raise_ = np.maximum(raise_, layer)
        offset = dig + raise_
    elif spec.kind == "flat":
        offset = np.zeros_like(X)
    else:
        offset = _feature_layer(spec, X, Y)

    z = base + offset
    if spec.noise_amp > 0:
        rng = np.random.default_rng(spec.seed)
        z = z + rng.normal(0.0, spec.noise_amp, size=z.shape)
    return HeightMap(z, resolution)


def _feature_layer(spec: TerrainSpec, X, Y):
    """Signed elevation offset of a single feature over the grid."""
    cx, cy = spec.center
    half_w = spec.width / 2.0

    if spec.kind == "rock":
        rx = half_w
        ry = (spec.lateral / 2.0) if spec.lateral > 0 else half_w
        r = np.hypot((X - cx) / max(rx, 1e-9), (Y - cy) / max(ry, 1e-9))
        dome = np.cos(np.clip(r, 0.0, 1.0) * (math.pi / 2.0)) ** 2
        return spec.depth * np.where(r <= 1.0, dome, 0.0)

    dx = np.abs(X - cx)
    if math.isinf(spec.wall_slope):
        profile = np.where(dx <= half_w, 1.0, 0.0)
    else:
        # Trapezoid: full magnitude in the core, faces rising at wall_slope,
        # footprint width preserved at the top of the feature.
        rise = spec.wall_slope * (half_w - dx)
        profile = np.clip(rise / spec.depth, 0.0, 1.0) if spec.depth > 0 else 0.0 * dx

    if spec.lateral > 0:
        lat = np.abs(Y - cy) <= spec.lateral / 2.0
        profile = profile * lat

    sign = -1.0 if spec.kind in _DIG_KINDS else 1.0
    return sign * spec.depth * profile


def sample_elevation(hm: HeightMap, p) -> float:
    """Bilinear elevation at a world point (exact at cell centers)."""
    return float(sample_elevation_batch(hm, np.asarray(p, dtype=np.float64)[None, :])[0])


def sample_elevation_batch(hm: HeightMap, points: np.ndarray) -> np.ndarray:
    """Vectorised bilinear sampling of an (N, 2) array of world points."""
    pts = np.asarray(points, dtype=np.float64)
    ox, oy = hm.origin
    u = (pts[..., 0] - ox) / hm.resolution
    v = (pts[..., 1] - oy) / hm.resolution
    nu, nv = hm.width_cells - 1, hm.height_cells - 1
    bad = (u < 0) | (u > nu) | (v < 0) | (v > nv)
    if np.any(bad):
        idx = int(np.argmax(bad))
        raise OutOfBoundsError(pts.reshape(-1, 2)[idx], hm.bounds)
    i0 = np.clip(np.floor(u).astype(np.intp), 0, nu - 1) if nu > 0 else np.zeros_like(u, dtype=np.intp)
    j0 = np.clip(np.floor(v).astype(np.intp), 0, nv - 1) if nv > 0 else np.zeros_like(v, dtype=np.intp)
    fu = u - i0
    fv = v - j0
    z = hm.elevations
    z00 = z[j0, i0]
    z01 = z[j0, np.minimum(i0 + 1, nu)]
    z10 = z[np.minimum(j0 + 1, nv), i0]
    z11 = z[np.minimum(j0 + 1, nv), np.minimum(i0 + 1, nu)]
    return (
        z00 * (1 - fu) * (1 - fv)
        + z01 * fu * (1 - fv)
        + z10 * (1 - fu) * fv
        + z11 * fu * fv
    )


def wheel_contact_points(position, heading, geom: VehicleGeometry) -> np.ndarray:
    """World positions of the four wheel contacts: FL, FR, RL, RR."""
    hl = geom.wheelbase / 2.0
    ht = geom.track_width / 2.0
    local = np.array([[hl, ht], [hl, -ht], [-hl, ht], [-hl, -ht]])
    c, s = math.cos(heading), math.sin(heading)
    rot = np.array([[c, -s], [s, c]])
    return np.asarray(position, dtype=np.float64) + local @ rot.T


def static_orientation(hm: HeightMap, position, heading, geom: VehicleGeometry):
    """Quasi-static (roll, pitch) from a least-squares plane over the wheel contacts.

    The four contacts form a symmetric rectangle in the vehicle frame, so the
    least-squares plane gradient reduces to axle-pair elevation differences:
    pitch = atan((front - rear)/wheelbase), positive nose-up; roll =
    atan((left - right)/track), positive left-side-up. Adding a constant to
    the whole map leaves the result unchanged.
    """
    pts = wheel_contact_points(position, heading, geom)
    z = sample_elevation_batch(hm, pts)  # FL, FR, RL, RR
    zf = 0.5 * (z[0] + z[1])
    zr = 0.5 * (z[2] + z[3])
    zl = 0.5 * (z[0] + z[2])
    zrt = 0.5 * (z[1] + z[3])
    pitch = math.atan2(zf - zr, geom.wheelbase)
    roll = math.atan2(zl - zrt, geom.track_width)
    return roll, pitch


def orientation_bounds(hm: HeightMap, positions, headings, geom: VehicleGeometry):
    """Component-wise min/max static orientation over a path window.

    Returns ((roll_lo, pitch_lo), (roll_hi, pitch_hi)).
    """
    positions = list(positions)
    headings = list(headings)
    if not positions or len(positions) != len(headings):
        raise InvalidSpecError("positions and headings must be non-empty and equal length")
    rolls = np.empty(len(positions))
    pitches = np.empty(len(positions))
    for k, (p, h) in enumerate(zip(positions, headings)):
        rolls[k], pitches[k] = static_orientation(hm, p, h, geom)
    return (
        (float(rolls.min()), float(pitches.min())),
        (float(rolls.max()), float(pitches.max())),
    )


def save_heightmap(hm: HeightMap, path, encoding=None) -> None:
    """Write a height map: text header + csv (small) or raw <f4 (large) payload."""
    from . import gridio

    enc = gridio.pick_encoding(hm.width_cells * hm.height_cells, "f32", encoding)
    if enc not in ("csv", "f32"):
        raise InvalidSpecError(f"unknown heightmap encoding {enc!r}")
    header = (
        f"HMAP 1\n"
        f"dims {hm.width_cells} {hm.height_cells}\n"
        f"resolution {hm.resolution!r}\n"
        f"origin {hm.origin[0]!r} {hm.origin[1]!r}\n"
        f"encoding {enc}\n"
        f"data\n"
    ).encode("ascii")
    if enc == "csv":
        payload = gridio.format_csv_array(hm.elevations)
    else:
        payload = hm.elevations.astype("<f4").tobytes()
    with open(path, "wb") as f:
        f.write(header)
        f.write(payload)


def load_heightmap(path) -> HeightMap:
    from . import gridio

    with open(path, "rb") as f:
        reader = gridio.GridReader(f.read())
    header = reader.read_header("HMAP")
    w, h = gridio.header_int(reader, header, "dims", 2)
    (res,) = gridio.header_float(reader, header, "resolution", 1)
    origin = gridio.header_float(reader, header, "origin", 2)
    (enc,) = gridio.header_fields(reader, header, "encoding", 1)
    if enc == "csv":
        elev = reader.read_csv_array(h, w)
    elif enc == "f32":
        elev = reader.read_binary_array(h, w, "<f4").astype(np.float64)
    else:
        reader.fail(f"unknown encoding {enc!r}")
    if res <= 0 or not np.all(np.isfinite(elev)):
        raise MapValidationError(f"height map {path} violates invariants")
    return HeightMap(elev, res, origin)
