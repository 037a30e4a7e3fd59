"""
Geometry
========

Rays, orthographic cameras, solar directions and the altitude-based
sampling schemes that discretize the rendering integral.

Conventions: the scene frame has z as altitude in metres. A solar
direction (elevation, azimuth) is converted to the direction in which
sunlight *travels*; azimuth 0 points along +x and grows
counterclockwise, elevation is measured from the horizon. Camera view
directions use the same convention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import numpy.typing as npt

from snerf.utils import GeometryError

Array = npt.NDArray[np.float64]
Vec3 = Array  # shape (3,)

UNIT_TOLERANCE = 1e-9
MIN_ABS_DZ = 1e-6
COINCIDENT_SHIFT = 1e-6  # of a coarse bin width


def vec3(x: float, y: float, z: float) -> Vec3:
    v = np.array([x, y, z], dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise GeometryError(f'Non-finite vector ({x}, {y}, {z}).')
    return v


@dataclass(frozen=True)
class SolarDirection:
    """Sun position: elevation in (0, 90] and azimuth in [0, 360) degrees."""

    elevation: float
    azimuth: float

    def __post_init__(self) -> None:
        if not (0.0 < self.elevation <= 90.0):
            raise GeometryError(
                f'Sun elevation {self.elevation} is not in (0, 90];'
                ' the sun must be above the horizon.'
            )
        object.__setattr__(self, 'azimuth', float(self.azimuth) % 360.0)

    def as_tuple(self) -> tuple[float, float]:
        return (self.elevation, self.azimuth)


@dataclass(frozen=True)
class SceneBounds:
    """Scene footprint (metres) and the altitude slab [h_min, h_max]."""

    x_min: float
    x_max: float
    y_min: float
    y_max: float
    h_min: float
    h_max: float

    def __post_init__(self) -> None:
        if not (
            self.x_min < self.x_max
            and self.y_min < self.y_max
            and self.h_min < self.h_max
        ):
            raise GeometryError(f'Degenerate scene bounds {self}.')

    @property
    def height(self) -> float:
        return self.h_max - self.h_min

    @property
    def center(self) -> Vec3:
        return vec3(
            (self.x_min + self.x_max) / 2,
            (self.y_min + self.y_max) / 2,
            (self.h_min + self.h_max) / 2,
        )


@dataclass(frozen=True)
class Ray:
    origin: Vec3
    direction: Vec3
    h_min: float
    h_max: float

    def __post_init__(self) -> None:
        check_direction(self.direction)
        if not self.h_min < self.h_max:
            raise GeometryError(
                f'Ray altitude bounds [{self.h_min}, {self.h_max}] are empty.'
            )

    def at_altitude(self, h: float) -> Vec3:
        t = (h - self.origin[2]) / self.direction[2]
        return np.asarray(self.origin + t * self.direction)


@dataclass
class RayBundle:
    """A batch of rays sharing the altitude slab [h_min, h_max].

    origins and directions have shape (R, 3).
    """

    origins: Array
    directions: Array
    h_min: float
    h_max: float

    def __post_init__(self) -> None:
        self.origins = np.asarray(self.origins, dtype=np.float64)
        self.directions = np.asarray(self.directions, dtype=np.float64)
        if self.origins.shape != self.directions.shape or (
            self.origins.ndim != 2 or self.origins.shape[1] != 3
        ):
            raise GeometryError(
                f'Ray origins {self.origins.shape} and directions'
                f' {self.directions.shape} must both have shape (R, 3).'
            )
        if not self.h_min < self.h_max:
            raise GeometryError(
                f'Ray altitude bounds [{self.h_min}, {self.h_max}] are empty.'
            )

    def __len__(self) -> int:
        return int(self.origins.shape[0])

    def __getitem__(self, index: int) -> Ray:
        return Ray(
            self.origins[index].copy(),
            self.directions[index].copy(),
            self.h_min,
            self.h_max,
        )

    def subset(self, index: slice | npt.NDArray[np.int64]) -> RayBundle:
        return RayBundle(
            self.origins[index], self.directions[index], self.h_min, self.h_max
        )

    @classmethod
    def of(cls, rays: Sequence[Ray]) -> RayBundle:
        if not rays:
            raise GeometryError('Cannot bundle an empty list of rays.')
        h_min, h_max = rays[0].h_min, rays[0].h_max
        if any(r.h_min != h_min or r.h_max != h_max for r in rays):
            raise GeometryError('Bundled rays must share altitude bounds.')
        return cls(
            np.stack([r.origin for r in rays]),
            np.stack([r.direction for r in rays]),
            h_min,
            h_max,
        )

    @classmethod
    def concatenate(cls, bundles: Sequence[RayBundle]) -> RayBundle:
        return cls(
            np.concatenate([b.origins for b in bundles]),
            np.concatenate([b.directions for b in bundles]),
            bundles[0].h_min,
            bundles[0].h_max,
        )


@dataclass
class SamplePoints:
    """Samples along a bundle of rays, ordered by decreasing altitude.

    positions has shape (R, N, 3); altitudes and deltas (R, N). The
    stratification bins [h_min, h_max] split into `n_bins` equal parts
    are kept so that importance resampling can reuse them.
    """

    positions: Array
    altitudes: Array
    deltas: Array
    h_min: float
    h_max: float
    n_bins: int
    directions: Array | None = None  # (R, 3) ray directions

    @property
    def n_rays(self) -> int:
        return int(self.altitudes.shape[0])

    @property
    def n_samples(self) -> int:
        return int(self.altitudes.shape[1])


@dataclass(frozen=True)
class OrthoCamera:
    """Oblique orthographic camera over a rectangular footprint.

    Pixel (row, col) covers the footprint cell whose centre is at
    x = cx - ex/2 + (col + 0.5) ex/W and y = cy + ey/2 - (row + 0.5) ey/H,
    so row 0 is the +y edge.
    """

    direction: Vec3
    center: Vec3
    extent: tuple[float, float]
    resolution: tuple[int, int]  # (height, width) in pixels

    @classmethod
    def looking(
        cls,
        off_nadir: float,
        azimuth: float,
        center: Vec3,
        extent: tuple[float, float],
        resolution: tuple[int, int],
    ) -> OrthoCamera:
        """Camera whose view direction is off_nadir degrees from vertical,
        travelling horizontally along azimuth."""
        z, a = math.radians(off_nadir), math.radians(azimuth)
        direction = vec3(
            math.sin(z) * math.cos(a), math.sin(z) * math.sin(a), -math.cos(z)
        )
        return cls(direction, np.asarray(center, float), extent, resolution)

    @property
    def off_nadir(self) -> float:
        return math.degrees(math.acos(min(1.0, -float(self.direction[2]))))

    @property
    def azimuth(self) -> float:
        d = self.direction
        if math.hypot(d[0], d[1]) < 1e-12:
            return 0.0
        return math.degrees(math.atan2(d[1], d[0])) % 360.0

    def pixel_centers(self, altitude: float) -> Array:
        """Footprint points of every pixel at the given altitude, (H*W, 3)."""
        height, width = self.resolution
        ex, ey = self.extent
        cx, cy = float(self.center[0]), float(self.center[1])
        cols = cx - ex / 2 + (np.arange(width) + 0.5) * ex / width
        rows = cy + ey / 2 - (np.arange(height) + 0.5) * ey / height
        xx, yy = np.meshgrid(cols, rows)
        return np.stack(
            [xx.ravel(), yy.ravel(), np.full(xx.size, altitude)], axis=1
        )


def check_direction(direction: Vec3) -> None:
    norm = float(np.linalg.norm(direction))
    if abs(norm - 1.0) > UNIT_TOLERANCE:
        raise GeometryError(f'Ray direction {direction} is not unit length.')
    if direction[2] >= 0:
        raise GeometryError(
            f'Ray direction {direction} must point downwards (z < 0).'
        )


def solar_to_vector(sun: SolarDirection) -> Vec3:
    """Unit vector along which sunlight travels (always downwards)."""
    el, az = math.radians(sun.elevation), math.radians(sun.azimuth)
    return vec3(
        math.cos(el) * math.cos(az),
        math.cos(el) * math.sin(az),
        -math.sin(el),
    )


def vector_to_solar(v: Vec3) -> SolarDirection:
    """Inverse of solar_to_vector; azimuth is 0 for a zenith sun."""
    v = np.asarray(v, dtype=np.float64)
    v = v / np.linalg.norm(v)
    if v[2] >= 0:
        raise GeometryError(
            f'Light direction {v} does not point downwards: sun below horizon.'
        )
    elevation = math.degrees(math.asin(min(1.0, -float(v[2]))))
    if math.hypot(v[0], v[1]) < 1e-12:
        return SolarDirection(90.0, 0.0)
    azimuth = math.degrees(math.atan2(v[1], v[0])) % 360.0
    return SolarDirection(elevation, azimuth)


def angle_between(a: Vec3, b: Vec3) -> float:
    """Angle between two unit vectors, degrees."""
    return math.degrees(math.acos(float(np.clip(np.dot(a, b), -1.0, 1.0))))


def generate_view_rays(
    cam: OrthoCamera, h_min: float, h_max: float
) -> RayBundle:
    """One ray per pixel, row-major, with origins on the h_max plane.

    Each ray passes through its pixel's footprint point at the middle
    altitude of the slab, so oblique views stay centred on the scene.
    """
    height, width = cam.resolution
    if height < 1 or width < 1:
        raise GeometryError(f'Camera resolution {cam.resolution} is empty.')
    d = np.asarray(cam.direction, dtype=np.float64)
    check_direction(d)
    h_mid = (h_min + h_max) / 2
    targets = cam.pixel_centers(h_mid)
    t = (h_max - h_mid) / d[2]
    origins = targets + t * d
    origins[:, 2] = h_max
    return RayBundle(origins, np.tile(d, (len(origins), 1)), h_min, h_max)


def _points_at(rays: RayBundle, altitudes: Array) -> Array:
    t = (altitudes - rays.origins[:, 2:3]) / rays.directions[:, 2:3]
    return np.asarray(
        rays.origins[:, None, :] + t[..., None] * rays.directions[:, None, :]
    )


def _deltas(altitudes: Array, h_min: float, dz: Array) -> Array:
    """Segment lengths: altitude drop to the next sample, and for the
    last sample twice its height above h_min, over |dz|."""
    drops = np.empty_like(altitudes)
    drops[:, :-1] = altitudes[:, :-1] - altitudes[:, 1:]
    drops[:, -1] = 2.0 * (altitudes[:, -1] - h_min)
    return np.asarray(drops / np.abs(dz)[:, None])


def _check_parameterizable(rays: RayBundle) -> None:
    if np.any(np.abs(rays.directions[:, 2]) < MIN_ABS_DZ):
        raise GeometryError(
            'Near-horizontal ray cannot be parameterized by altitude.'
        )


def sample_altitudes(
    rays: RayBundle, n: int, jitter: np.random.Generator | None = None
) -> SamplePoints:
    """Stratified samples, one per equal-width altitude bin.

    Without jitter the samples sit at the bin centres; with jitter they
    are uniform within (bin bottom, bin top].
    """
    if n < 2:
        raise GeometryError(f'Need at least 2 samples per ray, not {n}.')
    _check_parameterizable(rays)
    width = (rays.h_max - rays.h_min) / n
    tops = rays.h_max - width * np.arange(n)
    if jitter is None:
        frac = np.full((len(rays), n), 0.5)
    else:
        frac = jitter.random((len(rays), n))
    altitudes = tops[None, :] - frac * width
    return SamplePoints(
        positions=_points_at(rays, altitudes),
        altitudes=altitudes,
        deltas=_deltas(altitudes, rays.h_min, rays.directions[:, 2]),
        h_min=rays.h_min,
        h_max=rays.h_max,
        n_bins=n,
        directions=rays.directions,
    )


def _separate(altitudes: Array, h_min: float, shift: float) -> Array:
    """Moves a sample that repeats the one above it down by shift, or by
    half its height over the next sample when that is less."""
    repeats = np.argwhere(altitudes[:, 1:] >= altitudes[:, :-1])
    if len(repeats) == 0:
        return altitudes
    out = altitudes.copy()
    n = out.shape[1]
    for r, i in repeats:
        c = i + 1
        below = out[r, c + 1] if c + 1 < n else h_min
        out[r, c] = out[r, c - 1] - min(shift, (out[r, c - 1] - below) / 2)
    return out


def importance_resample(
    rays: RayBundle,
    coarse: SamplePoints,
    weights: Array,
    m: int,
    rng: np.random.Generator | None = None,
) -> SamplePoints:
    """Adds m samples per ray drawn from the piecewise-constant PDF over
    the coarse bins, proportional to the compositing weights.

    With rng=None the draws use the fixed quantiles k/m, which are
    nested when m doubles. Rays whose weights are all zero fall back to
    stratified sampling. The result is merged with the coarse samples
    and sorted by decreasing altitude; a fine sample that falls on a
    coarse one is moved just below it.
    """
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != coarse.altitudes.shape:
        raise GeometryError(
            f'Weights {weights.shape} do not match samples'
            f' {coarse.altitudes.shape}.'
        )
    if np.any(weights < 0):
        raise GeometryError('Importance weights must be non-negative.')
    if m < 1:
        return coarse
    n_rays, n_bins = weights.shape
    if n_bins != coarse.n_bins:
        raise GeometryError(
            'Importance resampling needs exactly one coarse sample per bin.'
        )
    width = (coarse.h_max - coarse.h_min) / n_bins

    totals = weights.sum(axis=1, keepdims=True)
    empty = totals[:, 0] <= 0
    safe_totals = np.where(empty[:, None], 1.0, totals)
    pdf = np.where(empty[:, None], 1.0 / n_bins, weights / safe_totals)
    cumulative = np.cumsum(pdf, axis=1)
    cdf = np.concatenate(
        [np.zeros((n_rays, 1)), cumulative / cumulative[:, -1:]], axis=1
    )

    if rng is None:
        u = np.tile(np.arange(m) / m, (n_rays, 1))
    else:
        u = rng.random((n_rays, m))
    # one flat searchsorted: row r lives in [2r, 2r + 1]
    offsets = 2.0 * np.arange(n_rays)[:, None]
    flat = np.searchsorted(
        (cdf + offsets).ravel(), (u + offsets).ravel(), side='right'
    ).reshape(n_rays, m)
    bins = np.clip(
        flat - 1 - (n_bins + 1) * np.arange(n_rays)[:, None], 0, n_bins - 1
    )
    lower = np.take_along_axis(cdf, bins, axis=1)
    mass = np.take_along_axis(cdf, bins + 1, axis=1) - lower
    frac = (u - lower) / np.where(mass > 0, mass, 1.0)
    fine = coarse.h_max - width * (bins + np.clip(frac, 0.0, 1.0))

    altitudes = _separate(
        -np.sort(-np.concatenate([coarse.altitudes, fine], axis=1)),
        coarse.h_min,
        width * COINCIDENT_SHIFT,
    )
    return SamplePoints(
        positions=_points_at(rays, altitudes),
        altitudes=altitudes,
        deltas=_deltas(altitudes, coarse.h_min, rays.directions[:, 2]),
        h_min=coarse.h_min,
        h_max=coarse.h_max,
        n_bins=coarse.n_bins,
        directions=rays.directions,
    )


def slerp(a: Vec3, b: Vec3, t: float) -> Vec3:
    """Spherical linear interpolation between unit vectors."""
    dot = float(np.clip(np.dot(a, b), -1.0, 1.0))
    if dot <= -1.0 + UNIT_TOLERANCE:
        raise GeometryError(
            'Cannot interpolate between antipodal directions.'
        )
    omega = math.acos(dot)
    if omega < 1e-12:
        return np.asarray(a, dtype=np.float64).copy()
    so = math.sin(omega)
    v = (math.sin((1 - t) * omega) / so) * a + (math.sin(t * omega) / so) * b
    return np.asarray(v / np.linalg.norm(v))


def interpolate_solar_path(
    a: SolarDirection, b: SolarDirection, t: float
) -> SolarDirection:
    if not 0.0 <= t <= 1.0:
        raise GeometryError(f'Interpolation parameter {t} not in [0, 1].')
    if t == 0.0:
        return a
    if t == 1.0:
        return b
    return vector_to_solar(slerp(solar_to_vector(a), solar_to_vector(b), t))


def solar_correction_footprint(
    bounds: SceneBounds, sun: SolarDirection
) -> tuple[float, float, float, float]:
    """Footprint on the h_max plane expanded up-sun by the horizontal
    shadow reach (h_max - h_min) / tan(elevation)."""
    v = solar_to_vector(sun)
    # horizontal travel per metre of descent
    reach = bounds.height / -v[2]
    shift_x, shift_y = -v[0] * reach, -v[1] * reach
    return (
        bounds.x_min + min(0.0, shift_x),
        bounds.x_max + max(0.0, shift_x),
        bounds.y_min + min(0.0, shift_y),
        bounds.y_max + max(0.0, shift_y),
    )


def generate_solar_correction_rays(
    bounds: SceneBounds,
    sun: SolarDirection,
    count: int,
    rng: np.random.Generator,
) -> RayBundle:
    """Rays travelling along the sunlight, with origins uniform on the
    h_max plane over the up-sun expanded footprint."""
    if count < 1:
        raise GeometryError(f'Need at least one solar ray, not {count}.')
    x0, x1, y0, y1 = solar_correction_footprint(bounds, sun)
    origins = np.column_stack(
        [
            rng.uniform(x0, x1, count),
            rng.uniform(y0, y1, count),
            np.full(count, bounds.h_max),
        ]
    )
    v = solar_to_vector(sun)
    return RayBundle(
        origins, np.tile(v, (count, 1)), bounds.h_min, bounds.h_max
    )
