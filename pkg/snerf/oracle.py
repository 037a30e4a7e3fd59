"""
Oracle
======

Synthetic scenes made of a ground plane and axis-aligned boxes, and an
analytic ray tracer that renders them with the same shading law the
model uses: colour = albedo * (s + (1 - s) sky) with a binary sun
visibility s. It produces training images, shadow masks, albedo maps
and a nadir DEM, and doubles as an analytic density field for
validating the volumetric renderer.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Any, Sequence

import numpy as np
import pandas as pd

from snerf.autodiff import Array, Tape
from snerf.field import FieldOutputs
from snerf.geometry import (
    OrthoCamera,
    RayBundle,
    SceneBounds,
    SolarDirection,
    angle_between,
    generate_view_rays,
    solar_to_vector,
    vec3,
)
from snerf.render import read_float_planes, write_float_planes, write_png
from snerf.utils import SNerfError, error, named_rng

LOGGER = logging.getLogger(__name__)

SCENE_PRESETS = ['slab', 'single_box', 'blocks', 'courtyard', 'transient']
SHADOW_EPS = 1e-4
SOLID_DENSITY = 1e4
GROUND = -1
MISS = -2
FACE_NORMALS = np.vstack([-np.eye(3), np.eye(3)])  # lo faces, then hi

SCENE_FILE = 'scene.json'
MANIFEST_FILE = 'manifest.json'


@dataclass
class Box:
    center: tuple[float, float, float]
    size: tuple[float, float, float]
    albedo: tuple[float, float, float]
    transient: bool = False

    @property
    def lo(self) -> Array:
        return np.asarray(self.center) - np.asarray(self.size) / 2

    @property
    def hi(self) -> Array:
        return np.asarray(self.center) + np.asarray(self.size) / 2

    def contains(self, points: Array) -> Array:
        return np.asarray(
            np.all((points >= self.lo) & (points <= self.hi), axis=-1)
        )


@dataclass
class Acquisition:
    """One image: an oblique view, the sun at capture time, and the
    indices of the transient boxes present in it."""

    off_nadir: float
    view_azimuth: float
    sun_elevation: float
    sun_azimuth: float
    transients: list[int] = field(default_factory=list)

    @property
    def sun(self) -> SolarDirection:
        return SolarDirection(self.sun_elevation, self.sun_azimuth)


@dataclass
class SceneSpec:
    name: str
    x_min: float
    x_max: float
    y_min: float
    y_max: float
    h_min: float
    h_max: float
    ground_altitude: float
    ground_albedo: tuple[float, float, float]
    sky: tuple[float, float, float]
    boxes: list[Box]
    acquisitions: list[Acquisition]
    resolution: tuple[int, int] = (64, 64)
    dem_spacing: float = 1.0
    # sun between the two training clusters, for interpolation sweeps
    held_out_sun: tuple[float, float] | None = None

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        bounds = self.bounds
        if not self.acquisitions:
            error(f'Scene {self.name} has no acquisitions.')
        if not bounds.h_min < self.ground_altitude <= bounds.h_max:
            error(
                f'Ground altitude {self.ground_altitude} is not inside'
                f' ({self.h_min}, {self.h_max}].'
            )
        for colour, what in [
            (self.ground_albedo, 'ground albedo'),
            (self.sky, 'sky colour'),
        ]:
            _check_colour(colour, what)
        for k, box in enumerate(self.boxes):
            if np.any(np.asarray(box.size) <= 0):
                error(f'Box {k} has a non-positive size {box.size}.')
            if box.lo[2] < self.h_min or box.hi[2] > self.h_max:
                error(f'Box {k} is outside the altitude slab.')
            _check_colour(box.albedo, f'albedo of box {k}')
        self.suns()  # suns below the horizon raise
        for a in self.acquisitions:
            for k in a.transients:
                if not (0 <= k < len(self.boxes) and self.boxes[k].transient):
                    error(f'Acquisition lists {k}, not a transient box.')
        if self.dem_spacing <= 0:
            error(f'DEM spacing must be positive, not {self.dem_spacing}.')

    @property
    def bounds(self) -> SceneBounds:
        return SceneBounds(
            self.x_min,
            self.x_max,
            self.y_min,
            self.y_max,
            self.h_min,
            self.h_max,
        )

    @property
    def extent(self) -> tuple[float, float]:
        return (self.x_max - self.x_min, self.y_max - self.y_min)

    def suns(self) -> list[SolarDirection]:
        return [a.sun for a in self.acquisitions]

    def camera(self, acquisition: Acquisition) -> OrthoCamera:
        return OrthoCamera.looking(
            acquisition.off_nadir,
            acquisition.view_azimuth,
            self.bounds.center,
            self.extent,
            self.resolution,
        )

    def present_boxes(
        self, acquisition: Acquisition | None = None
    ) -> list[Box]:
        """Permanent boxes plus the transients present in acquisition."""
        present = set(acquisition.transients) if acquisition else set()
        return [
            b
            for k, b in enumerate(self.boxes)
            if not b.transient or k in present
        ]

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> SceneSpec:
        d = dict(d)
        try:
            d['boxes'] = [
                Box(
                    tuple(b['center']),  # type: ignore[arg-type]
                    tuple(b['size']),  # type: ignore[arg-type]
                    tuple(b['albedo']),  # type: ignore[arg-type]
                    bool(b.get('transient', False)),
                )
                for b in d['boxes']
            ]
            d['acquisitions'] = [Acquisition(**a) for a in d['acquisitions']]
            for key in ('ground_albedo', 'sky', 'resolution', 'held_out_sun'):
                if d.get(key) is not None:
                    d[key] = tuple(d[key])
            return cls(**d)
        except (KeyError, TypeError) as e:
            raise SNerfError(f'Malformed scene description: {e}')

    def save(self, path: str) -> None:
        with open(path, 'w') as f:
            f.write(self.to_json())

    @classmethod
    def load(cls, path: str) -> SceneSpec:
        if os.path.isdir(path):
            path = os.path.join(path, SCENE_FILE)
        try:
            with open(path) as f:
                return cls.from_dict(json.load(f))
        except (OSError, json.JSONDecodeError) as e:
            raise SNerfError(f'Cannot read scene {path}: {e}')


def _check_colour(colour: Sequence[float], what: str) -> None:
    if len(colour) != 3 or not all(0.0 <= c <= 1.0 for c in colour):
        error(f'The {what} {colour} must be three values in [0, 1].')


@dataclass
class DemGrid:
    """Altitudes on a regular grid; row 0 is the +y edge, cell (i, j) is
    centred at (x0 + (j + 0.5) spacing, y0 - (i + 0.5) spacing)."""

    x0: float
    y0: float
    spacing: float
    values: Array  # (rows, cols)

    def __post_init__(self) -> None:
        if self.spacing <= 0:
            error(f'DEM spacing must be positive, not {self.spacing}.')
        if not np.all(np.isfinite(self.values)):
            error('DEM values must be finite.')

    @property
    def shape(self) -> tuple[int, int]:
        rows, cols = self.values.shape
        return int(rows), int(cols)

    @property
    def extent(self) -> tuple[float, float]:
        rows, cols = self.shape
        return (cols * self.spacing, rows * self.spacing)

    def nadir_camera(self) -> OrthoCamera:
        ex, ey = self.extent
        return OrthoCamera.looking(
            0.0,
            0.0,
            vec3(self.x0 + ex / 2, self.y0 - ey / 2, 0.0),
            (ex, ey),
            self.shape,
        )

    @classmethod
    def covering(cls, bounds: SceneBounds, spacing: float) -> DemGrid:
        """An all-zero grid over the scene footprint."""
        cols = max(1, round((bounds.x_max - bounds.x_min) / spacing))
        rows = max(1, round((bounds.y_max - bounds.y_min) / spacing))
        return cls(bounds.x_min, bounds.y_max, spacing, np.zeros((rows, cols)))


@dataclass
class AcquisitionTruth:
    rgb: Array  # (H, W, 3)
    shadow: Array  # (H, W) bool, True in shadow
    albedo: Array  # (H, W, 3)
    transient: Array  # (H, W) bool, primary hit on a transient box


@dataclass
class GroundTruthBundle:
    acquisitions: list[AcquisitionTruth]
    dem: DemGrid


@dataclass
class Hits:
    """Nearest intersections of a ray bundle. primitive is the box index,
    GROUND or MISS; missed rays have infinite distance."""

    distance: Array  # (R,)
    points: Array  # (R, 3)
    normals: Array  # (R, 3)
    albedo: Array  # (R, 3)
    primitive: Array  # (R,) int


def box_entry(origins: Array, directions: Array, box: Box) -> Array:
    """Distance along each ray to where it enters box (0 when it starts
    inside), or inf when the ray misses it."""
    return _slab_test(origins, directions, box.lo[None], box.hi[None])[0][:, 0]


def _leaving(
    box: Box, points: Array, directions: Array
) -> tuple[Array, Array]:
    """Distance from points inside box along directions to its boundary,
    and the face crossed there: 0-2 the lo faces, 3-5 the hi faces."""
    with np.errstate(divide='ignore', invalid='ignore'):
        exits = np.where(
            directions > 0,
            (box.hi - points) / directions,
            np.where(directions < 0, (box.lo - points) / directions, np.inf),
        )
    axis = exits.argmin(axis=1)
    rows = np.arange(len(points))
    face = axis + 3 * (directions[rows, axis] > 0)
    return exits[rows, axis], face


def _slab_test(
    origins: Array, directions: Array, lo: Array, hi: Array
) -> tuple[Array, Array]:
    """Entry distances (R, B) into B boxes and the entry face axis."""
    o = origins[:, None, :]
    d = directions[:, None, :]
    with np.errstate(divide='ignore', invalid='ignore'):
        t1 = (lo[None] - o) / d
        t2 = (hi[None] - o) / d
    parallel = d == 0
    within = (o >= lo[None]) & (o <= hi[None])
    near = np.where(
        parallel, np.where(within, -np.inf, np.inf), np.minimum(t1, t2)
    )
    far = np.where(
        parallel, np.where(within, np.inf, -np.inf), np.maximum(t1, t2)
    )
    t_near, t_far = near.max(axis=-1), far.min(axis=-1)
    hit = (t_near <= t_far) & (t_far >= 0) & np.isfinite(t_near)
    return np.where(hit, np.maximum(t_near, 0.0), np.inf), near.argmax(-1)


def ground_entry(
    origins: Array, directions: Array, altitude: float
) -> Array:
    dz = directions[:, 2]
    with np.errstate(divide='ignore', invalid='ignore'):
        t = (altitude - origins[:, 2]) / dz
    return np.where((dz < 0) & (origins[:, 2] >= altitude), t, np.inf)


def trace_primary(
    scene: SceneSpec, rays: RayBundle, boxes: Sequence[Box] | None = None
) -> Hits:
    """Nearest hit of every ray among the ground plane and boxes
    (default: the permanent boxes)."""
    boxes = scene.present_boxes() if boxes is None else boxes
    n = len(rays)
    o, d = rays.origins, rays.directions
    distance = ground_entry(o, d, scene.ground_altitude)
    primitive = np.where(np.isfinite(distance), GROUND, MISS)
    normals = np.tile([0.0, 0.0, 1.0], (n, 1))
    albedo = np.tile(np.asarray(scene.ground_albedo, float), (n, 1))
    if boxes:
        lo = np.stack([b.lo for b in boxes])
        hi = np.stack([b.hi for b in boxes])
        entries, axes = _slab_test(o, d, lo, hi)
        nearest = entries.argmin(axis=1)
        t_box = entries[np.arange(n), nearest]
        closer = t_box < distance
        distance = np.where(closer, t_box, distance)
        ids = {id(b): k for k, b in enumerate(scene.boxes)}
        indices = [ids.get(id(b), k) for k, b in enumerate(boxes)]
        primitive = np.where(closer, np.asarray(indices)[nearest], primitive)
        axis = axes[np.arange(n), nearest]
        box_normals = np.zeros((n, 3))
        box_normals[np.arange(n), axis] = -np.sign(d[np.arange(n), axis])
        normals = np.where(closer[:, None], box_normals, normals)
        box_albedo = np.stack([np.asarray(b.albedo, float) for b in boxes])
        albedo = np.where(closer[:, None], box_albedo[nearest], albedo)
    with np.errstate(invalid='ignore'):
        points = np.where(
            np.isfinite(distance)[:, None], o + distance[:, None] * d, np.nan
        )
    return Hits(distance, points, normals, albedo, primitive)


def sun_visibility(
    points: Array,
    normals: Array,
    sun: SolarDirection,
    boxes: Sequence[Box],
) -> Array:
    """1 where the ray from each point (nudged SHADOW_EPS along its
    normal) towards the sun hits no box, else 0."""
    origins = np.asarray(points) + SHADOW_EPS * np.asarray(normals)
    towards_sun = np.tile(-solar_to_vector(sun), (len(origins), 1))
    blocked = np.zeros(len(origins), dtype=bool)
    if boxes:
        lo = np.stack([b.lo for b in boxes])
        hi = np.stack([b.hi for b in boxes])
        entries, _ = _slab_test(origins, towards_sun, lo, hi)
        blocked = np.any(np.isfinite(entries), axis=1)
    return np.asarray((~blocked).astype(np.float64))


def shade(albedo: Array, visibility: Array, sky: Sequence[float]) -> Array:
    """albedo * (s + (1 - s) sky), per point."""
    s = np.asarray(visibility, dtype=np.float64)[..., None]
    return np.asarray(albedo * (s + (1.0 - s) * np.asarray(sky)))


def render_acquisition(
    scene: SceneSpec, acquisition: Acquisition
) -> AcquisitionTruth:
    height, width = scene.resolution
    boxes = scene.present_boxes(acquisition)
    rays = generate_view_rays(
        scene.camera(acquisition), scene.h_min, scene.h_max
    )
    hits = trace_primary(scene, rays, boxes)
    if np.any(hits.primitive == MISS):
        error(f'Scene {scene.name}: some view rays miss the ground.')
    visible = sun_visibility(hits.points, hits.normals, acquisition.sun, boxes)
    rgb = shade(hits.albedo, visible, scene.sky)
    transient = np.isin(
        hits.primitive, [k for k, b in enumerate(scene.boxes) if b.transient]
    )
    return AcquisitionTruth(
        rgb=rgb.reshape(height, width, 3),
        shadow=(visible < 0.5).reshape(height, width),
        albedo=hits.albedo.reshape(height, width, 3),
        transient=transient.reshape(height, width),
    )


def nadir_hits(
    scene: SceneSpec,
    spacing: float | None = None,
    boxes: Sequence[Box] | None = None,
) -> tuple[DemGrid, Hits]:
    """Nadir ray casting at the centres of a DEM grid over the footprint
    (default: permanent boxes only)."""
    grid = DemGrid.covering(scene.bounds, spacing or scene.dem_spacing)
    rays = generate_view_rays(grid.nadir_camera(), scene.h_min, scene.h_max)
    return grid, trace_primary(scene, rays, boxes)


def render_dem(scene: SceneSpec, spacing: float | None = None) -> DemGrid:
    grid, hits = nadir_hits(scene, spacing)
    return DemGrid(
        grid.x0, grid.y0, grid.spacing, hits.points[:, 2].reshape(grid.shape)
    )


def nadir_albedo(scene: SceneSpec, spacing: float | None = None) -> Array:
    """Surface albedo seen from straight above, (rows, cols, 3)."""
    grid, hits = nadir_hits(scene, spacing)
    return hits.albedo.reshape(grid.shape + (3,))


def shadowed_cells(
    scene: SceneSpec,
    suns: Sequence[SolarDirection],
    spacing: float | None = None,
    every: bool = False,
) -> Array:
    """DEM cells whose surface is shadowed under any (or every) sun."""
    grid, hits = nadir_hits(scene, spacing)
    boxes = scene.present_boxes()
    masks = [
        sun_visibility(hits.points, hits.normals, sun, boxes) < 0.5
        for sun in suns
    ]
    if not masks:
        return np.zeros(grid.shape, dtype=bool)
    combine = np.logical_and if every else np.logical_or
    return np.asarray(combine.reduce(masks)).reshape(grid.shape)


def persistent_shadow_mask(
    scene: SceneSpec,
    suns: Sequence[SolarDirection],
    spacing: float | None = None,
) -> Array:
    """DEM cells shadowed in every acquisition lit by one of suns."""
    return shadowed_cells(scene, suns, spacing, every=True)


def transient_footprint(
    scene: SceneSpec, spacing: float | None = None
) -> Array:
    """DEM cells covered by some transient box."""
    grid, hits = nadir_hits(scene, spacing, scene.boxes)
    transient = [k for k, b in enumerate(scene.boxes) if b.transient]
    return np.isin(hits.primitive, transient).reshape(grid.shape)


def render_ground_truth(scene: SceneSpec) -> GroundTruthBundle:
    return GroundTruthBundle(
        [render_acquisition(scene, a) for a in scene.acquisitions],
        render_dem(scene),
    )


class AnalyticField:
    """The scene as a density field: SOLID_DENSITY inside the ground
    half-space and the boxes, zero elsewhere, with the oracle's albedo,
    binary sun visibility and constant sky."""

    def __init__(
        self,
        scene: SceneSpec,
        boxes: Sequence[Box] | None = None,
        density: float = SOLID_DENSITY,
    ) -> None:
        self.scene = scene
        self.boxes = list(scene.present_boxes() if boxes is None else boxes)
        self.density = density

    def _containing(self, points: Array) -> Array:
        """Index of the solid holding each point: box index, GROUND, or
        MISS for empty space. Boxes take precedence over the ground."""
        owner = np.where(
            points[:, 2] <= self.scene.ground_altitude, GROUND, MISS
        )
        for k in range(len(self.boxes) - 1, -1, -1):
            owner = np.where(self.boxes[k].contains(points), k, owner)
        return owner

    def _visibility(
        self,
        points: Array,
        owner: Array,
        sun: Array,
        views: Array | None = None,
    ) -> Array:
        """Points inside a solid stand for the surface the view ray
        entered through: for a box the face crossed by tracing back along
        the view direction, or without one the nearest face other than
        the bottom. That face is self-shadowed when its outward normal
        points away from the sun; otherwise the sun ray is moved to where
        it leaves the solid before testing the other boxes."""
        towards = -np.asarray(sun)
        starts = np.array(points)
        blocked = np.zeros(len(points), dtype=bool)
        in_ground = owner == GROUND
        with np.errstate(divide='ignore', invalid='ignore'):
            lift = (self.scene.ground_altitude - points[:, 2]) / towards[:, 2]
        starts[in_ground] += lift[in_ground, None] * towards[in_ground]
        for k, box in enumerate(self.boxes):
            inside = owner == k
            if not np.any(inside):
                continue
            p, u = points[inside], towards[inside]
            if views is None:
                gaps = np.hstack([p - box.lo, box.hi - p])
                gaps[:, 2] = np.inf  # views from above never see the bottom
                seen = gaps.argmin(axis=1)
            else:
                _, seen = _leaving(box, p, -views[inside])
            normals = FACE_NORMALS[seen]
            blocked[inside] = np.einsum('ij,ij->i', normals, u) <= 0
            distance, _ = _leaving(box, p, u)
            starts[inside] = p + distance[:, None] * u
        starts += SHADOW_EPS * towards
        for k, box in enumerate(self.boxes):
            hit = np.isfinite(box_entry(starts, towards, box)) & (owner != k)
            blocked |= hit
        return np.asarray((~blocked).astype(np.float64))

    def forward(
        self,
        tape: Tape,
        points: Array,
        sun_vectors: Array | None,
        noise_rng: np.random.Generator | None = None,
        progress: float = 1.0,
        shading: bool = True,
        detach_trunk: bool = False,
        view_vectors: Array | None = None,
    ) -> FieldOutputs:
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        n = len(points)
        owner = self._containing(points)
        palette = np.vstack(
            [np.asarray(b.albedo, float) for b in self.boxes]
            + [np.asarray(self.scene.ground_albedo, float)] * 2
        )
        # GROUND (-1) and MISS (-2) index the two trailing ground rows
        albedo = palette[owner]
        sigma = np.where(owner == MISS, 0.0, self.density)
        outside = np.zeros(n, dtype=bool)
        if not shading:
            return FieldOutputs(
                tape.constant(sigma),
                tape.constant(albedo),
                None,
                None,
                outside,
            )
        if sun_vectors is None:
            error('Shading needs the sun direction of every point.')
        suns = np.broadcast_to(np.asarray(sun_vectors, float), (n, 3))
        views: Array | None = None
        if view_vectors is not None:
            views = np.broadcast_to(np.asarray(view_vectors, float), (n, 3))
        return FieldOutputs(
            tape.constant(sigma),
            tape.constant(albedo),
            tape.constant(self._visibility(points, owner, suns, views)),
            tape.constant(np.tile(np.asarray(self.scene.sky, float), (n, 1))),
            outside,
        )


# Scene generation

FOOTPRINT = 64.0
SLAB_BOTTOM = -4.0
SLAB_TOP = 32.0


def _colour(rng: np.random.Generator, low: float, high: float) -> tuple:
    return tuple(round(float(c), 3) for c in rng.uniform(low, high, 3))


def _on_ground(
    cx: float, cy: float, sx: float, sy: float, height: float
) -> tuple[tuple[float, float, float], tuple[float, float, float]]:
    return (
        (round(cx, 3), round(cy, 3), round(height / 2, 3)),
        (round(sx, 3), round(sy, 3), round(height, 3)),
    )


def _blocks(rng: np.random.Generator, cells: int = 3) -> list[Box]:
    """Buildings on a jittered grid, some cells left empty."""
    boxes = []
    pitch = FOOTPRINT / (cells + 1)
    for i in range(cells):
        for j in range(cells):
            if rng.random() < 0.25:
                continue
            cx = -FOOTPRINT / 2 + pitch * (j + 1) + rng.uniform(-2, 2)
            cy = -FOOTPRINT / 2 + pitch * (i + 1) + rng.uniform(-2, 2)
            sx, sy = rng.uniform(6, pitch - 4, 2)
            height = rng.uniform(4, 20)
            center, size = _on_ground(cx, cy, sx, sy, height)
            boxes.append(Box(center, size, _colour(rng, 0.3, 0.9)))
    return boxes


def _courtyard(rng: np.random.Generator) -> list[Box]:
    """Four wings around an enclosed yard."""
    height = float(rng.uniform(10, 16))
    outer, wing = 40.0, 8.0
    albedo = _colour(rng, 0.4, 0.8)
    boxes = []
    for cx, cy, sx, sy in [
        (0.0, (outer - wing) / 2, outer, wing),
        (0.0, -(outer - wing) / 2, outer, wing),
        ((outer - wing) / 2, 0.0, wing, outer - 2 * wing),
        (-(outer - wing) / 2, 0.0, wing, outer - 2 * wing),
    ]:
        center, size = _on_ground(cx, cy, sx, sy, height)
        boxes.append(Box(center, size, albedo))
    return boxes


def _cars(rng: np.random.Generator, count: int) -> list[Box]:
    cars = []
    for _ in range(count):
        cx, cy = rng.uniform(-FOOTPRINT / 2 + 4, FOOTPRINT / 2 - 4, 2)
        sx, sy = (4.5, 2.0) if rng.random() < 0.5 else (2.0, 4.5)
        center, size = _on_ground(cx, cy, sx, sy, 1.5)
        cars.append(Box(center, size, _colour(rng, 0.0, 1.0), transient=True))
    return cars


def _sun_clusters(
    rng: np.random.Generator, per_cluster: int
) -> tuple[list[tuple[float, float]], list[tuple[float, float]], tuple]:
    """Morning and afternoon sun groups plus one sun between them."""
    centre_el = float(rng.uniform(50, 62))
    morning_az = float(rng.uniform(120, 150))
    afternoon_az = float(rng.uniform(30, 60))

    def cluster(az: float) -> list[tuple[float, float]]:
        return [
            (
                round(centre_el + float(rng.uniform(-4, 4)), 2),
                round(az + float(rng.uniform(-5, 5)), 2),
            )
            for _ in range(per_cluster)
        ]

    between = (round(centre_el, 2), round((morning_az + afternoon_az) / 2, 2))
    return cluster(morning_az), cluster(afternoon_az), between


def generate_scene(
    preset: str,
    seed: int = 0,
    resolution: tuple[int, int] = (64, 64),
    n_acquisitions: int = 10,
) -> SceneSpec:
    """A procedural scene with acquisitions under two sun clusters."""
    if preset not in SCENE_PRESETS:
        error(
            f'Unknown scene preset {preset!r}; choose one of:'
            f' {", ".join(SCENE_PRESETS)}.'
        )
    if n_acquisitions < 2:
        error('A scene needs at least two acquisitions.')
    rng = named_rng(seed, f'scene.{preset}')
    boxes: list[Box] = []
    if preset == 'single_box':
        center, size = _on_ground(0.0, 0.0, 16.0, 16.0, 12.0)
        boxes = [Box(center, size, (0.8, 0.6, 0.4))]
    elif preset == 'blocks':
        boxes = _blocks(rng)
    elif preset == 'courtyard':
        boxes = _courtyard(rng)
    elif preset == 'transient':
        boxes = _blocks(rng, cells=2) + _cars(rng, 4)

    morning, afternoon, between = _sun_clusters(rng, 3)
    suns = [
        (morning if k % 2 == 0 else afternoon)[(k // 2) % 3]
        for k in range(n_acquisitions)
    ]
    transients = [k for k, b in enumerate(boxes) if b.transient]
    acquisitions = []
    for sun in suns:
        present = [k for k in transients if rng.random() < 0.5]
        acquisitions.append(
            Acquisition(
                off_nadir=round(float(rng.uniform(0, 25)), 2),
                view_azimuth=round(float(rng.uniform(0, 360)), 2),
                sun_elevation=sun[0],
                sun_azimuth=sun[1],
                transients=present,
            )
        )
    half = FOOTPRINT / 2
    return SceneSpec(
        name=f'{preset}-{seed}',
        x_min=-half,
        x_max=half,
        y_min=-half,
        y_max=half,
        h_min=SLAB_BOTTOM,
        h_max=SLAB_TOP,
        ground_altitude=0.0,
        ground_albedo=_colour(rng, 0.3, 0.6),
        sky=(0.2, 0.3, 0.5),
        boxes=boxes,
        acquisitions=acquisitions,
        resolution=resolution,
        held_out_sun=between,
    )


# Dataset files


def acquisition_stem(k: int) -> str:
    return f'acq_{k:03d}'


def write_dataset(
    scene: SceneSpec, bundle: GroundTruthBundle, out_dir: str
) -> list[str]:
    """Writes the scene, every acquisition's images and masks, the DEM
    and a manifest; returns the paths written."""
    os.makedirs(out_dir, exist_ok=True)
    written = [os.path.join(out_dir, SCENE_FILE)]
    scene.save(written[0])
    rows = []
    pairs = zip(scene.acquisitions, bundle.acquisitions)
    for k, (acq, truth) in enumerate(pairs):
        stem = os.path.join(out_dir, acquisition_stem(k))
        files = {
            'rgb': f'{stem}.rgb.f32',
            'albedo': f'{stem}.albedo.f32',
            'shadow': f'{stem}.shadow.f32',
            'transient': f'{stem}.transient.f32',
        }
        write_float_planes(files['rgb'], truth.rgb)
        write_float_planes(files['albedo'], truth.albedo)
        write_float_planes(files['shadow'], truth.shadow.astype(float))
        write_float_planes(files['transient'], truth.transient.astype(float))
        write_png(f'{stem}.png', truth.rgb)
        write_png(f'{stem}.shadow.png', truth.shadow.astype(float))
        written.extend(files.values())
        written.extend([f'{stem}.png', f'{stem}.shadow.png'])
        rows.append(
            {
                'index': k,
                'stem': acquisition_stem(k),
                'off_nadir': acq.off_nadir,
                'view_azimuth': acq.view_azimuth,
                'sun_elevation': acq.sun_elevation,
                'sun_azimuth': acq.sun_azimuth,
                'transients': acq.transients,
            }
        )
    dem_path = os.path.join(out_dir, 'dem.f32')
    write_float_planes(dem_path, bundle.dem.values)
    manifest = {
        'scene': scene.name,
        'dem': {
            'file': 'dem.f32',
            'x0': bundle.dem.x0,
            'y0': bundle.dem.y0,
            'spacing': bundle.dem.spacing,
        },
        'acquisitions': rows,
    }
    manifest_path = os.path.join(out_dir, MANIFEST_FILE)
    with open(manifest_path, 'w') as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    written.extend([dem_path, manifest_path])
    LOGGER.info(f'Dataset for {scene.name} written to {out_dir}.')
    return written


def read_dataset(out_dir: str) -> tuple[SceneSpec, GroundTruthBundle]:
    scene = SceneSpec.load(os.path.join(out_dir, SCENE_FILE))
    try:
        with open(os.path.join(out_dir, MANIFEST_FILE)) as f:
            manifest = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise SNerfError(f'Cannot read dataset manifest in {out_dir}: {e}')
    truths = []
    for row in manifest['acquisitions']:
        stem = os.path.join(out_dir, row['stem'])
        truths.append(
            AcquisitionTruth(
                rgb=read_float_planes(f'{stem}.rgb.f32'),
                shadow=read_float_planes(f'{stem}.shadow.f32') > 0.5,
                albedo=read_float_planes(f'{stem}.albedo.f32'),
                transient=read_float_planes(f'{stem}.transient.f32') > 0.5,
            )
        )
    dem = manifest['dem']
    grid = DemGrid(
        dem['x0'],
        dem['y0'],
        dem['spacing'],
        read_float_planes(os.path.join(out_dir, dem['file'])),
    )
    return scene, GroundTruthBundle(truths, grid)


def acquisition_table(scene: SceneSpec) -> pd.DataFrame:
    """One row per acquisition with its view and sun angles."""
    return pd.DataFrame(
        [
            {
                'off_nadir': a.off_nadir,
                'view_azimuth': a.view_azimuth,
                'sun_elevation': a.sun_elevation,
                'sun_azimuth': a.sun_azimuth,
                'transients': len(a.transients),
            }
            for a in scene.acquisitions
        ]
    )


def condition_distance(a: Acquisition, b: Acquisition) -> float:
    """Angular distance between two acquisitions: view angle plus sun
    angle, degrees."""
    origin = vec3(0.0, 0.0, 0.0)
    view_a, view_b = (
        OrthoCamera.looking(
            x.off_nadir, x.view_azimuth, origin, (1, 1), (1, 1)
        )
        for x in (a, b)
    )
    return angle_between(view_a.direction, view_b.direction) + angle_between(
        solar_to_vector(a.sun), solar_to_vector(b.sun)
    )


def max_sun_separation(
    suns: Sequence[SolarDirection],
) -> tuple[SolarDirection, SolarDirection]:
    """The two suns furthest apart (first pair on ties)."""
    if len(suns) < 1:
        error('Need at least one sun.')
    best = (suns[0], suns[0])
    widest = -math.inf
    for i, a in enumerate(suns):
        for b in suns[i + 1 :]:
            angle = angle_between(solar_to_vector(a), solar_to_vector(b))
            if angle > widest:
                best, widest = (a, b), angle
    return best
