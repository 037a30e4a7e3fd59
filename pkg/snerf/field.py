"""
Field
=====

The implicit scene representation: a SIREN density trunk with an
albedo head, a solar-visibility head that reads the trunk features and
the sun direction, and a sky-colour head that reads the sun direction
alone.
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field
from typing import Any, Protocol

import numpy as np
import tomli_w

from snerf import autodiff as ad
from snerf.autodiff import Array, Tape, Value
from snerf.geometry import (
    SamplePoints,
    SceneBounds,
    SolarDirection,
    Vec3,
    solar_to_vector,
)
from snerf.utils import error, load_toml

LOGGER = logging.getLogger(__name__)

VISIBILITY_DEPTH = 4
SKY_BIAS_INIT = 0.3


@dataclass(frozen=True)
class NoiseSchedule:
    """Stddevs of the noise added to the unactivated sigma and s outputs,
    decaying linearly to zero at training fraction decay_end."""

    sigma_std: float = 10.0
    visibility_std: float = 1.0
    decay_end: float = 0.5

    def stds(self, progress: float) -> tuple[float, float]:
        if self.decay_end <= 0:
            return 0.0, 0.0
        scale = max(0.0, 1.0 - progress / self.decay_end)
        return self.sigma_std * scale, self.visibility_std * scale


@dataclass(frozen=True)
class NormalizationBox:
    """Axis-aligned box mapped affinely onto [-1, 1]^3."""

    lo: tuple[float, float, float]
    hi: tuple[float, float, float]

    @classmethod
    def from_bounds(cls, bounds: SceneBounds) -> NormalizationBox:
        return cls(
            (bounds.x_min, bounds.y_min, bounds.h_min),
            (bounds.x_max, bounds.y_max, bounds.h_max),
        )

    def normalize(self, points: Array) -> Array:
        lo, hi = np.asarray(self.lo), np.asarray(self.hi)
        return np.asarray(2.0 * (points - lo) / (hi - lo) - 1.0)

    def outside(self, points: Array, tolerance: float = 1e-9) -> Array:
        u = np.abs(self.normalize(points))
        return np.asarray(np.any(u > 1.0 + tolerance, axis=-1))


@dataclass(frozen=True)
class FieldArchitecture:
    width: int = 64
    depth: int = 8
    omega0: float = 30.0
    visibility_width: int = 0  # 0: same as width

    @property
    def hidden_visibility_width(self) -> int:
        return self.visibility_width or self.width


@dataclass
class FieldOutputs:
    """Differentiable outputs for N points. s and sky are None when the
    shading heads are switched off (NeRF baseline)."""

    sigma: Value  # (N,)
    albedo: Value  # (N, 3)
    visibility: Value | None  # (N,)
    sky: Value | None  # (N, 3)
    outside: Array  # (N,) bool: points outside the normalization box


@dataclass(frozen=True)
class FieldSample:
    sigma: float
    albedo: tuple[float, float, float]
    visibility: float | None
    sky: tuple[float, float, float] | None
    outside: bool = False


class Field(Protocol):
    """Anything render_view can render: learned or analytic.

    view_vectors, when given, is the travel direction (N, 3) of the ray
    each point was sampled on.
    """

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
    ) -> FieldOutputs: ...


def _uniform(
    rng: np.random.Generator, bound: float, shape: tuple[int, ...]
) -> Array:
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class SNerfField:
    architecture: FieldArchitecture
    box: NormalizationBox
    params: dict[str, Array]
    noise: NoiseSchedule = field(default_factory=NoiseSchedule)

    def bind(self, tape: Tape) -> dict[str, Value]:
        return {
            name: tape.parameter(name, value)
            for name, value in self.params.items()
        }

    def _trunk(self, p: dict[str, Value], x: Value) -> Value:
        h = x
        for i in range(self.architecture.depth):
            h = ad.sin(
                ad.affine(p[f'trunk.{i}.weight'], p[f'trunk.{i}.bias'], h),
                self.architecture.omega0,
            )
        return h

    def _visibility(
        self, p: dict[str, Value], features: Value, suns: Value
    ) -> Value:
        v = ad.concat([features, suns], axis=-1)
        for j in range(VISIBILITY_DEPTH - 1):
            v = ad.sin(
                ad.affine(
                    p[f'visibility.{j}.weight'], p[f'visibility.{j}.bias'], v
                ),
                self.architecture.omega0,
            )
        last = VISIBILITY_DEPTH - 1
        z = ad.affine(
            p[f'visibility.{last}.weight'], p[f'visibility.{last}.bias'], v
        )
        return ad.reshape(z, (z.shape[0],))

    def _sky(self, p: dict[str, Value], suns: Value) -> Value:
        return ad.relu(ad.affine(p['sky.weight'], p['sky.bias'], suns))

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
        """Evaluates the field at points (N, 3) lit from sun_vectors (N, 3).

        With noise_rng the training noise for `progress` (fraction of
        training done) is added to the unactivated sigma and s outputs.
        detach_trunk stops gradients from reaching the trunk. The field
        does not depend on the viewing direction; view_vectors is unused.
        """
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        n = points.shape[0]
        p = self.bind(tape)
        features = self._trunk(p, tape.constant(self.box.normalize(points)))
        if detach_trunk:
            features = ad.stop_gradient(features)
        sigma_std, visibility_std = self.noise.stds(progress)

        z_sigma = ad.affine(p['sigma.weight'], p['sigma.bias'], features)
        z_sigma = ad.reshape(z_sigma, (n,))
        if noise_rng is not None and sigma_std > 0:
            z_sigma = z_sigma + noise_rng.normal(0.0, sigma_std, n)
        sigma = ad.relu(z_sigma)
        albedo = ad.sigmoid(
            ad.affine(p['albedo.weight'], p['albedo.bias'], features)
        )
        outside = self.box.outside(points)
        if not shading:
            return FieldOutputs(sigma, albedo, None, None, outside)

        if sun_vectors is None:
            error('Shading heads need the sun direction of every point.')
        suns = tape.constant(
            np.broadcast_to(np.asarray(sun_vectors, float), (n, 3))
        )
        z_s = self._visibility(p, features, suns)
        if noise_rng is not None and visibility_std > 0:
            z_s = z_s + noise_rng.normal(0.0, visibility_std, n)
        return FieldOutputs(
            sigma, albedo, ad.sigmoid(z_s), self._sky(p, suns), outside
        )

    def query_batch(
        self,
        points: Array | SamplePoints,
        sun: SolarDirection,
        noise_rng: np.random.Generator | None = None,
        progress: float = 1.0,
        shading: bool = True,
    ) -> list[FieldSample]:
        if isinstance(points, SamplePoints):
            points = points.positions
        xyz = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        out = self.forward(
            Tape(record=False),
            xyz,
            np.tile(solar_to_vector(sun), (len(xyz), 1)),
            noise_rng,
            progress,
            shading,
        )
        return _samples(out)

    def query(
        self,
        x: Vec3,
        sun: SolarDirection,
        noise_rng: np.random.Generator | None = None,
        progress: float = 1.0,
        shading: bool = True,
    ) -> FieldSample:
        return self.query_batch(
            np.asarray(x).reshape(1, 3), sun, noise_rng, progress, shading
        )[0]

    def parameter_count(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def save(self, path: str, extra: dict[str, Any] | None = None) -> None:
        """Writes the parameters in checkpoint format plus a TOML sidecar
        (path + '.toml') with the architecture, box and noise schedule."""
        ad.save_checkpoint(path, self.params)
        sidecar = {
            'architecture': {
                'width': self.architecture.width,
                'depth': self.architecture.depth,
                'omega0': self.architecture.omega0,
                'visibility_width': self.architecture.visibility_width,
            },
            'box': {'lo': list(self.box.lo), 'hi': list(self.box.hi)},
            'noise': {
                'sigma_std': self.noise.sigma_std,
                'visibility_std': self.noise.visibility_std,
                'decay_end': self.noise.decay_end,
            },
        }
        if extra:
            sidecar.update(extra)
        with open(sidecar_path(path), 'wb') as f:
            tomli_w.dump(sidecar, f)


def sidecar_path(checkpoint_path: str) -> str:
    return f'{checkpoint_path}.toml'


def load_field(path: str) -> tuple[SNerfField, dict[str, Any]]:
    """Reads a field checkpoint and its sidecar; returns the sidecar too."""
    if not os.path.exists(path) or not os.path.exists(sidecar_path(path)):
        error(f'No field checkpoint (and sidecar) at {path}.')
    meta = load_toml(sidecar_path(path))
    arch = FieldArchitecture(**meta['architecture'])
    box = NormalizationBox(
        tuple(meta['box']['lo']),  # type: ignore[arg-type]
        tuple(meta['box']['hi']),  # type: ignore[arg-type]
    )
    noise = NoiseSchedule(**meta['noise'])
    params = ad.load_checkpoint(path)
    expected = _parameter_names(arch)
    if set(params) != expected:
        error(
            f'Checkpoint {path} does not match its architecture:'
            f' missing {sorted(expected - set(params))},'
            f' unexpected {sorted(set(params) - expected)}.'
        )
    return SNerfField(arch, box, params, noise), meta


def _layer_shapes(arch: FieldArchitecture) -> dict[str, tuple[int, int]]:
    """(n_in, n_out) of every affine layer, in initialization order."""
    w, vw = arch.width, arch.hidden_visibility_width
    shapes: dict[str, tuple[int, int]] = {}
    for i in range(arch.depth):
        shapes[f'trunk.{i}'] = (3 if i == 0 else w, w)
    shapes['sigma'] = (w, 1)
    shapes['albedo'] = (w, 3)
    for j in range(VISIBILITY_DEPTH):
        n_in = w + 3 if j == 0 else vw
        n_out = 1 if j == VISIBILITY_DEPTH - 1 else vw
        shapes[f'visibility.{j}'] = (n_in, n_out)
    shapes['sky'] = (3, 3)
    return shapes


def _parameter_names(arch: FieldArchitecture) -> set[str]:
    return {
        f'{layer}.{kind}'
        for layer in _layer_shapes(arch)
        for kind in ('weight', 'bias')
    }


def init_siren(
    rng: np.random.Generator,
    width: int = 64,
    depth: int = 8,
    omega0: float = 30.0,
    box: NormalizationBox | None = None,
    visibility_width: int = 0,
    noise: NoiseSchedule | None = None,
) -> SNerfField:
    """SIREN initialization: the first trunk layer is uniform in
    +-1/n_in, every later layer in +-sqrt(6/n_in)/omega0. The sky head
    starts with a positive bias so its ReLU is live."""
    if width < 1 or depth < 1:
        error(f'Field width ({width}) and depth ({depth}) must be >= 1.')
    arch = FieldArchitecture(width, depth, omega0, visibility_width)
    params: dict[str, Array] = {}
    for layer, (n_in, n_out) in _layer_shapes(arch).items():
        if layer in ('trunk.0', 'sky'):
            bound = 1.0 / n_in
        else:
            bound = math.sqrt(6.0 / n_in) / omega0
        params[f'{layer}.weight'] = _uniform(rng, bound, (n_in, n_out))
        if layer == 'sky':
            params[f'{layer}.bias'] = np.full(n_out, SKY_BIAS_INIT)
        else:
            params[f'{layer}.bias'] = _uniform(rng, bound, (n_out,))
    return SNerfField(
        arch,
        box or NormalizationBox((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0)),
        params,
        noise or NoiseSchedule(),
    )


def _samples(out: FieldOutputs) -> list[FieldSample]:
    samples = []
    for k in range(out.sigma.shape[0]):
        samples.append(
            FieldSample(
                sigma=float(out.sigma.data[k]),
                albedo=tuple(out.albedo.data[k]),  # type: ignore[arg-type]
                visibility=(
                    None
                    if out.visibility is None
                    else float(out.visibility.data[k])
                ),
                sky=(
                    None
                    if out.sky is None
                    else tuple(out.sky.data[k])  # type: ignore[arg-type]
                ),
                outside=bool(out.outside[k]),
            )
        )
    return samples
