"""
Render
======

Differentiable volume rendering along altitude-sampled rays:

    alpha_i = 1 - exp(-sigma_i dx_i)
    T_1 = 1,  T_{i+1} = T_i (1 - alpha_i),  w_i = T_i alpha_i
    l_i = s_i + (1 - s_i) sky_i                  (irradiance)
    I_s = sum_i w_i a_i l_i                      (shaded colour)
    I   = sum_i w_i c_i                          (emissive colour)
    h   = sum_i w_i h_i                          (expected altitude)

plus full-image rendering with auxiliary maps and the image file
formats.
"""

from __future__ import annotations

import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum

import numpy as np
from PIL import Image

from snerf import autodiff as ad
from snerf.autodiff import Array, Tape, Value
from snerf.field import Field, FieldOutputs
from snerf.geometry import (
    OrthoCamera,
    RayBundle,
    SamplePoints,
    SceneBounds,
    SolarDirection,
    generate_view_rays,
    importance_resample,
    sample_altitudes,
    solar_to_vector,
)
from snerf.utils import SNerfError, error, resolve_threads

LOGGER = logging.getLogger(__name__)

PLANES_MAGIC = b'SNRFPLN1'
SHADOW_THRESHOLD = 0.5


@dataclass
class CompositeWeights:
    """Per-sample alphas, transparencies T_i and weights w_i, shape
    (R, N), plus the residual transparency T_{N+1}, shape (R,)."""

    alphas: Value
    transparencies: Value
    weights: Value
    residual: Value


def composite(sigmas: Value, deltas: Array) -> CompositeWeights:
    """Alpha compositing of densities (R, N) over segment lengths (R, N)."""
    deltas = np.asarray(deltas, dtype=np.float64)
    if sigmas.shape != deltas.shape:
        error(f'Densities {sigmas.shape} and deltas {deltas.shape} differ.')
    if np.any(sigmas.data < 0):
        error('Densities must be non-negative.')
    if np.any(deltas <= 0):
        error('Segment lengths must be positive.')
    n = sigmas.shape[-1]
    alphas = 1.0 - ad.exp(-(sigmas * deltas))
    running = ad.exclusive_cumprod(1.0 - alphas)
    transparencies = running[..., :n]
    return CompositeWeights(
        alphas=alphas,
        transparencies=transparencies,
        weights=transparencies * alphas,
        residual=running[..., n],
    )


def _per_channel(v: Value) -> Value:
    """(..., N) -> (..., N, 3) by repeating across RGB."""
    return ad.broadcast(ad.reshape(v, v.shape + (1,)), v.shape + (3,))


def mix_light(s: Value, sky: Value) -> Value:
    """Irradiance l = s * white + (1 - s) * sky; s (...,), sky (..., 3)."""
    s3 = _per_channel(s)
    return s3 + (1.0 - s3) * sky


def render_shaded(
    weights: CompositeWeights, albedos: Value, irradiances: Value
) -> Value:
    """Shaded colour, summing w_i (a_i * l_i) over the sample axis."""
    w3 = _per_channel(weights.weights)
    return ad.sum(w3 * (albedos * irradiances), axis=-2)


def render_emissive(weights: CompositeWeights, colors: Value) -> Value:
    w3 = _per_channel(weights.weights)
    return ad.sum(w3 * colors, axis=-2)


def estimate_altitude(weights: CompositeWeights, altitudes: Array) -> Value:
    """Expected altitude sum_i w_i h_i, not renormalized: rays with low
    opacity sum_i w_i bias it towards 0."""
    return ad.sum(weights.weights * altitudes, axis=-1)


class Lighting(Enum):
    SHADED = 'shaded'  # S-NeRF shading
    EMISSIVE = 'emissive'  # NeRF baseline: colour = albedo head
    ALBEDO = 'albedo'  # shadow-free rendering, l = 1
    SKY_ONLY = 'sky_only'  # every point in shadow, l = sky


@dataclass
class RayRender:
    """Differentiable per-ray results of one pass over a set of samples."""

    rgb: Value  # (R, 3)
    weights: CompositeWeights
    outputs: FieldOutputs


def render_samples(
    field: Field,
    tape: Tape,
    samples: SamplePoints,
    sun_vectors: Array,
    lighting: Lighting = Lighting.SHADED,
    noise_rng: np.random.Generator | None = None,
    progress: float = 1.0,
    detach_trunk: bool = False,
) -> RayRender:
    """Queries the field at every sample of every ray and composites.

    sun_vectors has shape (R, 3): one light direction per ray.
    """
    n_rays, n_samples = samples.n_rays, samples.n_samples
    shading = lighting in (Lighting.SHADED, Lighting.SKY_ONLY)
    per_sample_suns = np.repeat(np.asarray(sun_vectors), n_samples, axis=0)
    views: Array | None = None
    if samples.directions is not None:
        views = np.repeat(samples.directions, n_samples, axis=0)
    out = field.forward(
        tape,
        samples.positions.reshape(-1, 3),
        per_sample_suns if shading else None,
        noise_rng,
        progress,
        shading=shading,
        detach_trunk=detach_trunk,
        view_vectors=views,
    )
    sigma = ad.reshape(out.sigma, (n_rays, n_samples))
    albedo = ad.reshape(out.albedo, (n_rays, n_samples, 3))
    weights = composite(sigma, samples.deltas)
    if lighting is Lighting.SHADED:
        assert out.visibility is not None and out.sky is not None
        s = ad.reshape(out.visibility, (n_rays, n_samples))
        sky = ad.reshape(out.sky, (n_rays, n_samples, 3))
        rgb = render_shaded(weights, albedo, mix_light(s, sky))
    elif lighting is Lighting.SKY_ONLY:
        assert out.sky is not None
        sky = ad.reshape(out.sky, (n_rays, n_samples, 3))
        shadowed = tape.constant(np.zeros(sigma.shape))
        rgb = render_shaded(weights, albedo, mix_light(shadowed, sky))
    else:
        rgb = render_emissive(weights, albedo)
    return RayRender(rgb, weights, out)


def hierarchical_samples(
    field: Field,
    rays: RayBundle,
    sun_vectors: Array,
    n_coarse: int,
    n_fine: int,
    lighting: Lighting = Lighting.SHADED,
    jitter: np.random.Generator | None = None,
    noise_rng: np.random.Generator | None = None,
    progress: float = 1.0,
) -> SamplePoints:
    """Coarse stratified pass, then n_fine extra samples placed by the
    coarse compositing weights. The coarse pass is never differentiated."""
    coarse = sample_altitudes(rays, n_coarse, jitter)
    if n_fine <= 0:
        return coarse
    # density does not depend on the sun, so skip the shading heads
    coarse_pass = render_samples(
        field,
        Tape(record=False),
        coarse,
        sun_vectors,
        Lighting.EMISSIVE,
        noise_rng,
        progress,
    )
    return importance_resample(
        rays, coarse, coarse_pass.weights.weights.data, n_fine, jitter
    )


@dataclass
class RenderConfig:
    n_coarse: int = 64
    n_fine: int = 64
    hierarchical: bool = True
    lighting: Lighting = Lighting.SHADED
    chunk: int = 2048
    threads: int = 1


@dataclass
class RenderedImage:
    """Per-pixel maps of a rendered view, row-major (H, W, ...)."""

    rgb: Array  # (H, W, 3)
    altitude: Array  # (H, W)
    shadow: Array | None  # (H, W) composited s, None without shading
    albedo: Array  # (H, W, 3) composited surface albedo
    opacity: Array  # (H, W)

    def shadow_mask(self, threshold: float = SHADOW_THRESHOLD) -> Array:
        if self.shadow is None:
            error('This rendering has no solar visibility map.')
        return np.asarray(self.shadow < threshold)


def _render_chunk(
    field: Field,
    rays: RayBundle,
    sun_vectors: Array,
    config: RenderConfig,
) -> tuple[Array, Array, Array | None, Array, Array]:
    n_fine = config.n_fine if config.hierarchical else 0
    samples = hierarchical_samples(
        field, rays, sun_vectors, config.n_coarse, n_fine, config.lighting
    )
    tape = Tape(record=False)
    result = render_samples(field, tape, samples, sun_vectors, config.lighting)
    w = result.weights.weights
    n_rays, n_samples = samples.n_rays, samples.n_samples
    albedo = ad.reshape(result.outputs.albedo, (n_rays, n_samples, 3))
    shadow = None
    if result.outputs.visibility is not None:
        s = ad.reshape(result.outputs.visibility, (n_rays, n_samples))
        shadow = ad.sum(w * s, axis=-1).data
    return (
        result.rgb.data,
        estimate_altitude(result.weights, samples.altitudes).data,
        shadow,
        render_emissive(result.weights, albedo).data,
        ad.sum(w, axis=-1).data,
    )


def render_rays(
    field: Field,
    rays: RayBundle,
    sun_vectors: Array,
    config: RenderConfig,
) -> tuple[Array, Array, Array | None, Array, Array]:
    """Evaluation-mode rendering of a ray bundle in chunks.

    Returns rgb (R, 3), altitude (R,), shadow (R,) or None, albedo
    (R, 3) and opacity (R,). Chunks are independent, so they may run on
    several threads without changing the result.
    """
    sun_vectors = np.broadcast_to(np.asarray(sun_vectors), (len(rays), 3))
    starts = list(range(0, len(rays), max(1, config.chunk)))

    def run(start: int) -> tuple[Array, Array, Array | None, Array, Array]:
        stop = start + config.chunk
        return _render_chunk(
            field,
            rays.subset(slice(start, stop)),
            sun_vectors[start:stop],
            config,
        )

    threads = resolve_threads(config.threads)
    if threads == 1 or len(starts) == 1:
        parts = [run(start) for start in starts]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, starts))
    shadows = [p[2] for p in parts if p[2] is not None]
    return (
        np.concatenate([p[0] for p in parts]),
        np.concatenate([p[1] for p in parts]),
        np.concatenate(shadows) if shadows else None,
        np.concatenate([p[3] for p in parts]),
        np.concatenate([p[4] for p in parts]),
    )


def render_view(
    field: Field,
    camera: OrthoCamera,
    sun: SolarDirection,
    bounds: SceneBounds,
    config: RenderConfig | None = None,
) -> RenderedImage:
    """Renders every pixel of a view: coarse pass, importance
    resampling (if hierarchical), and all maps from the merged pass."""
    config = config or RenderConfig()
    height, width = camera.resolution
    rays = generate_view_rays(camera, bounds.h_min, bounds.h_max)
    rgb, altitude, shadow, albedo, opacity = render_rays(
        field, rays, solar_to_vector(sun), config
    )
    return RenderedImage(
        rgb=rgb.reshape(height, width, 3),
        altitude=altitude.reshape(height, width),
        shadow=None if shadow is None else shadow.reshape(height, width),
        albedo=albedo.reshape(height, width, 3),
        opacity=opacity.reshape(height, width),
    )


def to_uint8(image: Array) -> Array:
    """Values clamped to [0, 1], scaled to 8 bits without gamma."""
    return np.asarray(
        np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    )


def write_png(path: str, image: Array) -> None:
    """Writes an (H, W) or (H, W, 3) float image as an 8-bit PNG."""
    data = to_uint8(np.asarray(image, dtype=np.float64))
    mode = 'L' if data.ndim == 2 else 'RGB'
    Image.fromarray(data, mode=mode).save(path, format='PNG')


def read_png(path: str) -> Array:
    with Image.open(path) as img:
        return np.asarray(img, dtype=np.float64) / 255.0


def write_float_planes(path: str, image: Array) -> None:
    """Raw float32 planes: magic, width, height, channels (uint32 LE),
    then channel-major little-endian float32 data."""
    data = np.asarray(image, dtype=np.float64)
    if data.ndim == 2:
        data = data[..., None]
    if data.ndim != 3:
        error(f'Cannot write an array of shape {data.shape} as planes.')
    height, width, channels = data.shape
    with open(path, 'wb') as f:
        f.write(PLANES_MAGIC)
        f.write(struct.pack('<III', width, height, channels))
        f.write(np.moveaxis(data, -1, 0).astype('<f4').tobytes(order='C'))


def read_float_planes(path: str) -> Array:
    """Reads planes back as (H, W, C) float64 ((H, W) when C = 1)."""
    try:
        with open(path, 'rb') as f:
            blob = f.read()
    except OSError as e:
        raise SNerfError(f'Cannot read {path}: {e}')
    if blob[: len(PLANES_MAGIC)] != PLANES_MAGIC:
        error(f'{path} is not a float plane file.')
    width, height, channels = struct.unpack_from('<III', blob, 8)
    data = np.frombuffer(
        blob, dtype='<f4', count=width * height * channels, offset=20
    ).reshape(channels, height, width)
    image = np.moveaxis(data, 0, -1).astype(np.float64)
    return image[..., 0] if channels == 1 else image
