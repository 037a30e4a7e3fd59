"""
Train
=====

The training objective (pixel RGB loss plus the solar correction
terms), batch construction over pixel rays and solar correction rays,
and the optimization loop for the three modes:

    nerf          emissive baseline, colour = albedo head
    snerf_no_sc   shaded model without solar correction
    snerf_sc      shaded model with solar correction
"""

from __future__ import annotations

import dataclasses
import logging
import math
import os
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Sequence

import numpy as np
import pandas as pd

from snerf import autodiff as ad
from snerf.autodiff import AdamState, Array, AutodiffError, Tape, Value
from snerf.config import SNerfParams
from snerf.field import (
    FieldArchitecture,
    NoiseSchedule,
    NormalizationBox,
    SNerfField,
    init_siren,
    load_field,
)
from snerf.geometry import (
    OrthoCamera,
    RayBundle,
    SceneBounds,
    SolarDirection,
    generate_solar_correction_rays,
    generate_view_rays,
    interpolate_solar_path,
    sample_altitudes,
    solar_to_vector,
)
from snerf.oracle import GroundTruthBundle, SceneSpec, max_sun_separation
from snerf.render import (
    CompositeWeights,
    Lighting,
    composite,
    hierarchical_samples,
    render_samples,
)
from snerf.utils import SNerfError, error, named_rng, warn

LOGGER = logging.getLogger(__name__)

HISTORY_COLUMNS = ['iteration', 'rgb_loss', 'sc_loss', 'lr', 'noise_sigma']
SHADING_PARAMETERS = ('visibility.', 'sky.')


class TrainingError(SNerfError):
    pass


class Mode(Enum):
    NERF = 'nerf'
    SNERF_NO_SC = 'snerf_no_sc'
    SNERF_SC = 'snerf_sc'

    @property
    def lighting(self) -> Lighting:
        return Lighting.EMISSIVE if self is Mode.NERF else Lighting.SHADED

    @property
    def solar_correction(self) -> bool:
        return self is Mode.SNERF_SC

    @classmethod
    def parse(cls, name: str) -> Mode:
        try:
            return cls(name)
        except ValueError:
            error(
                f'Unknown training mode {name!r}; choose one of:'
                f' {", ".join(m.value for m in cls)}.'
            )


class SolarPolicy(Enum):
    SOLAR_PATH = 'solar_path'  # slerp between two endpoint suns
    HEMISPHERE = 'hemisphere'  # uniform above a minimum elevation
    ANGLES = 'angles'  # a given list of suns


@dataclass
class TrainConfig:
    mode: Mode = Mode.SNERF_SC
    lambda_s: float = 0.05
    batch_size: int = 256
    sc_batch_size: int = 128
    n_coarse: int = 32
    n_fine: int = 32
    hierarchical: bool = True
    lr_start: float = 5e-4
    lr_end: float = 5e-5
    iterations: int = 20000
    seed: int = 0
    log_every: int = 100
    checkpoint_every: int = 5000
    architecture: FieldArchitecture = field(default_factory=FieldArchitecture)
    noise: NoiseSchedule = field(default_factory=NoiseSchedule)
    sc_policy: SolarPolicy = SolarPolicy.SOLAR_PATH
    sun_from: SolarDirection | None = None
    sun_to: SolarDirection | None = None
    sc_angles: list[SolarDirection] = field(default_factory=list)
    min_elevation: float = 10.0

    def __post_init__(self) -> None:
        if self.lambda_s < 0:
            error(f'lambda_s must be non-negative, not {self.lambda_s}.')
        if self.batch_size < 1 or self.sc_batch_size < 1:
            error('Batch sizes must be positive.')
        if self.iterations < 1:
            error(f'Need at least one iteration, not {self.iterations}.')
        if self.lr_start <= 0 or self.lr_end <= 0:
            error('Learning rates must be positive.')
        if (self.sun_from is None) != (self.sun_to is None):
            error('Give both solar path endpoints or neither.')
        if self.sc_policy is SolarPolicy.ANGLES and not self.sc_angles:
            error("Solar correction policy 'angles' needs a list of angles.")
        if not 0.0 <= self.min_elevation < 90.0:
            error(f'Minimum elevation {self.min_elevation} not in [0, 90).')

    @property
    def effective_lambda_s(self) -> float:
        return self.lambda_s if self.mode.solar_correction else 0.0

    @classmethod
    def from_params(
        cls, params: SNerfParams, mode: str | None = None
    ) -> TrainConfig:
        """Builds the config from resolved parameters; mode overrides
        train.mode."""
        chosen = Mode.parse(mode or params['train.mode'])
        if chosen is Mode.NERF and params.is_explicit('train.lambda_s'):
            warn('train.lambda_s is ignored in mode nerf.')
        sc = params.solar_correction
        try:
            return cls(
                mode=chosen,
                lambda_s=params['train.lambda_s'],
                batch_size=params['train.batch_size'],
                sc_batch_size=sc.batch_size,
                n_coarse=params['sampling.n_coarse'],
                n_fine=params['sampling.n_fine'],
                hierarchical=params['sampling.hierarchical'],
                lr_start=params['train.lr_start'],
                lr_end=params['train.lr_end'],
                iterations=params['train.iterations'],
                seed=params['train.seed'],
                log_every=params['train.log_every'],
                checkpoint_every=params['checkpoint.every'],
                architecture=FieldArchitecture(**params['field']),
                noise=NoiseSchedule(**params['noise']),
                sc_policy=SolarPolicy(sc.policy),
                sun_from=_sun_or_none(sc.sun_from),
                sun_to=_sun_or_none(sc.sun_to),
                sc_angles=[_sun(a) for a in sc.angles],
                min_elevation=sc.min_elevation,
            )
        except ValueError as e:
            raise SNerfError(f'Invalid training configuration: {e}')


def _sun(pair: Sequence[float]) -> SolarDirection:
    if len(pair) != 2:
        error(f'Sun angles must be [elevation, azimuth], not {pair}.')
    return SolarDirection(float(pair[0]), float(pair[1]))


def _sun_or_none(pair: Sequence[float]) -> SolarDirection | None:
    return _sun(pair) if pair else None


@dataclass
class TrainSet:
    """Training images (K, H, W, 3) with the camera and sun of each."""

    images: Array
    cameras: list[OrthoCamera]
    suns: list[SolarDirection]
    bounds: SceneBounds
    rays: RayBundle = field(init=False)

    def __post_init__(self) -> None:
        self.images = np.asarray(self.images, dtype=np.float64)
        if len(self.cameras) == 0:
            error('The training set is empty.')
        if not len(self.images) == len(self.cameras) == len(self.suns):
            error('Each training image needs one camera and one sun.')
        if self.images.ndim != 4 or self.images.shape[-1] != 3:
            error(f'Images must be (K, H, W, 3), not {self.images.shape}.')
        for camera in self.cameras:
            if tuple(camera.resolution) != self.images.shape[1:3]:
                error(
                    f'Camera resolution {camera.resolution} does not match'
                    f' the images {self.images.shape[1:3]}.'
                )
        self.rays = RayBundle.concatenate(
            [
                generate_view_rays(c, self.bounds.h_min, self.bounds.h_max)
                for c in self.cameras
            ]
        )

    def __len__(self) -> int:
        return len(self.cameras)

    @property
    def pixels_per_image(self) -> int:
        return int(self.images.shape[1] * self.images.shape[2])

    @classmethod
    def from_scene(
        cls,
        scene: SceneSpec,
        bundle: GroundTruthBundle,
        indices: Sequence[int] | None = None,
    ) -> TrainSet:
        chosen = indices
        if chosen is None:
            chosen = list(range(len(scene.acquisitions)))
        return cls(
            np.stack([bundle.acquisitions[k].rgb for k in chosen]),
            [scene.camera(scene.acquisitions[k]) for k in chosen],
            [scene.acquisitions[k].sun for k in chosen],
            scene.bounds,
        )


@dataclass
class PixelBatch:
    rays: RayBundle
    colors: Array  # (N, 3)
    sun_vectors: Array  # (N, 3)
    image_index: Array  # (N,)


@dataclass
class SolarBatch:
    rays: RayBundle
    suns: list[SolarDirection]
    t: Array | None  # interpolation parameters, solar_path policy only

    @property
    def sun_vectors(self) -> Array:
        return np.stack([solar_to_vector(s) for s in self.suns])


def sample_pixel_batch(
    train_set: TrainSet, n: int, rng: np.random.Generator
) -> PixelBatch:
    """n pixels drawn uniformly over all (image, pixel) pairs."""
    per_image = train_set.pixels_per_image
    flat = rng.integers(0, len(train_set) * per_image, n)
    image_index = flat // per_image
    colors = train_set.images.reshape(-1, 3)[flat]
    sun_vectors = np.stack([solar_to_vector(s) for s in train_set.suns])
    return PixelBatch(
        train_set.rays.subset(flat),
        colors,
        sun_vectors[image_index],
        image_index,
    )


def solar_path_endpoints(
    config: TrainConfig, train_suns: Sequence[SolarDirection]
) -> tuple[SolarDirection, SolarDirection]:
    """Configured endpoints, else the two training suns furthest apart."""
    if config.sun_from is not None and config.sun_to is not None:
        return config.sun_from, config.sun_to
    return max_sun_separation(train_suns)


def _draw_suns(
    config: TrainConfig,
    count: int,
    rng: np.random.Generator,
    train_suns: Sequence[SolarDirection],
) -> tuple[list[SolarDirection], Array | None]:
    if config.sc_policy is SolarPolicy.SOLAR_PATH:
        a, b = solar_path_endpoints(config, train_suns)
        t = rng.random(count)
        return [interpolate_solar_path(a, b, float(x)) for x in t], t
    if config.sc_policy is SolarPolicy.HEMISPHERE:
        # uniform on the spherical cap above min_elevation
        lowest = math.sin(math.radians(config.min_elevation))
        z = rng.uniform(lowest, 1.0, count)
        z = np.maximum(z, 1e-9)
        azimuth = rng.uniform(0.0, 360.0, count)
        return [
            SolarDirection(math.degrees(math.asin(float(h))), float(az))
            for h, az in zip(z, azimuth)
        ], None
    picks = rng.integers(0, len(config.sc_angles), count)
    return [config.sc_angles[k] for k in picks], None


def sample_sc_batch(
    config: TrainConfig,
    bounds: SceneBounds,
    rng: np.random.Generator,
    train_suns: Sequence[SolarDirection] = (),
) -> SolarBatch:
    """Solar correction rays, each with its own sun drawn by the
    configured policy."""
    suns, t = _draw_suns(config, config.sc_batch_size, rng, train_suns)
    rays = RayBundle.concatenate(
        [generate_solar_correction_rays(bounds, sun, 1, rng) for sun in suns]
    )
    return SolarBatch(rays, suns, t)


def rgb_loss(predicted: Value, observed: Array) -> Value:
    """Mean over rays of the squared colour error summed over channels."""
    if predicted.shape != np.shape(observed):
        error(
            f'Predicted colours {predicted.shape} and observed'
            f' {np.shape(observed)} differ.'
        )
    residual = predicted - np.asarray(observed, dtype=np.float64)
    return ad.mean(ad.sum(ad.square(residual), axis=-1))


def solar_correction_loss(
    transparencies: Value, visibility: Value, weights: Value
) -> Value:
    """Mean over solar rays of sum_i (T_i - s_i)^2 + (1 - sum_i w_i s_i).

    T and w are treated as constants, so gradients reach s only.
    """
    t = ad.stop_gradient(transparencies)
    w = ad.stop_gradient(weights)
    squares = ad.sum(ad.square(t - visibility), axis=-1)
    lit = 1.0 - ad.sum(w * visibility, axis=-1)
    return ad.mean(squares + lit)


def total_loss(
    rgb: Value, sc: Value | None, lambda_s: float, mode: Mode
) -> Value:
    if not mode.solar_correction or sc is None:
        return rgb
    return rgb + lambda_s * sc


def learning_rate(config: TrainConfig, iteration: int) -> float:
    """Exponential decay from lr_start to lr_end over all iterations."""
    ratio = config.lr_end / config.lr_start
    return config.lr_start * ratio ** (iteration / config.iterations)


@dataclass
class SolarPass:
    weights: CompositeWeights
    visibility: Value  # (R, N)


def solar_correction_pass(
    field_: SNerfField,
    tape: Tape,
    batch: SolarBatch,
    n_samples: int,
    jitter: np.random.Generator | None,
    noise_rng: np.random.Generator | None,
    progress: float,
) -> SolarPass:
    """Coarse-only pass along the sun rays; the trunk is detached so only
    the visibility head learns from it."""
    samples = sample_altitudes(batch.rays, n_samples, jitter)
    n_rays, n = samples.n_rays, samples.n_samples
    out = field_.forward(
        tape,
        samples.positions.reshape(-1, 3),
        np.repeat(batch.sun_vectors, n, axis=0),
        noise_rng,
        progress,
        shading=True,
        detach_trunk=True,
    )
    assert out.visibility is not None
    weights = composite(ad.reshape(out.sigma, (n_rays, n)), samples.deltas)
    return SolarPass(weights, ad.reshape(out.visibility, (n_rays, n)))


def trainable(name: str, mode: Mode) -> bool:
    return mode is not Mode.NERF or not name.startswith(SHADING_PARAMETERS)


@dataclass
class TrainState:
    field: SNerfField
    adam: AdamState
    iteration: int = 0  # iterations completed
    mode: Mode | None = None  # mode the state was trained in


@dataclass
class TrainResult:
    field: SNerfField
    history: pd.DataFrame
    adam: AdamState
    iteration: int
    checkpoints: list[str]


ProgressSink = Callable[[dict[str, Any]], None]


def adam_path(checkpoint_path: str) -> str:
    return f'{checkpoint_path}.adam'


def save_train_state(
    path: str, state: TrainState, config: TrainConfig
) -> None:
    """Field checkpoint plus Adam moments; the sidecar records where the
    schedules stand."""
    state.field.save(
        path,
        extra={
            'training': {
                'iteration': state.iteration,
                'adam_step': state.adam.step,
                'mode': config.mode.value,
                'seed': config.seed,
                'iterations': config.iterations,
            }
        },
    )
    moments = {f'm.{k}': v for k, v in state.adam.m.items()}
    moments.update({f'v.{k}': v for k, v in state.adam.v.items()})
    ad.save_checkpoint(adam_path(path), moments)


def load_train_state(path: str) -> TrainState:
    field_, meta = load_field(path)
    training = meta.get('training')
    if training is None:
        error(f'{path} holds a field but no training state.')
    moments: dict[str, Array] = {}
    if os.path.exists(adam_path(path)):
        moments = ad.load_checkpoint(adam_path(path))
    adam = AdamState(
        step=int(training['adam_step']),
        m={k[2:]: v for k, v in moments.items() if k.startswith('m.')},
        v={k[2:]: v for k, v in moments.items() if k.startswith('v.')},
    )
    return TrainState(
        field_,
        adam,
        int(training['iteration']),
        Mode.parse(training.get('mode', Mode.SNERF_SC.value)),
    )


def pixel_loss(
    field_: SNerfField,
    tape: Tape,
    config: TrainConfig,
    train_set: TrainSet,
    k: int,
    jitter: np.random.Generator,
    noise_rng: np.random.Generator,
) -> Value:
    """rgb_loss of iteration k's pixel batch, coarse then fine."""
    fraction = k / config.iterations
    lighting = config.mode.lighting
    batch = sample_pixel_batch(
        train_set, config.batch_size, named_rng(config.seed, 'batch', k)
    )
    samples = hierarchical_samples(
        field_,
        batch.rays,
        batch.sun_vectors,
        config.n_coarse,
        config.n_fine if config.hierarchical else 0,
        lighting,
        jitter,
        noise_rng,
        fraction,
    )
    pixels = render_samples(
        field_, tape, samples, batch.sun_vectors, lighting, noise_rng, fraction
    )
    return rgb_loss(pixels.rgb, batch.colors)


def solar_loss(
    field_: SNerfField,
    tape: Tape,
    config: TrainConfig,
    train_set: TrainSet,
    k: int,
    jitter: np.random.Generator,
    noise_rng: np.random.Generator,
) -> Value:
    """solar_correction_loss of iteration k's solar batch."""
    batch = sample_sc_batch(
        config,
        train_set.bounds,
        named_rng(config.seed, 'solar', k),
        train_set.suns,
    )
    sun_pass = solar_correction_pass(
        field_,
        tape,
        batch,
        config.n_coarse,
        jitter,
        noise_rng,
        k / config.iterations,
    )
    return solar_correction_loss(
        sun_pass.weights.transparencies,
        sun_pass.visibility,
        sun_pass.weights.weights,
    )


def _guarded(term: Callable[[], Value]) -> tuple[Value | None, float, str]:
    """A loss term with its value; NaN and the cause when the tape
    rejects a non-finite intermediate."""
    try:
        value = term()
    except AutodiffError as e:
        return None, math.nan, str(e)
    return value, float(value.data), ''


def train(
    config: TrainConfig,
    train_set: TrainSet,
    progress: ProgressSink | None = None,
    resume: TrainState | None = None,
    checkpoint_dir: str | None = None,
) -> TrainResult:
    """Runs the optimization from scratch or from a saved state.

    Every iteration draws its pixel batch, sample jitter, training noise
    and solar batch from sub-streams keyed on (seed, iteration), so a
    resumed run replays exactly the batches of an uninterrupted one.
    A resumed state is copied; its field and moments are left as given.
    """
    if resume is None:
        field_ = init_siren(
            named_rng(config.seed, 'init'),
            config.architecture.width,
            config.architecture.depth,
            config.architecture.omega0,
            NormalizationBox.from_bounds(train_set.bounds),
            config.architecture.visibility_width,
            config.noise,
        )
        state = TrainState(field_, AdamState(), 0)
    else:
        if resume.field.architecture != config.architecture:
            error(
                f'Cannot resume: checkpoint architecture'
                f' {resume.field.architecture} differs from the'
                f' configured {config.architecture}.'
            )
        if resume.mode is not None and resume.mode is not config.mode:
            error(
                f'Cannot resume: checkpoint was trained in mode'
                f' {resume.mode.value}, not {config.mode.value}.'
            )
        copied = dataclasses.replace(
            resume.field,
            params={n: v.copy() for n, v in resume.field.params.items()},
        )
        state = TrainState(
            copied, resume.adam, resume.iteration, config.mode
        )
        LOGGER.info(f'Resuming training at iteration {state.iteration}.')
    rows: list[dict[str, Any]] = []
    checkpoints: list[str] = []
    if checkpoint_dir:
        os.makedirs(checkpoint_dir, exist_ok=True)

    for k in range(state.iteration, config.iterations):
        fraction = k / config.iterations
        lr = learning_rate(config, k)
        field_ = state.field
        noise_rng = named_rng(config.seed, 'noise', k)
        jitter = named_rng(config.seed, 'jitter', k)
        tape = Tape()
        rgb, rgb_value, rgb_fault = _guarded(
            lambda: pixel_loss(
                field_, tape, config, train_set, k, jitter, noise_rng
            )
        )
        sc: Value | None = None
        sc_value, sc_fault = 0.0, ''
        if config.mode.solar_correction:
            sc, sc_value, sc_fault = _guarded(
                lambda: solar_loss(
                    field_, tape, config, train_set, k, jitter, noise_rng
                )
            )
        if rgb is None or not math.isfinite(sc_value):
            faults = '; '.join(f for f in (rgb_fault, sc_fault) if f)
            raise TrainingError(
                f'Loss is not finite at iteration {k}:'
                f' rgb_loss={rgb_value}, sc_loss={sc_value} ({faults}).'
            )
        try:
            loss = total_loss(rgb, sc, config.lambda_s, config.mode)
            grads = tape.backward(loss)
        except AutodiffError as e:
            raise TrainingError(f'Training failed at iteration {k}: {e}')
        grads = {n: g for n, g in grads.items() if trainable(n, config.mode)}
        try:
            field_.params, adam = ad.adam_step(
                field_.params, grads, state.adam, lr
            )
        except AutodiffError as e:
            raise TrainingError(f'Optimizer step {k} failed: {e}')
        state = TrainState(field_, adam, k + 1, config.mode)

        row = {
            'iteration': k,
            'rgb_loss': rgb_value,
            'sc_loss': sc_value,
            'lr': lr,
            'noise_sigma': field_.noise.stds(fraction)[0],
        }
        rows.append(row)
        if progress:
            progress(row)
        if config.log_every and (k + 1) % config.log_every == 0:
            LOGGER.info(
                f'iteration {k + 1}/{config.iterations}:'
                f' rgb_loss={rgb_value:.6f} sc_loss={sc_value:.6f}'
                f' lr={lr:.3g}'
            )
        if (
            checkpoint_dir
            and config.checkpoint_every
            and (k + 1) % config.checkpoint_every == 0
        ):
            path = os.path.join(checkpoint_dir, f'field_{k + 1:06d}.ckpt')
            save_train_state(path, state, config)
            checkpoints.append(path)
            LOGGER.info(f'Checkpoint written to {path}.')

    history = pd.DataFrame(rows, columns=HISTORY_COLUMNS)
    return TrainResult(
        state.field, history, state.adam, state.iteration, checkpoints
    )
