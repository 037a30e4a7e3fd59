"""
Evaluate
========

Metrics against the oracle (SSIM and PSNR on held-out views, altitude
MAE against the DEM, shadow IoU, albedo RMSE overall and on
persistently shadowed or transient cells), the solar interpolation
sweep and the three-mode ablation driver.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import os
from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np
import pandas as pd
from skimage.metrics import peak_signal_noise_ratio, structural_similarity

from snerf.autodiff import Array
from snerf.config import SNerfParams
from snerf.field import Field
from snerf.geometry import (
    OrthoCamera,
    SceneBounds,
    SolarDirection,
    interpolate_solar_path,
)
from snerf.oracle import (
    DemGrid,
    GroundTruthBundle,
    SceneSpec,
    condition_distance,
    generate_scene,
    nadir_albedo,
    persistent_shadow_mask,
    render_ground_truth,
    shadowed_cells,
    transient_footprint,
)
from snerf.render import (
    SHADOW_THRESHOLD,
    Lighting,
    RenderConfig,
    RenderedImage,
    render_view,
    write_png,
)
from snerf.train import Mode, TrainConfig, TrainSet, train
from snerf.utils import error

LOGGER = logging.getLogger(__name__)

SSIM_SIGMA = 1.5
SSIM_WINDOW = 11  # what a gaussian window with sigma 1.5 truncates to
LOW_CONFIDENCE_OPACITY = 0.5
TEST_VIEWS = 2


def _check_same_shape(a: Array, b: Array) -> None:
    if np.shape(a) != np.shape(b):
        error(f'Images of shapes {np.shape(a)} and {np.shape(b)} differ.')


def ssim(a: Array, b: Array) -> float:
    """Mean SSIM with an 11x11 gaussian window (sigma 1.5), K1 = 0.01,
    K2 = 0.03 and dynamic range 1, averaged over channels."""
    _check_same_shape(a, b)
    if min(np.shape(a)[:2]) < SSIM_WINDOW:
        error(
            f'Images of shape {np.shape(a)} are smaller than the'
            f' {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window.'
        )
    return float(
        structural_similarity(
            np.asarray(a, dtype=np.float64),
            np.asarray(b, dtype=np.float64),
            channel_axis=2 if np.ndim(a) == 3 else None,
            data_range=1.0,
            gaussian_weights=True,
            sigma=SSIM_SIGMA,
            use_sample_covariance=False,
        )
    )


def psnr(reference: Array, image: Array) -> float:
    _check_same_shape(reference, image)
    return float(
        peak_signal_noise_ratio(
            np.asarray(reference, dtype=np.float64),
            np.asarray(image, dtype=np.float64),
            data_range=1.0,
        )
    )


def masked_mean(values: Array, mask: Array | None = None) -> float:
    """Mean over cells (all channels) where mask holds; NaN if none do."""
    values = np.asarray(values, dtype=np.float64)
    if mask is not None:
        values = values[np.asarray(mask, dtype=bool)]
    return float(values.mean()) if values.size else math.nan


@dataclass
class AltitudeReport:
    estimate: Array  # (rows, cols) expected altitude
    errors: Array  # (rows, cols) absolute error, metres
    opacity: Array  # (rows, cols)

    @property
    def mae(self) -> float:
        return masked_mean(self.errors)

    @property
    def low_confidence(self) -> Array:
        return np.asarray(self.opacity < LOW_CONFIDENCE_OPACITY)

    @property
    def low_confidence_fraction(self) -> float:
        return float(self.low_confidence.mean())

    def masked_mae(self, mask: Array) -> float:
        return masked_mean(self.errors, mask)


def altitude_from_render(
    nadir: RenderedImage, dem: DemGrid
) -> AltitudeReport:
    _check_same_shape(nadir.altitude, dem.values)
    return AltitudeReport(
        nadir.altitude, np.abs(nadir.altitude - dem.values), nadir.opacity
    )


def altitude_mae(
    field: Field,
    bounds: SceneBounds,
    dem: DemGrid,
    config: RenderConfig | None = None,
) -> AltitudeReport:
    """Expected altitude of nadir rays through every DEM cell centre
    against the DEM. Low-opacity cells are kept and counted."""
    config = dataclasses.replace(
        config or RenderConfig(), lighting=Lighting.ALBEDO
    )
    nadir = render_view(
        field, dem.nadir_camera(), SolarDirection(90.0, 0.0), bounds, config
    )
    report = altitude_from_render(nadir, dem)
    if report.low_confidence_fraction > 0:
        LOGGER.info(
            f'{report.low_confidence_fraction:.1%} of DEM cells have'
            f' opacity below {LOW_CONFIDENCE_OPACITY}.'
        )
    return report


def shadow_iou(
    visibility: Array, oracle_mask: Array, threshold: float = SHADOW_THRESHOLD
) -> float:
    """IoU of the predicted shadow (visibility < threshold) and the
    oracle mask; 1 when both are empty."""
    _check_same_shape(visibility, oracle_mask)
    predicted = np.asarray(visibility) < threshold
    truth = np.asarray(oracle_mask, dtype=bool)
    union = np.count_nonzero(predicted | truth)
    if union == 0:
        return 1.0
    return float(np.count_nonzero(predicted & truth) / union)


def albedo_rmse(
    predicted: Array, truth: Array, mask: Array | None = None
) -> float:
    """RMSE over all channels of the cells where mask holds."""
    _check_same_shape(predicted, truth)
    squared = (np.asarray(predicted) - np.asarray(truth)) ** 2
    return math.sqrt(masked_mean(squared, mask))


def select_test_views(scene: SceneSpec, count: int = TEST_VIEWS) -> list[int]:
    """Greedily holds out the acquisitions whose conditions are furthest
    (view plus sun angle) from every remaining one."""
    n = len(scene.acquisitions)
    if count >= n:
        error(f'Cannot hold out {count} of {n} acquisitions.')
    distance = np.array(
        [
            [condition_distance(a, b) for b in scene.acquisitions]
            for a in scene.acquisitions
        ]
    )
    remaining = list(range(n))
    chosen: list[int] = []
    for _ in range(count):
        scores = [
            min(distance[k, j] for j in remaining if j != k)
            for k in remaining
        ]
        best = remaining[int(np.argmax(scores))]
        chosen.append(best)
        remaining.remove(best)
    return sorted(chosen)


def training_views(scene: SceneSpec, test: Sequence[int]) -> list[int]:
    return [k for k in range(len(scene.acquisitions)) if k not in test]


@dataclass
class EvalReport:
    mode: str
    views: pd.DataFrame  # view, ssim, psnr, shadow_iou
    altitude_mae: float
    altitude_mae_shadowed: float
    low_confidence_fraction: float
    albedo_rmse: float
    albedo_rmse_persistent_shadow: float
    albedo_rmse_transient: float

    def summary_row(self) -> dict[str, Any]:
        return {
            'mode': self.mode,
            'ssim': float(self.views['ssim'].mean()),
            'psnr': float(self.views['psnr'].mean()),
            'shadow_iou': float(self.views['shadow_iou'].mean()),
            'altitude_mae': self.altitude_mae,
            'altitude_mae_shadowed': self.altitude_mae_shadowed,
            'low_confidence_fraction': self.low_confidence_fraction,
            'albedo_rmse': self.albedo_rmse,
            'albedo_rmse_persistent_shadow': (
                self.albedo_rmse_persistent_shadow
            ),
            'albedo_rmse_transient': self.albedo_rmse_transient,
        }

    def summary(self) -> str:
        row = self.summary_row()
        lines = [f'mode: {self.mode}']
        lines += [f'  {k}: {v:.4f}' for k, v in row.items() if k != 'mode']
        lines.append('  per view:')
        lines += [
            f'    view {int(r.view)}: ssim={r.ssim:.4f} psnr={r.psnr:.2f}'
            f' shadow_iou={r.shadow_iou:.4f}'
            for r in self.views.itertuples()
        ]
        return '\n'.join(lines)

    def write(self, out_dir: str, stem: str = 'eval') -> list[str]:
        os.makedirs(out_dir, exist_ok=True)
        paths = [
            os.path.join(out_dir, f'{stem}.csv'),
            os.path.join(out_dir, f'{stem}_views.csv'),
            os.path.join(out_dir, f'{stem}.txt'),
        ]
        pd.DataFrame([self.summary_row()]).to_csv(paths[0], index=False)
        self.views.to_csv(paths[1], index=False)
        with open(paths[2], 'w') as f:
            f.write(self.summary() + '\n')
        LOGGER.info(f'Evaluation report written to {paths[0]}.')
        return paths


def write_panel(path: str, truth: Array, predicted: Array) -> None:
    """Side by side: observed, predicted and |difference|."""
    _check_same_shape(truth, predicted)
    panel = np.concatenate(
        [truth, predicted, np.abs(truth - predicted)], axis=1
    )
    write_png(path, panel)


def evaluate(
    field: Field,
    scene: SceneSpec,
    bundle: GroundTruthBundle,
    test_views: Sequence[int],
    mode: Mode,
    config: RenderConfig | None = None,
    panel_dir: str | None = None,
) -> EvalReport:
    """Scores a field on the held-out views and the scene-wide maps.

    The NeRF baseline has no shadow map, so its shadow IoU is NaN, and
    its radiance stands in for the albedo."""
    config = config or RenderConfig()
    view_config = dataclasses.replace(config, lighting=mode.lighting)
    rows = []
    for k in test_views:
        acquisition = scene.acquisitions[k]
        truth = bundle.acquisitions[k]
        image = render_view(
            field,
            scene.camera(acquisition),
            acquisition.sun,
            scene.bounds,
            view_config,
        )
        iou = (
            math.nan
            if image.shadow is None
            else shadow_iou(image.shadow, truth.shadow)
        )
        rows.append(
            {
                'view': k,
                'ssim': ssim(image.rgb, truth.rgb),
                'psnr': psnr(truth.rgb, image.rgb),
                'shadow_iou': iou,
            }
        )
        if panel_dir:
            os.makedirs(panel_dir, exist_ok=True)
            write_panel(
                os.path.join(panel_dir, f'{mode.value}_view{k:03d}.png'),
                truth.rgb,
                image.rgb,
            )

    train_suns = [
        scene.acquisitions[k].sun
        for k in training_views(scene, test_views)
    ]
    nadir = render_view(
        field,
        bundle.dem.nadir_camera(),
        SolarDirection(90.0, 0.0),
        scene.bounds,
        dataclasses.replace(config, lighting=Lighting.ALBEDO),
    )
    altitude = altitude_from_render(nadir, bundle.dem)
    spacing = bundle.dem.spacing
    truth_albedo = nadir_albedo(scene, spacing)
    return EvalReport(
        mode=mode.value,
        views=pd.DataFrame(
            rows, columns=['view', 'ssim', 'psnr', 'shadow_iou']
        ),
        altitude_mae=altitude.mae,
        altitude_mae_shadowed=altitude.masked_mae(
            shadowed_cells(scene, train_suns, spacing)
        ),
        low_confidence_fraction=altitude.low_confidence_fraction,
        albedo_rmse=albedo_rmse(nadir.albedo, truth_albedo),
        albedo_rmse_persistent_shadow=albedo_rmse(
            nadir.albedo,
            truth_albedo,
            persistent_shadow_mask(scene, train_suns, spacing),
        ),
        albedo_rmse_transient=albedo_rmse(
            nadir.albedo, truth_albedo, transient_footprint(scene, spacing)
        ),
    )


@dataclass
class SunSweep:
    images: list[RenderedImage]
    table: pd.DataFrame  # step, t, elevation, azimuth, mean_brightness

    @property
    def darkening_ratio(self) -> float:
        """Darkest step over the mean brightness of the two endpoints."""
        brightness = self.table['mean_brightness'].to_numpy()
        ends = (brightness[0] + brightness[-1]) / 2
        return float(brightness.min() / ends) if ends > 0 else math.nan


def sun_sweep(
    field: Field,
    camera: OrthoCamera,
    bounds: SceneBounds,
    start: SolarDirection,
    end: SolarDirection,
    steps: int,
    config: RenderConfig | None = None,
) -> SunSweep:
    """Renders the view under suns interpolated along the solar path."""
    if steps < 2:
        error(f'A sun sweep needs at least 2 steps, not {steps}.')
    images, rows = [], []
    for step, t in enumerate(np.linspace(0.0, 1.0, steps)):
        sun = interpolate_solar_path(start, end, float(t))
        image = render_view(field, camera, sun, bounds, config)
        images.append(image)
        rows.append(
            {
                'step': step,
                't': float(t),
                'elevation': sun.elevation,
                'azimuth': sun.azimuth,
                'mean_brightness': float(image.rgb.mean()),
            }
        )
    return SunSweep(images, pd.DataFrame(rows))


def run_ablation(
    preset: str,
    seeds: Sequence[int],
    params: SNerfParams,
    out_dir: str,
    threads: int = 1,
    modes: Sequence[Mode] = tuple(Mode),
) -> pd.DataFrame:
    """Trains and evaluates every mode on the preset scene for each seed.

    All modes of one seed share the scene, the train/test split and the
    random sub-streams, so they differ only where the methods do. Writes
    ablation.csv (one row per seed and mode), ablation_median.csv and
    side-by-side panels of the held-out views.
    """
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for seed in seeds:
        scene = generate_scene(preset, seed)
        bundle = render_ground_truth(scene)
        test = select_test_views(scene)
        train_set = TrainSet.from_scene(
            scene, bundle, training_views(scene, test)
        )
        for mode in modes:
            config = dataclasses.replace(
                TrainConfig.from_params(params, mode.value), seed=seed
            )
            LOGGER.info(f'Ablation: {preset} seed {seed}, mode {mode.value}.')
            result = train(config, train_set)
            render_config = RenderConfig(
                n_coarse=config.n_coarse,
                n_fine=config.n_fine,
                hierarchical=config.hierarchical,
                threads=threads,
            )
            report = evaluate(
                result.field,
                scene,
                bundle,
                test,
                mode,
                render_config,
                panel_dir=os.path.join(out_dir, 'panels', f'seed{seed}'),
            )
            rows.append(
                {'preset': preset, 'seed': seed} | report.summary_row()
            )
    table = pd.DataFrame(rows)
    table.to_csv(os.path.join(out_dir, 'ablation.csv'), index=False)
    medians = table.drop(columns=['preset', 'seed']).groupby(
        'mode', sort=False
    ).median()
    medians.to_csv(os.path.join(out_dir, 'ablation_median.csv'))
    LOGGER.info(f'Ablation table written to {out_dir}.')
    return table
