from __future__ import annotations

import dataclasses
import math
import os
import tempfile
import unittest

import numpy as np
import pandas as pd
from parameterized import parameterized

from snerf.config import SNerfParams
from snerf.evaluate import (
    AltitudeReport,
    albedo_rmse,
    altitude_mae,
    evaluate,
    masked_mean,
    psnr,
    run_ablation,
    select_test_views,
    shadow_iou,
    ssim,
    sun_sweep,
    training_views,
)
from snerf.geometry import SolarDirection
from snerf.oracle import (
    Acquisition,
    AnalyticField,
    generate_scene,
    render_ground_truth,
)
from snerf.render import RenderConfig
from snerf.train import Mode
from snerf.utils import SNerfError

THISDIR = os.path.dirname(os.path.abspath(__file__))
XDIR = os.path.join(THISDIR, 'testdata')


class TestImageMetrics(unittest.TestCase):
    def setUp(self) -> None:
        rng = np.random.default_rng(0)
        self.a = rng.random((16, 16, 3))
        self.b = np.clip(self.a + rng.normal(0, 0.1, self.a.shape), 0, 1)

    def test_ssim_identity(self) -> None:
        self.assertAlmostEqual(ssim(self.a, self.a), 1.0, places=9)

    def test_ssim_of_unrelated_constants(self) -> None:
        self.assertLess(ssim(np.zeros((16, 16)), np.ones((16, 16))), 0.01)

    def test_ssim_symmetric(self) -> None:
        self.assertAlmostEqual(ssim(self.a, self.b), ssim(self.b, self.a))
        self.assertLess(ssim(self.a, self.b), 1.0)

    def test_ssim_needs_a_full_window(self) -> None:
        with self.assertRaises(SNerfError):
            ssim(np.zeros((10, 16, 3)), np.zeros((10, 16, 3)))

    def test_shapes_must_match(self) -> None:
        with self.assertRaises(SNerfError):
            psnr(np.zeros((16, 16, 3)), np.zeros((16, 12, 3)))

    def test_psnr(self) -> None:
        self.assertAlmostEqual(
            psnr(np.zeros((4, 4, 3)), np.full((4, 4, 3), 0.1)), 20.0
        )


class TestMaskMetrics(unittest.TestCase):
    @parameterized.expand(
        [
            ('both_empty', [0.9, 0.9], [False, False], 1.0),
            ('disjoint', [0.1, 0.9], [False, True], 0.0),
            (
                'one_third',
                [0.1, 0.1, 0.9, 0.9],
                [True, False, True, False],
                1 / 3,
            ),
            ('identical', [0.1, 0.9], [True, False], 1.0),
        ]
    )
    def test_shadow_iou(
        self, _: str, visibility: list, truth: list, expected: float
    ) -> None:
        self.assertAlmostEqual(
            shadow_iou(np.array(visibility), np.array(truth)), expected
        )

    def test_albedo_rmse(self) -> None:
        truth = np.random.default_rng(1).random((5, 5, 3))
        self.assertAlmostEqual(albedo_rmse(truth + 0.1, truth), 0.1)
        mask = np.zeros((5, 5), dtype=bool)
        mask[0, 0] = True
        shifted = truth.copy()
        shifted[0, 0] += 0.2
        self.assertAlmostEqual(albedo_rmse(shifted, truth, mask), 0.2)
        self.assertEqual(albedo_rmse(shifted, truth, ~mask), 0.0)

    def test_masked_mean(self) -> None:
        values = np.array([1.0, 2.0, 6.0])
        self.assertEqual(masked_mean(values), 3.0)
        self.assertEqual(masked_mean(values, [True, True, False]), 1.5)
        self.assertTrue(math.isnan(masked_mean(values, [False] * 3)))

    def test_low_confidence(self) -> None:
        report = AltitudeReport(
            np.zeros((2, 2)),
            np.array([[1.0, 2.0], [3.0, 4.0]]),
            np.array([[1.0, 0.2], [1.0, 1.0]]),
        )
        self.assertEqual(report.mae, 2.5)
        self.assertEqual(report.low_confidence_fraction, 0.25)
        self.assertEqual(report.masked_mae(report.low_confidence), 2.0)


def acquisitions_with_outlier() -> list[Acquisition]:
    close = [
        Acquisition(10.0, 20.0 + k, 55.0, 130.0 + k) for k in range(4)
    ]
    return close[:2] + [Acquisition(25.0, 200.0, 30.0, 40.0)] + close[2:]


class TestSplit(unittest.TestCase):
    def setUp(self) -> None:
        self.scene = generate_scene('slab', 0, n_acquisitions=6)

    def test_outlier_held_out_first(self) -> None:
        scene = dataclasses.replace(
            self.scene, acquisitions=acquisitions_with_outlier()
        )
        self.assertEqual(select_test_views(scene, 1), [2])

    def test_split(self) -> None:
        test = select_test_views(self.scene)
        self.assertEqual(len(test), 2)
        self.assertEqual(test, sorted(test))
        self.assertEqual(test, select_test_views(self.scene))
        train = training_views(self.scene, test)
        self.assertEqual(sorted(train + test), list(range(6)))

    def test_cannot_hold_out_everything(self) -> None:
        with self.assertRaises(SNerfError):
            select_test_views(self.scene, 6)


class TestEvaluate(unittest.TestCase):
    def setUp(self) -> None:
        self.scene = generate_scene(
            'single_box', 0, resolution=(16, 16), n_acquisitions=4
        )
        self.bundle = render_ground_truth(self.scene)
        self.field = AnalyticField(self.scene)
        self.config = RenderConfig(64, 64)

    def test_analytic_field_scores_well(self) -> None:
        report = evaluate(
            self.field,
            self.scene,
            self.bundle,
            [0, 1],
            Mode.SNERF_SC,
            self.config,
        )
        self.assertEqual(list(report.views['view']), [0, 1])
        self.assertTrue(np.all(report.views['ssim'] > 0.7))
        self.assertTrue(np.all(report.views['psnr'] > 15.0))
        self.assertTrue(np.all(report.views['shadow_iou'] > 0.8))
        # one fine spacing of the 36 m slab
        self.assertLess(report.altitude_mae, 36.0 / 128)
        self.assertEqual(report.low_confidence_fraction, 0.0)
        self.assertLess(report.albedo_rmse, 1e-6)
        # no transient boxes in this scene
        self.assertTrue(math.isnan(report.albedo_rmse_transient))

    def test_nerf_mode_has_no_shadow_iou(self) -> None:
        report = evaluate(
            self.field, self.scene, self.bundle, [2], Mode.NERF, self.config
        )
        self.assertTrue(math.isnan(report.views['shadow_iou'].iloc[0]))
        self.assertLess(report.albedo_rmse, 1e-6)

    def test_report_files(self) -> None:
        folder = tempfile.mkdtemp()
        panels = os.path.join(folder, 'panels')
        report = evaluate(
            self.field,
            self.scene,
            self.bundle,
            [3],
            Mode.SNERF_NO_SC,
            self.config,
            panel_dir=panels,
        )
        paths = report.write(folder)
        self.assertTrue(all(os.path.exists(p) for p in paths))
        summary = pd.read_csv(paths[0])
        self.assertEqual(summary['mode'].iloc[0], 'snerf_no_sc')
        self.assertEqual(len(pd.read_csv(paths[1])), 1)
        with open(paths[2]) as f:
            self.assertIn('view 3: ssim=', f.read())
        self.assertTrue(
            os.path.exists(os.path.join(panels, 'snerf_no_sc_view003.png'))
        )

    def test_altitude_mae(self) -> None:
        report = altitude_mae(
            self.field, self.scene.bounds, self.bundle.dem, self.config
        )
        self.assertEqual(report.estimate.shape, self.bundle.dem.shape)
        self.assertLess(report.mae, 36.0 / 128)

    def test_sun_sweep(self) -> None:
        start, end = SolarDirection(50.0, 130.0), SolarDirection(60.0, 40.0)
        sweep = sun_sweep(
            self.field,
            self.scene.camera(self.scene.acquisitions[0]),
            self.scene.bounds,
            start,
            end,
            3,
            self.config,
        )
        self.assertEqual(len(sweep.images), 3)
        np.testing.assert_allclose(sweep.table['t'], [0.0, 0.5, 1.0])
        self.assertEqual(sweep.table['elevation'].iloc[0], 50.0)
        self.assertEqual(sweep.table['azimuth'].iloc[-1], 40.0)
        self.assertGreater(sweep.darkening_ratio, 0.0)
        with self.assertRaises(SNerfError):
            sun_sweep(
                self.field,
                self.scene.camera(self.scene.acquisitions[0]),
                self.scene.bounds,
                start,
                end,
                1,
            )


class TestAblation(unittest.TestCase):
    def test_all_modes_for_one_seed(self) -> None:
        params = SNerfParams(
            name=os.path.join(XDIR, 'tiny.toml'), verbose=False
        )
        folder = tempfile.mkdtemp()
        table = run_ablation('slab', [0], params, folder)
        self.assertEqual(list(table['mode']), [m.value for m in Mode])
        self.assertEqual(set(table['seed']), {0})
        self.assertTrue(
            os.path.exists(os.path.join(folder, 'ablation_median.csv'))
        )
        medians = pd.read_csv(os.path.join(folder, 'ablation_median.csv'))
        self.assertEqual(len(medians), 3)


if __name__ == '__main__':
    unittest.main()
