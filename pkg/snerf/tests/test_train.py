from __future__ import annotations

import dataclasses
import importlib
import os
import tempfile
import unittest
import warnings
from typing import Mapping
from unittest import mock

import numpy as np
import pandas as pd
from parameterized import parameterized

from snerf.autodiff import Array, AutodiffError, Tape, Value
from snerf.config import SNerfParams
from snerf.field import NormalizationBox, SNerfField, init_siren
from snerf.geometry import (
    OrthoCamera,
    RayBundle,
    SceneBounds,
    SolarDirection,
    generate_solar_correction_rays,
    sample_altitudes,
    solar_to_vector,
    vec3,
)
from snerf.oracle import (
    generate_scene,
    max_sun_separation,
    render_ground_truth,
)
from snerf.render import Lighting, render_samples
from snerf.tests.gradcheck import numerical_gradient, relative_error
from snerf.train import (
    HISTORY_COLUMNS,
    Mode,
    SolarBatch,
    SolarPolicy,
    TrainConfig,
    TrainingError,
    TrainSet,
    adam_path,
    learning_rate,
    load_train_state,
    rgb_loss,
    sample_pixel_batch,
    sample_sc_batch,
    solar_correction_loss,
    solar_correction_pass,
    solar_path_endpoints,
    total_loss,
    train,
)
from snerf.utils import SNerfError, named_rng

THISDIR = os.path.dirname(os.path.abspath(__file__))
XDIR = os.path.join(THISDIR, 'testdata')

BOUNDS = SceneBounds(-32.0, 32.0, -32.0, 32.0, -4.0, 32.0)
SUN = SolarDirection(50.0, 40.0)


def testdata(name: str) -> str:
    return os.path.join(XDIR, f'{name}.toml')


testdata.__test__ = False  # type: ignore[attr-defined]


def tiny_config(mode: str | None = None) -> TrainConfig:
    params = SNerfParams(name=testdata('tiny'), verbose=False)
    return TrainConfig.from_params(params, mode)


def small_train_set() -> TrainSet:
    scene = generate_scene(
        'single_box', 0, resolution=(8, 8), n_acquisitions=3
    )
    return TrainSet.from_scene(scene, render_ground_truth(scene))


def toy_field() -> SNerfField:
    f = init_siren(
        np.random.default_rng(11),
        width=8,
        depth=2,
        box=NormalizationBox.from_bounds(BOUNDS),
    )
    # keep the sigma pre-activation away from the relu kink
    f.params['sigma.bias'] = np.full(1, 0.3)
    return f


class TestLosses(unittest.TestCase):
    def test_rgb_loss_values(self) -> None:
        tape = Tape()
        same = tape.constant(np.full((2, 3), 0.5))
        self.assertEqual(float(rgb_loss(same, np.full((2, 3), 0.5)).data), 0)
        zeros = tape.constant(np.zeros((2, 3)))
        self.assertEqual(float(rgb_loss(zeros, np.ones((2, 3))).data), 3.0)

    def test_rgb_loss_gradient(self) -> None:
        rng = np.random.default_rng(0)
        predicted, observed = rng.random((5, 3)), rng.random((5, 3))
        tape = Tape()
        loss = rgb_loss(tape.parameter('p', predicted), observed)
        np.testing.assert_allclose(
            tape.backward(loss)['p'], 2 * (predicted - observed) / 5
        )

    def test_rgb_loss_shape_mismatch(self) -> None:
        with self.assertRaises(SNerfError):
            rgb_loss(Tape().constant(np.zeros((2, 3))), np.zeros((3, 3)))

    def test_solar_correction_loss_values(self) -> None:
        tape = Tape()
        ones = tape.constant(np.ones((2, 1)))
        zeros = tape.constant(np.zeros((2, 1)))
        self.assertEqual(
            float(solar_correction_loss(ones, ones, ones).data), 0.0
        )
        self.assertEqual(
            float(solar_correction_loss(ones, zeros, ones).data), 2.0
        )

    def test_solar_correction_loss_reaches_visibility_only(self) -> None:
        rng = np.random.default_rng(1)
        t, s, w = (rng.random((3, 4)) for _ in range(3))
        tape = Tape()
        loss = solar_correction_loss(
            tape.parameter('t', t),
            tape.parameter('s', s),
            tape.parameter('w', w),
        )
        grads = tape.backward(loss)
        np.testing.assert_array_equal(grads['t'], np.zeros((3, 4)))
        np.testing.assert_array_equal(grads['w'], np.zeros((3, 4)))
        np.testing.assert_allclose(grads['s'], (-2 * (t - s) - w) / 3)

    def test_total_loss(self) -> None:
        tape = Tape()
        rgb, sc = tape.constant(2.0), tape.constant(10.0)
        self.assertIs(total_loss(rgb, sc, 0.05, Mode.NERF), rgb)
        self.assertIs(total_loss(rgb, None, 0.05, Mode.SNERF_SC), rgb)
        self.assertAlmostEqual(
            float(total_loss(rgb, sc, 0.05, Mode.SNERF_SC).data), 2.5
        )

    def test_learning_rate_schedule(self) -> None:
        config = TrainConfig(lr_start=1e-4, lr_end=1e-5, iterations=100)
        self.assertAlmostEqual(learning_rate(config, 0), 1e-4)
        self.assertAlmostEqual(learning_rate(config, 100), 1e-5)
        self.assertAlmostEqual(learning_rate(config, 50), 10**-4.5)


class TestObjectiveGradients(unittest.TestCase):
    def setUp(self) -> None:
        directions = np.array([[0.1, 0.2, -1.0], [-0.3, 0.0, -1.0]])
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
        rays = RayBundle(
            np.array([[0.0, 0.0, 32.0], [5.0, -3.0, 32.0]]),
            directions,
            BOUNDS.h_min,
            BOUNDS.h_max,
        )
        self.samples = sample_altitudes(rays, 4)
        self.suns = np.tile(solar_to_vector(SUN), (2, 1))
        self.observed = np.array([[0.2, 0.4, 0.6], [0.9, 0.1, 0.3]])
        self.sc_batch = SolarBatch(
            generate_solar_correction_rays(
                BOUNDS, SUN, 2, np.random.default_rng(3)
            ),
            [SUN, SUN],
            None,
        )
        self.field = toy_field()

    def objective(self, f: SNerfField, tape: Tape, rgb_only: bool) -> Value:
        pixels = render_samples(
            f, tape, self.samples, self.suns, Lighting.SHADED
        )
        rgb = rgb_loss(pixels.rgb, self.observed)
        if rgb_only:
            return rgb
        sun_pass = solar_correction_pass(
            f, tape, self.sc_batch, 4, None, None, 1.0
        )
        sc = solar_correction_loss(
            sun_pass.weights.transparencies,
            sun_pass.visibility,
            sun_pass.weights.weights,
        )
        return total_loss(rgb, sc, 0.05, Mode.SNERF_SC)

    def check(self, names: list[str], rgb_only: bool) -> None:
        tape = Tape()
        grads = tape.backward(self.objective(self.field, tape, rgb_only))

        def f(params: Mapping[str, Array]) -> float:
            moved = dataclasses.replace(self.field, params=dict(params))
            return float(self.objective(moved, Tape(False), rgb_only).data)

        numeric = numerical_gradient(f, self.field.params, names)
        for name in names:
            self.assertLess(
                relative_error(grads[name], numeric[name]), 1e-5, name
            )

    def test_shading_heads_full_objective(self) -> None:
        self.check(
            [
                'albedo.weight',
                'albedo.bias',
                'sky.weight',
                'sky.bias',
                'visibility.0.weight',
                'visibility.3.weight',
                'visibility.3.bias',
            ],
            rgb_only=False,
        )

    def test_density_and_trunk_pixel_objective(self) -> None:
        self.check(
            ['sigma.weight', 'sigma.bias', 'trunk.0.weight', 'trunk.1.bias'],
            rgb_only=True,
        )

    def test_solar_pass_trains_visibility_only(self) -> None:
        tape = Tape()
        sun_pass = solar_correction_pass(
            self.field, tape, self.sc_batch, 4, None, None, 1.0
        )
        loss = solar_correction_loss(
            sun_pass.weights.transparencies,
            sun_pass.visibility,
            sun_pass.weights.weights,
        )
        for name, g in tape.backward(loss).items():
            if name.startswith('visibility.'):
                self.assertGreater(float(np.abs(g).sum()), 0.0, name)
            else:
                self.assertEqual(float(np.abs(g).sum()), 0.0, name)


class TestBatches(unittest.TestCase):
    def setUp(self) -> None:
        # pixel (k, i, j) of image k holds the colour (k, i, j) / 10
        k, i, j = np.meshgrid(
            np.arange(2), np.arange(4), np.arange(4), indexing='ij'
        )
        images = np.stack([k, i, j], axis=-1) / 10.0
        camera = OrthoCamera.looking(
            0.0, 0.0, vec3(0.0, 0.0, 0.0), (8.0, 8.0), (4, 4)
        )
        self.suns = [SolarDirection(60.0, 10.0), SolarDirection(40.0, 200.0)]
        self.train_set = TrainSet(
            images,
            [camera, camera],
            self.suns,
            SceneBounds(-4.0, 4.0, -4.0, 4.0, 0.0, 10.0),
        )

    def test_pixel_batch_pairs_rays_with_colours(self) -> None:
        batch = sample_pixel_batch(
            self.train_set, 64, np.random.default_rng(0)
        )
        k, i, j = np.round(batch.colors.T * 10).astype(int)
        np.testing.assert_array_equal(k, batch.image_index)
        np.testing.assert_allclose(batch.rays.origins[:, 0], -4 + 2 * j + 1)
        np.testing.assert_allclose(batch.rays.origins[:, 1], 4 - 2 * i - 1)
        vectors = np.stack([solar_to_vector(s) for s in self.suns])
        np.testing.assert_array_equal(batch.sun_vectors, vectors[k])

    def test_pixel_batch_is_uniform(self) -> None:
        batch = sample_pixel_batch(
            self.train_set, 32000, np.random.default_rng(1)
        )
        k, i, j = np.round(batch.colors.T * 10).astype(int)
        counts = np.bincount(k * 16 + i * 4 + j, minlength=32)
        chi2 = float(((counts - 1000.0) ** 2 / 1000.0).sum())
        self.assertLess(chi2, 70.0)

    def test_mismatched_camera(self) -> None:
        with self.assertRaises(SNerfError):
            TrainSet(
                np.zeros((1, 3, 3, 3)),
                self.train_set.cameras[:1],
                self.suns[:1],
                self.train_set.bounds,
            )

    def test_solar_path_between_equal_endpoints(self) -> None:
        config = TrainConfig(sc_batch_size=20, sun_from=SUN, sun_to=SUN)
        batch = sample_sc_batch(config, BOUNDS, np.random.default_rng(0))
        self.assertEqual(len(batch.rays), 20)
        for sun in batch.suns:
            self.assertAlmostEqual(sun.elevation, SUN.elevation, places=6)
            self.assertAlmostEqual(sun.azimuth, SUN.azimuth, places=6)

    def test_solar_path_parameters_uniform(self) -> None:
        config = TrainConfig(
            sc_batch_size=2000,
            sun_from=SolarDirection(50.0, 40.0),
            sun_to=SolarDirection(60.0, 140.0),
        )
        batch = sample_sc_batch(config, BOUNDS, np.random.default_rng(2))
        assert batch.t is not None
        counts, _ = np.histogram(batch.t, bins=10, range=(0.0, 1.0))
        chi2 = float(((counts - 200.0) ** 2 / 200.0).sum())
        self.assertLess(chi2, 30.0)
        np.testing.assert_allclose(
            batch.rays.directions, batch.sun_vectors, atol=1e-12
        )

    def test_hemisphere_above_min_elevation(self) -> None:
        config = TrainConfig(
            sc_batch_size=500,
            sc_policy=SolarPolicy.HEMISPHERE,
            min_elevation=30.0,
        )
        batch = sample_sc_batch(config, BOUNDS, np.random.default_rng(3))
        self.assertIsNone(batch.t)
        elevations = [s.elevation for s in batch.suns]
        self.assertGreaterEqual(min(elevations), 30.0 - 1e-9)
        self.assertGreater(max(s.azimuth for s in batch.suns), 270.0)

    def test_angles_policy(self) -> None:
        angles = [SolarDirection(30.0, 0.0), SolarDirection(70.0, 90.0)]
        config = TrainConfig(
            sc_batch_size=50, sc_policy=SolarPolicy.ANGLES, sc_angles=angles
        )
        batch = sample_sc_batch(config, BOUNDS, np.random.default_rng(4))
        self.assertEqual(set(batch.suns), set(angles))

    def test_default_endpoints(self) -> None:
        self.assertEqual(
            solar_path_endpoints(TrainConfig(), self.suns),
            max_sun_separation(self.suns),
        )


class TestTrainConfig(unittest.TestCase):
    @parameterized.expand(
        [
            ('negative_lambda', {'lambda_s': -1.0}),
            ('empty_batch', {'batch_size': 0}),
            ('no_iterations', {'iterations': 0}),
            ('one_endpoint', {'sun_from': SUN}),
            ('angles_without_list', {'sc_policy': SolarPolicy.ANGLES}),
            ('min_elevation', {'min_elevation': 90.0}),
        ]
    )
    def test_invalid(self, _: str, kwargs: dict) -> None:
        with self.assertRaises(SNerfError):
            TrainConfig(**kwargs)

    def test_from_params(self) -> None:
        config = tiny_config()
        self.assertEqual(config.mode, Mode.SNERF_SC)
        self.assertEqual(config.architecture.width, 8)
        self.assertEqual(config.n_coarse, 4)
        self.assertEqual(config.sc_batch_size, 4)
        self.assertEqual(config.checkpoint_every, 2)
        self.assertIsNone(config.sun_from)

    def test_mode_override(self) -> None:
        self.assertEqual(tiny_config('snerf_no_sc').mode, Mode.SNERF_NO_SC)
        self.assertEqual(tiny_config('snerf_no_sc').effective_lambda_s, 0.0)
        with self.assertRaises(SNerfError):
            tiny_config('nerf++')

    def test_lambda_ignored_in_nerf_mode_warns(self) -> None:
        params = SNerfParams(name=testdata('lambda'), verbose=False)
        with self.assertWarns(UserWarning):
            TrainConfig.from_params(params)

    def test_no_warning_by_default(self) -> None:
        params = SNerfParams(name=testdata('tiny'), verbose=False)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter('always')
            TrainConfig.from_params(params, 'nerf')
        self.assertFalse(any('lambda_s' in str(w.message) for w in caught))


class TestTraining(unittest.TestCase):
    def setUp(self) -> None:
        self.train_set = small_train_set()
        self.folder = tempfile.mkdtemp()

    def test_history_is_reproducible(self) -> None:
        config = tiny_config()
        rows: list[dict] = []
        first = train(config, self.train_set, progress=rows.append)
        second = train(config, self.train_set)
        pd.testing.assert_frame_equal(first.history, second.history)
        self.assertEqual(list(first.history.columns), HISTORY_COLUMNS)
        self.assertEqual(len(rows), 4)
        self.assertEqual(first.iteration, 4)
        self.assertTrue(np.all(first.history['sc_loss'] > 0))
        for name in first.field.params:
            np.testing.assert_array_equal(
                first.field.params[name], second.field.params[name]
            )

    def test_no_solar_loss_without_correction(self) -> None:
        config = tiny_config('snerf_no_sc')
        result = train(config, self.train_set)
        self.assertTrue(np.all(result.history['sc_loss'] == 0.0))
        self.assertFalse(
            np.array_equal(
                result.field.params['trunk.0.weight'],
                self.initial(config).params['trunk.0.weight'],
            )
        )

    def initial(self, config: TrainConfig) -> SNerfField:
        arch = config.architecture
        return init_siren(
            named_rng(config.seed, 'init'),
            arch.width,
            arch.depth,
            arch.omega0,
            NormalizationBox.from_bounds(self.train_set.bounds),
            arch.visibility_width,
            config.noise,
        )

    def test_nerf_mode_skips_shading_heads(self) -> None:
        config = tiny_config('nerf')
        with mock.patch.object(
            SNerfField, '_visibility', side_effect=AssertionError
        ), mock.patch.object(SNerfField, '_sky', side_effect=AssertionError):
            result = train(config, self.train_set)
        initial = self.initial(config)
        for name, value in initial.params.items():
            if name.startswith(('visibility.', 'sky.')):
                np.testing.assert_array_equal(result.field.params[name], value)
        self.assertTrue(np.all(result.history['sc_loss'] == 0.0))

    def test_resume_matches_uninterrupted_run(self) -> None:
        config = tiny_config()
        full = train(config, self.train_set, checkpoint_dir=self.folder)
        self.assertEqual(
            [os.path.basename(p) for p in full.checkpoints],
            ['field_000002.ckpt', 'field_000004.ckpt'],
        )
        self.assertTrue(os.path.exists(adam_path(full.checkpoints[0])))
        state = load_train_state(full.checkpoints[0])
        self.assertEqual(state.iteration, 2)
        self.assertEqual(state.adam.step, 2)
        resumed = train(config, self.train_set, resume=state)
        self.assertEqual(resumed.iteration, 4)
        pd.testing.assert_frame_equal(
            resumed.history,
            full.history.iloc[2:].reset_index(drop=True),
        )
        for name in full.field.params:
            np.testing.assert_array_equal(
                resumed.field.params[name], full.field.params[name]
            )

    def test_resume_with_other_architecture(self) -> None:
        config = tiny_config()
        full = train(config, self.train_set, checkpoint_dir=self.folder)
        state = load_train_state(full.checkpoints[0])
        wider = dataclasses.replace(
            config,
            architecture=dataclasses.replace(config.architecture, width=16),
        )
        with self.assertRaises(SNerfError):
            train(wider, self.train_set, resume=state)

    def test_field_without_training_state(self) -> None:
        path = os.path.join(self.folder, 'bare.ckpt')
        self.initial(tiny_config()).save(path)
        with self.assertRaises(SNerfError):
            load_train_state(path)

    def test_non_finite_image(self) -> None:
        images = self.train_set.images.copy()
        images[0, 0, 0, 0] = np.nan
        broken = TrainSet(
            images,
            self.train_set.cameras,
            self.train_set.suns,
            self.train_set.bounds,
        )
        config = dataclasses.replace(tiny_config(), batch_size=4096)
        with self.assertRaisesRegex(
            TrainingError,
            r'iteration 0: rgb_loss=nan, sc_loss=\d[^ ]* \(Non-finite',
        ):
            train(config, broken)

    def test_non_finite_solar_loss(self) -> None:
        with mock.patch.object(
            importlib.import_module('snerf.train'),
            'solar_correction_loss',
            side_effect=AutodiffError('Non-finite values produced by exp.'),
        ):
            with self.assertRaisesRegex(
                TrainingError,
                r'iteration 0: rgb_loss=\d[^ ]*, sc_loss=nan \(.*exp',
            ):
                train(tiny_config(), self.train_set)

    def test_resume_leaves_state_untouched(self) -> None:
        config = tiny_config()
        full = train(config, self.train_set, checkpoint_dir=self.folder)
        state = load_train_state(full.checkpoints[0])
        before = {n: v.copy() for n, v in state.field.params.items()}
        train(config, self.train_set, resume=state)
        self.assertEqual(state.iteration, 2)
        for name, value in before.items():
            np.testing.assert_array_equal(state.field.params[name], value)

    def test_resume_in_other_mode(self) -> None:
        full = train(
            tiny_config(), self.train_set, checkpoint_dir=self.folder
        )
        state = load_train_state(full.checkpoints[0])
        self.assertIs(state.mode, Mode.SNERF_SC)
        with self.assertRaisesRegex(SNerfError, 'mode snerf_sc'):
            train(tiny_config('snerf_no_sc'), self.train_set, resume=state)


SLOW = os.environ.get('SNERF_SLOW_TESTS', '') not in ('', '0')


@unittest.skipUnless(SLOW, 'set SNERF_SLOW_TESTS=1 for desk-scale runs')
class TestDeskTraining(unittest.TestCase):
    @parameterized.expand([(0,), (1,), (2,)])
    def test_loss_halves_in_500_iterations(self, seed: int) -> None:
        scene = generate_scene('single_box', seed, resolution=(16, 16))
        train_set = TrainSet.from_scene(scene, render_ground_truth(scene))
        result = train(TrainConfig(iterations=500, seed=seed), train_set)
        early = result.history['rgb_loss'].iloc[10]
        late = result.history['rgb_loss'].iloc[-20:].mean()
        self.assertLessEqual(late, 0.5 * early)


if __name__ == '__main__':
    unittest.main()
