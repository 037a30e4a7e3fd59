from __future__ import annotations

import copy
import os
import tempfile
import unittest
from unittest import mock

import tomli
from parameterized import parameterized

from snerf.config import (
    DEFAULTS,
    PRESETS_DIR,
    TYPE_CHECKING_ENV_VAR,
    SNerfParams,
    TypeChecking,
    merge_into,
    overwrite_defaults,
)
from snerf.tests.captureoutput import CaptureOutput
from snerf.utils import SNerfError

THISDIR = os.path.dirname(os.path.abspath(__file__))
XDIR = os.path.join(THISDIR, 'testdata')


def testdata(name: str) -> str:
    return os.path.join(XDIR, f'{name}.toml')


testdata.__test__ = False  # type: ignore[attr-defined]


class TestSNerfParams(unittest.TestCase):
    def setUp(self) -> None:
        self.co = CaptureOutput(stream='stderr')
        env = {
            k: v for k, v in os.environ.items() if k != TYPE_CHECKING_ENV_VAR
        }
        self.env = mock.patch.dict(os.environ, env, clear=True)
        self.env.start()

    def tearDown(self) -> None:
        self.env.stop()
        self.co.restore()

    @parameterized.expand([(None,), ('default',), ('defaults',)])
    def test_defaults_only(self, name: str | None) -> None:
        params = SNerfParams(name=name, verbose=False)
        self.assertEqual(params.as_dict(), DEFAULTS)
        self.assertEqual(params.files_used(), [])

    def test_attribute_and_dotted_access(self) -> None:
        params = SNerfParams(name=testdata('small'), verbose=False)
        self.assertEqual(params.train.seed, 3)
        self.assertEqual(params['train.seed'], 3)
        self.assertEqual(params.field.width, 8)
        self.assertEqual(params['train.mode'], 'snerf_sc')
        self.assertIsNone(params.get('train.speed'))
        with self.assertRaises(KeyError):
            params['train.speed']
        with self.assertRaises(AttributeError):
            params.nonsense

    def test_include_overlays_in_order(self) -> None:
        params = SNerfParams(name=testdata('child'), verbose=False)
        self.assertEqual(params.train.seed, 4)
        self.assertEqual(params.train.iterations, 50)
        self.assertEqual(params.field.width, 8)
        self.assertEqual(
            [os.path.basename(p) for p in params.files_used()],
            ['child.toml', 'small.toml'],
        )

    def test_explicit_keys(self) -> None:
        params = SNerfParams(name=testdata('child'), verbose=False)
        self.assertTrue(params.is_explicit('train.seed'))
        self.assertTrue(params.is_explicit('field.width'))
        self.assertFalse(params.is_explicit('train.lambda_s'))

    def test_unknown_key_is_an_error(self) -> None:
        with self.assertRaises(SNerfError) as cm:
            SNerfParams(name=testdata('badkey'), verbose=False)
        self.assertIn('speed', str(cm.exception))
        self.assertIn('[train]', str(cm.exception))

    def test_scalar_where_section_expected(self) -> None:
        with self.assertRaises(SNerfError):
            SNerfParams(name=testdata('badsection'), verbose=False)

    def test_type_mismatch_warns(self) -> None:
        with self.assertWarns(UserWarning):
            SNerfParams(name=testdata('badtype'), verbose=False)

    def test_type_mismatch_error(self) -> None:
        with self.assertRaises(SNerfError) as cm:
            SNerfParams(
                name=testdata('badtype'),
                check_types=TypeChecking.ERROR,
                verbose=False,
            )
        self.assertIn('expected int, got str', str(cm.exception))

    def test_type_mismatch_off(self) -> None:
        params = SNerfParams(
            name=testdata('badtype'),
            check_types=TypeChecking.OFF,
            verbose=False,
        )
        self.assertEqual(params.train.seed, 'three')

    def test_environment_overrides_checking(self) -> None:
        with mock.patch.dict(os.environ, {TYPE_CHECKING_ENV_VAR: 'error'}):
            with self.assertRaises(SNerfError):
                SNerfParams(name=testdata('badtype'), verbose=False)
        with mock.patch.dict(os.environ, {TYPE_CHECKING_ENV_VAR: 'sloppy'}):
            with self.assertRaises(SNerfError):
                SNerfParams(verbose=False)

    def test_integer_accepted_for_float(self) -> None:
        params = SNerfParams(name=testdata('intfloat'), verbose=False)
        self.assertIsInstance(params.train.lr_start, float)
        self.assertEqual(params.train.lr_start, 1.0)

    @parameterized.expand([('desk',), ('full',), ('smoke',)])
    def test_presets_load(self, name: str) -> None:
        params = SNerfParams(name=name, verbose=False)
        self.assertTrue(
            params.files_used()[0].startswith(os.path.realpath(PRESETS_DIR))
        )

    def test_full_preset_includes_desk(self) -> None:
        params = SNerfParams(name='full', verbose=False)
        self.assertEqual(params.field.width, 100)
        self.assertEqual(params.sampling.n_coarse, 64)
        self.assertEqual(params.train.lr_end, 1e-5)
        self.assertEqual(len(params.files_used()), 2)

    def test_missing_file(self) -> None:
        with self.assertRaises(SNerfError):
            SNerfParams(name='no_such_config', verbose=False)

    def test_wrong_extension(self) -> None:
        with self.assertRaises(SNerfError):
            SNerfParams(name='config.json', verbose=False)

    def test_hash_depends_on_values_only(self) -> None:
        defaults = SNerfParams(verbose=False)
        desk = SNerfParams(name='desk', verbose=False)
        small = SNerfParams(name=testdata('small'), verbose=False)
        self.assertEqual(defaults.config_hash(), desk.config_hash())
        self.assertNotEqual(defaults.config_hash(), small.config_hash())
        self.assertEqual(len(defaults.config_hash()), 64)

    def test_write_consolidated_toml(self) -> None:
        params = SNerfParams(name=testdata('child'), verbose=False)
        path = os.path.join(tempfile.mkdtemp(), 'config.toml')
        params.write_consolidated_toml(path)
        with open(path, 'rb') as f:
            written = tomli.load(f)
        self.assertEqual(written, params.as_dict())
        reread = SNerfParams(name=path, verbose=False)
        self.assertEqual(reread, params)
        self.assertEqual(reread.config_hash(), params.config_hash())

    def test_setitem(self) -> None:
        params = SNerfParams(verbose=False)
        params['train.seed'] = 11
        self.assertEqual(params.train.seed, 11)
        with self.assertRaises(KeyError):
            params['train.speed'] = 1


class TestOverwriteDefaults(unittest.TestCase):
    def test_merge_into_is_recursive(self) -> None:
        original = {'a': {'b': 1, 'c': 2}, 'd': 3}
        merge_into(original, {'a': {'c': 5}, 'e': 6})
        self.assertEqual(original, {'a': {'b': 1, 'c': 5}, 'd': 3, 'e': 6})

    def test_mismatches_collected(self) -> None:
        defaults = copy.deepcopy(DEFAULTS)
        result, mismatches = overwrite_defaults(
            [],
            defaults,
            {'train': {'seed': True, 'bogus': 1}, 'include': 'x'},
        )
        self.assertEqual(len(mismatches), 2)
        self.assertIs(result['train']['seed'], True)
        self.assertEqual(defaults, DEFAULTS)

    def test_bool_is_not_int(self) -> None:
        _, mismatches = overwrite_defaults([], {'n': 1}, {'n': False})
        self.assertEqual(len(mismatches), 1)


if __name__ == '__main__':
    unittest.main()
