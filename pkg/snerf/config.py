"""
Run configuration
=================

Layered TOML configuration: defaults come from a Python dictionary,
TOML documents (presets shipped with the package or explicit paths)
override them, and every overriding value is type-checked against its
default.
"""

from __future__ import annotations

import hashlib
import logging
import os
from enum import Enum, auto
from typing import Any, ItemsView, KeysView

import tomli_w

from snerf.utils import concatenate_keys, error, load_toml, warn

LOGGER = logging.getLogger(__name__)

PRESETS_DIR = os.path.join(
    os.path.dirname(os.path.realpath(os.path.abspath(__file__))), 'presets'
)
TYPE_CHECKING_ENV_VAR = 'SNERF_CHECKING'
DEFAULTS_ONLY_NAMES: list[str] = ['default', 'defaults']
SPECIAL_KEYS = ['include']

# Desk-scale defaults. The full-scale values live in presets/full.toml.
DEFAULTS: dict[str, Any] = {
    'field': {
        'width': 64,
        'depth': 8,
        'omega0': 30.0,
        'visibility_width': 0,  # 0: same as width
    },
    'noise': {
        'sigma_std': 10.0,
        'visibility_std': 1.0,
        'decay_end': 0.5,
    },
    'sampling': {
        'n_coarse': 32,
        'n_fine': 32,
        'hierarchical': True,
    },
    'train': {
        'mode': 'snerf_sc',
        'lambda_s': 0.05,
        'batch_size': 256,
        'lr_start': 5e-4,
        'lr_end': 5e-5,
        'iterations': 20000,
        'seed': 0,
        'log_every': 100,
    },
    'solar_correction': {
        'batch_size': 128,
        'policy': 'solar_path',
        # (elevation, azimuth) in degrees; empty means the two training
        # suns furthest apart.
        'sun_from': [],
        'sun_to': [],
        'angles': [],
        'min_elevation': 10.0,
    },
    'checkpoint': {
        'every': 5000,
    },
}


class TypeChecking(Enum):
    OFF = auto()
    WARN = auto()
    ERROR = auto()


class ParseMismatchType(Enum):
    BADKEY = auto()
    TYPING = auto()


class ParseMismatch:
    """One disagreement between a TOML document and the defaults."""

    def __init__(
        self,
        pm_type: ParseMismatchType,
        position: list[str],
        key: str,
        default_type: type | None = None,
        toml_type: type | None = None,
    ):
        self.pm_type = pm_type
        self.position = position
        self.key = key
        self.default_type = default_type.__name__ if default_type else ''
        self.toml_type = toml_type.__name__ if toml_type else ''

    def __str__(self) -> str:
        where = (
            f'in section [{".".join(self.position)}]'
            if self.position
            else 'at top level'
        )
        if self.pm_type is ParseMismatchType.TYPING:
            return (
                f'Type mismatch {where} - key: {self.key},'
                f' expected {self.default_type}, got {self.toml_type}\n'
            )
        return f'Unknown key {where} - key: {self.key}\n'

    def __repr__(self) -> str:
        return (
            f'ParseMismatch({self.pm_type} at'
            f' {self.position or "root"}, {self.key})'
        )


class ConfigSection:
    """Attribute-access view of one section of the configuration."""

    def __init__(self, values: dict[str, Any], depth: int = 0) -> None:
        self._depth = depth
        for k, v in values.items():
            self.__dict__[k] = (
                ConfigSection(v, depth + 1) if isinstance(v, dict) else v
            )

    def __getitem__(self, item: str) -> Any:
        return self.__dict__[item]

    def __getattr__(self, item: str) -> Any:
        # only reached for missing attributes
        raise AttributeError(f'No configuration key {item!r}')

    def __eq__(self, other: Any) -> bool:
        if not isinstance(other, ConfigSection):
            return NotImplemented
        return self.as_dict() == other.as_dict()

    def __repr__(self) -> str:
        indent = ' ' * 4 * (self._depth + 1)
        body = f',\n{indent}'.join(f'{k}={v!r}' for k, v in self.items())
        return f'ConfigSection(\n{indent}{body}\n{" " * 4 * self._depth})'

    def get(self, key: str, default: Any | None = None) -> Any:
        return self.__dict__.get(key, default)

    def as_dict(self) -> dict[str, Any]:
        """Nested plain-dictionary copy, excluding private attributes."""
        return {
            k: v.as_dict() if isinstance(v, ConfigSection) else v
            for k, v in self.__dict__.items()
            if not k.startswith('_')
        }

    def keys(self) -> KeysView[str]:
        return self.as_dict().keys()

    def items(self) -> ItemsView[str, Any]:
        return {
            k: v for k, v in self.__dict__.items() if not k.startswith('_')
        }.items()


def merge_into(original: dict[str, Any], new: dict[str, Any]) -> None:
    """Recursively update original with new, section by section."""
    for k, v in new.items():
        if isinstance(v, dict) and isinstance(original.get(k), dict):
            merge_into(original[k], v)
        else:
            original[k] = v


def _same_kind(default: Any, value: Any) -> bool:
    if isinstance(default, bool) or isinstance(value, bool):
        return type(default) is type(value)
    if isinstance(default, float) and isinstance(value, int):
        return True  # TOML writes 1e4 as 10000
    return type(default) is type(value)


def overwrite_defaults(
    hierarchy: list[str],
    defaults: dict[str, Any],
    overwrite: dict[str, Any] | None = None,
) -> tuple[dict[str, Any], list[ParseMismatch]]:
    """Overlay overwrite on defaults, collecting every mismatch found."""
    overwrite = overwrite or {}
    result: dict[str, Any] = {}
    mismatches: list[ParseMismatch] = []

    for key, default in defaults.items():
        if isinstance(default, dict):
            section = overwrite.get(key)
            if section is not None and not isinstance(section, dict):
                error(f'{key} should be a section of the TOML file.')
            result[key], more = overwrite_defaults(
                hierarchy + [key], default, section
            )
            mismatches.extend(more)
            continue
        value = overwrite.get(key, default)
        if not _same_kind(default, value):
            mismatches.append(
                ParseMismatch(
                    ParseMismatchType.TYPING,
                    hierarchy,
                    key,
                    type(default),
                    type(value),
                )
            )
        if isinstance(default, float) and isinstance(value, int):
            value = float(value)
        result[key] = value

    for key in sorted(set(overwrite) - set(defaults) - set(SPECIAL_KEYS)):
        mismatches.append(
            ParseMismatch(ParseMismatchType.BADKEY, hierarchy, key)
        )
    return result, mismatches


class SNerfParams:
    """Resolved run configuration.

    Args:

        defaults: nested dictionary giving the default value (and hence
                  the expected type) of every allowed key.

        name: a path to a TOML file, or the stem of a preset in the
              package's presets directory (e.g. `'full'`). `None`,
              `'default'` or `'defaults'` use the defaults alone.

        check_types: `WARN` (default) warns on values whose type differs
                     from the default's, `ERROR` raises, `OFF` ignores.
                     The SNERF_CHECKING environment variable (`warn`,
                     `error` or `off`) overrides this argument. Unknown
                     keys are always an error.

        verbose: log which files the parameters were read from.
    """

    ERROR = TypeChecking.ERROR
    WARN = TypeChecking.WARN
    OFF = TypeChecking.OFF

    def __init__(
        self,
        defaults: dict[str, Any] | None = None,
        name: str | None = None,
        check_types: TypeChecking = WARN,
        verbose: bool = True,
    ) -> None:
        self._defaults = DEFAULTS if defaults is None else defaults
        self._verbose = verbose
        self._files_used: list[str] = []
        self._explicit_keys: set[str] = set()
        self._check_types = self.type_checking_from_env(
            os.environ.get(TYPE_CHECKING_ENV_VAR), check_types
        )
        self._name = name
        self._values: dict[str, Any] = {}
        self.load()

    def __getattr__(self, item: str) -> Any:
        values = self.__dict__.get('_values', {})
        if item in values:
            v = values[item]
            return ConfigSection(v, 1) if isinstance(v, dict) else v
        raise AttributeError(f'No configuration key {item!r}')

    def __getitem__(self, key: str) -> Any:
        """Look up a value by its dotted key, e.g. `params['train.seed']`."""
        node: Any = self._values
        for part in key.split('.'):
            if not isinstance(node, dict) or part not in node:
                raise KeyError(f'Key {key} not found in configuration')
            node = node[part]
        return node

    def __setitem__(self, key: str, value: Any) -> None:
        *sections, last = key.split('.')
        node = self._values
        for part in sections:
            node = node[part]
        if last not in node:
            raise KeyError(f'Key {key} not found in configuration')
        node[last] = value

    def __eq__(self, other: Any) -> bool:
        if not isinstance(other, SNerfParams):
            return NotImplemented
        return self._values == other._values

    def __repr__(self) -> str:
        body = ',\n    '.join(f'{k}={v!r}' for k, v in self._values.items())
        return f'SNerfParams(\n    {body}\n)'

    def get(self, key: str, default: Any = None) -> Any:
        try:
            return self[key]
        except KeyError:
            return default

    def resolve_path(self, name: str, relative_to: str | None = None) -> str:
        """Finds the TOML file for a path or preset name."""
        base, ext = os.path.splitext(name)
        if ext not in ('', '.toml'):
            error(
                'configuration files must use .toml extension\n'
                f'(unlike {name}).'
            )
        pfile = name if ext else f'{name}.toml'
        candidates = [pfile] if os.path.isabs(pfile) else []
        if relative_to and not os.path.isabs(pfile):
            candidates.append(os.path.join(relative_to, pfile))
        if not os.path.isabs(pfile):
            candidates.append(os.path.abspath(pfile))
            candidates.append(os.path.join(PRESETS_DIR, pfile))
        for path in candidates:
            if os.path.exists(path):
                return os.path.realpath(path)
        error(
            f'No readable configuration {pfile} at any of:'
            f' {", ".join(candidates)}.'
        )

    def read_toml_file(
        self, name: str, relative_to: str | None = None
    ) -> dict[str, Any]:
        """Reads one TOML document, resolving its inclusions first."""
        path = self.resolve_path(name, relative_to)
        if path in self._files_used:
            return {}
        self._files_used.append(path)
        params = load_toml(path)
        here = os.path.dirname(path)

        if include := params.pop('include', None):
            names = include if isinstance(include, list) else [include]
            merged: dict[str, Any] = {}
            for included in names:
                merge_into(merged, self.read_toml_file(included, here))
            merge_into(merged, params)
            params = merged
        if self._verbose:
            LOGGER.info(f'Parameters set from: {path}')
        return params

    def load(self) -> None:
        """Consolidates the defaults with the configured TOML documents."""
        if self._name is None or self._name in DEFAULTS_ONLY_NAMES:
            toml: dict[str, Any] = {}
            if self._verbose:
                LOGGER.info('Using default parameters.')
        else:
            toml = self.read_toml_file(self._name)
        self._explicit_keys = {k for k, _ in concatenate_keys(toml)}
        consolidated, mismatches = overwrite_defaults([], self._defaults, toml)

        typing = [
            str(m) for m in mismatches if m.pm_type is ParseMismatchType.TYPING
        ]
        bad_keys = [
            str(m) for m in mismatches if m.pm_type is ParseMismatchType.BADKEY
        ]
        messages: list[str] = []
        if typing and self._check_types is TypeChecking.WARN:
            warn('The following issues were found:\n', *typing)
        elif typing and self._check_types is TypeChecking.ERROR:
            messages.extend(typing)
        messages.extend(bad_keys)
        if messages:
            error('The following issues were found:\n', *messages)
        self._values = consolidated

    def is_explicit(self, key: str) -> bool:
        """Whether a dotted key was set by a TOML document."""
        return key in self._explicit_keys

    def files_used(self) -> list[str]:
        return list(self._files_used)

    def as_dict(self) -> dict[str, Any]:
        return {
            k: dict(v) if isinstance(v, dict) else v
            for k, v in self._values.items()
        }

    def consolidated_toml(self) -> str:
        return tomli_w.dumps(self._values)

    def config_hash(self) -> str:
        return hashlib.sha256(
            self.consolidated_toml().encode('utf-8')
        ).hexdigest()

    def write_consolidated_toml(
        self, path: str, verbose: bool | None = None
    ) -> None:
        with open(path, 'wb') as f:
            tomli_w.dump(self._values, f)
        if self._verbose if verbose is None else verbose:
            LOGGER.info(f'Consolidated TOML file written to {path}.')

    def type_checking_from_env(
        self, env_value: str | None, default_value: TypeChecking
    ) -> TypeChecking:
        if env_value is None:
            return default_value
        try:
            return TypeChecking[env_value.upper()]
        except KeyError:
            error(
                f'Not a valid type-checking value. Change'
                f" {TYPE_CHECKING_ENV_VAR} to one of: 'warn', 'error', or"
                " 'off'."
            )
