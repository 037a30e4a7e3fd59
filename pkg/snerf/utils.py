"""
Utils
=====
"""

from __future__ import annotations

import os
import warnings
from typing import Any, Generator, NoReturn, TypeVar

import numpy as np
import tomli

THREADS_ENV_VAR = 'SNERF_THREADS'


class SNerfError(Exception):
    pass


class GeometryError(SNerfError):
    pass


def error(*msg: str) -> NoReturn:
    raise SNerfError(' '.join(msg))


def warn(*msg: str) -> None:
    warnings.warn(" ".join(msg))


U = TypeVar("U")
V = TypeVar("V")


def nvl(value: U | None, default: V) -> U | V:
    """Returns value if value is not None, otherwise default.

    Args:
        value: a value
        default: a default value

    Returns:
        value if value is not None, otherwise default
    """
    return default if value is None else value


def load_toml(path: str) -> dict[str, Any]:
    """Loads a TOML document, reporting which file failed to parse."""
    with open(path, 'rb') as f:
        try:
            return tomli.load(f)
        except tomli.TOMLDecodeError as e:
            error(f'Could not parse {path}: {e}')


def concatenate_keys(
    d: dict[str, Any], sep: str = '.'
) -> Generator[tuple[str, Any], None, None]:
    """Concatenate keys in a nested dict, e.g.:

    >>> d = {'train': {'mode': 'nerf', 'seed': 2}, 'threads': 3}
    >>> dict(concatenate_keys(d))
    {'train.mode': 'nerf', 'train.seed': 2, 'threads': 3}

    Args:
        d: dict
        sep: separator between keys
    Returns:
        generator of (key, value) pairs
    """
    for key1, value1 in d.items():
        if isinstance(value1, dict):
            for key2, value2 in concatenate_keys(value1, sep=sep):
                yield key1 + sep + key2, value2
        else:
            yield key1, value1


def named_rng(seed: int, stream: str, *keys: int) -> np.random.Generator:
    """Random generator for one named sub-stream of a run seed.

    Streams with different names (or keys) are statistically independent,
    so ablation modes only differ where the method differs.
    """
    return np.random.default_rng([seed, *stream.encode('utf-8'), *keys])


def resolve_threads(threads: int | None = None) -> int:
    """Thread count from an explicit value, SNERF_THREADS, or all cores."""
    if threads is None or threads <= 0:
        env = os.environ.get(THREADS_ENV_VAR)
        if env:
            try:
                threads = int(env)
            except ValueError:
                error(f'{THREADS_ENV_VAR} must be an integer, not {env!r}.')
    if threads is None or threads <= 0:
        threads = os.cpu_count() or 1
    return threads
