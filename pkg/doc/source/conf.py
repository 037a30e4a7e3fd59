# Configuration file for the Sphinx documentation builder.
#
# For the full list of built-in configuration values, see the documentation:
# https://www.sphinx-doc.org/en/master/usage/configuration.html

# -- Project information -----------------------------------------------------
# https://www.sphinx-doc.org/en/master/usage/configuration.html#project-information

import os
import sys

sys.path.insert(0, os.path.abspath("../.."))

from snerf import __version__

project = 'S-NeRF'
copyright = '2026, S-NeRF developers'
author = 'S-NeRF developers'
release = __version__

extensions = [
    'myst_parser',
    'sphinx.ext.autodoc',
]

myst_enable_extensions = [
    'colon_fence',
    'dollarmath',
    'substitution',
]

templates_path = ['_templates']
exclude_patterns: list[str] = []

html_theme = 'alabaster'
html_static_path = ['_static']
