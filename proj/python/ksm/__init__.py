"""Krusell-Smith master equation solver.

Configs are plain dicts (or JSON text); missing keys take the defaults of
``default_config()``.
"""

import json
import os

from . import _core
from ._core import ConfigError, IoError, NumericalError, ValueNetwork, hamiltonian, hamiltonian_prime, pearson, utility

__all__ = [
    "ConfigError",
    "IoError",
    "NumericalError",
    "ValueNetwork",
    "aiyagari",
    "config_hash",
    "default_config",
    "export_csv",
    "hamiltonian",
    "hamiltonian_prime",
    "pearson",
    "read_csv",
    "solve",
    "utility",
]


def _text(config):
    if config is None:
        return "{}"
    if isinstance(config, str):
        return config
    return json.dumps(config)


def default_config():
    return json.loads(_core.normalize_config("{}"))


def config_hash(config=None):
    return _core.config_hash(_text(config))


def aiyagari(config=None):
    return _core.aiyagari(_text(config))


def solve(config=None):
    converged, reports = _core.solve(_text(config))
    return converged, [json.loads(r) for r in reports]


def export_csv(run_dir, kind, **options):
    return _core.export_csv(os.fspath(run_dir), kind, **options)


def read_csv(text):
    """Splits export text into (columns, metadata lines, rows of floats)."""
    lines = text.splitlines()
    columns = lines[0].split(",")
    meta = [l[2:] for l in lines[1:] if l.startswith("#")]
    rows = [[float(v) for v in l.split(",")] for l in lines[1:] if l and not l.startswith("#")]
    return columns, meta, rows
