"""Spectral solver for a damped relativistic membrane near the round sphere."""

from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # source checkout without install
    __version__ = "0.1.0"
