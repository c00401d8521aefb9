"""Bundled road networks, flows and experiment configurations."""

from importlib import resources
from pathlib import Path


def _path(name: str) -> Path:
    return Path(str(resources.files(__name__) / name))


def bundled_roadnet(name: str) -> Path:
    """``grid4x4``, ``grid16x3``, ``cross`` or ``line1x3``."""
    return _path(f"{name}.roadnet.json")


def bundled_flow(name: str) -> Path:
    return _path(f"{name}.flow.json")


def bundled_experiment(name: str) -> Path:
    return _path(f"{name}.experiment.json")
