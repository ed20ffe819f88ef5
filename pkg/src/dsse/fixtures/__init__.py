"""Feeder fixtures shipped with the package."""

from importlib import resources


def fixture_path(name: str):
    """Filesystem path of a bundled feeder file, e.g. ``six_bus``."""
    return resources.files(__package__).joinpath(f"{name}.yaml")
