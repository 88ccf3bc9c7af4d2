"""tomoclass: tomographic SAR tree-species classification pipeline."""

__version__ = "0.1.0"
