"""Learning 3D object categories from multi-view sequences."""

__version__ = "0.1.0"
