"""Joint tomography, projection deformation estimation and TV regularization."""

__version__ = "0.1.0"
