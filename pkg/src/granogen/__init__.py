"""Diffusion-based synthesis of granular voxel assemblies."""

__version__ = "0.1.0"
