"""Deformable kernels, deformable convolutions and an effective receptive field lab."""

__version__ = "0.1.0"
