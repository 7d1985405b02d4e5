"""Toy-scale diffusion-prior super-resolution: schedule, networks, tiled sampling and color correction."""

__version__ = "0.1.0"
