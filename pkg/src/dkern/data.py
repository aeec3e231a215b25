"""Synthetic four-class shapes with a continuous scale factor.

Every class has the same area at a given scale, so the mean image intensity
grows as scale squared and carries no class information. Images are rendered
with 4x4 supersampling, giving values in [0, 1].
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

CLASSES = ("disk", "square", "triangle", "cross")
SCALE_RANGE = (0.5, 2.0)
MIN_CANVAS = 24
_SUPERSAMPLE = 4
# radius of the equal-area disk at scale 1, as a fraction of the canvas side
_BASE_RADIUS = 0.15
# farthest point from the centre, in units of the equal-area disk radius
_EXTENT = {
    "disk": 1.0,
    "square": np.sqrt(np.pi / 2),
    "triangle": np.sqrt(4 * np.pi / np.sqrt(3)) / np.sqrt(3),
    "cross": np.hypot(1.5, 0.5) * np.sqrt(np.pi / 5),
}


@dataclass
class ShapeSample:
    image: np.ndarray  # (H, W) float64 in [0, 1]
    label: int
    scale: float
    rotation: float  # degrees

    @property
    def class_name(self) -> str:
        return CLASSES[self.label]


def _inside(name: str, u: np.ndarray, v: np.ndarray, r: float) -> np.ndarray:
    """Membership test in shape-local coordinates for the shape of area pi r^2."""
    if name == "disk":
        return u * u + v * v <= r * r
    if name == "square":
        h = r * np.sqrt(np.pi) / 2
        return (np.abs(u) <= h) & (np.abs(v) <= h)
    if name == "triangle":
        side = r * np.sqrt(4 * np.pi / np.sqrt(3))
        inradius = side / (2 * np.sqrt(3))
        inside = np.ones(u.shape, bool)
        for a in (np.pi / 2, np.pi / 2 + 2 * np.pi / 3, np.pi / 2 + 4 * np.pi / 3):
            inside &= u * np.cos(a) + v * np.sin(a) <= inradius
        return inside
    if name == "cross":
        w = r * np.sqrt(np.pi / 5)  # arm width; arm length 3w, area 5 w^2
        au, av = np.abs(u), np.abs(v)
        return ((au <= 1.5 * w) & (av <= w / 2)) | ((av <= 1.5 * w) & (au <= w / 2))
    raise ValueError(f"unknown shape {name!r}")


def max_extent(canvas: int) -> float:
    return _BASE_RADIUS * canvas * SCALE_RANGE[1] * max(_EXTENT.values())


def render_shape(label: int, scale: float, rotation: float, canvas: int,
                 center: tuple[float, float] | None = None) -> np.ndarray:
    name = CLASSES[label]
    cy, cx = center if center is not None else (canvas / 2, canvas / 2)
    s = _SUPERSAMPLE
    grid = (np.arange(canvas * s) + 0.5) / s
    y, x = np.meshgrid(grid - cy, grid - cx, indexing="ij")
    t = np.deg2rad(rotation)
    u = np.cos(t) * x + np.sin(t) * y
    v = -np.sin(t) * x + np.cos(t) * y
    mask = _inside(name, u, v, _BASE_RADIUS * canvas * scale)
    return mask.reshape(canvas, s, canvas, s).mean(axis=(1, 3))


def gen_dataset(n_samples: int, canvas_size: int = 32, seed: int = 0) -> list[ShapeSample]:
    """Balanced labels (cycled), scale ~ U[0.5, 2], rotation ~ U[0, 360), and a
    sub-pixel centre jitter that keeps the shape inside the canvas."""
    if canvas_size < MIN_CANVAS:
        raise ValueError(f"canvas {canvas_size} is below the minimum of {MIN_CANVAS}")
    slack = canvas_size / 2 - max_extent(canvas_size)
    if slack < 0.5:
        raise ValueError(f"canvas {canvas_size} cannot contain the largest shape")
    if n_samples < 0:
        raise ValueError("n_samples must be non-negative")
    jitter = min(slack - 0.5, 1.0)
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_samples):
        label = i % len(CLASSES)
        scale = float(rng.uniform(*SCALE_RANGE))
        rotation = float(rng.uniform(0.0, 360.0))
        dy, dx = rng.uniform(-jitter, jitter, size=2)
        center = (canvas_size / 2 + dy, canvas_size / 2 + dx)
        out.append(ShapeSample(render_shape(label, scale, rotation, canvas_size, center), label, scale, rotation))
    return out


def to_arrays(samples, dtype=np.float64):
    """Stack samples into (N, 1, H, W) images, labels and scales."""
    if not samples:
        raise ValueError("empty sample list")
    x = np.stack([s.image for s in samples])[:, None].astype(dtype)
    y = np.array([s.label for s in samples], dtype=np.int64)
    scales = np.array([s.scale for s in samples])
    return x, y, scales
