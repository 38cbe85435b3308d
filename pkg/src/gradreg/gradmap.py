"""Gradient intensity maps: per-voxel magnitude of the central-difference
image gradient, highlighting structural boundaries."""
from __future__ import annotations

import numpy as np

from .volume import GradientMap, Volume, normalize_intensity


def gradient_map(v: Volume) -> GradientMap:
    """Magnitude of the central-difference gradient at every voxel.

    Differences are V(x+1)-V(x-1) per axis (no 1/2 factor); out-of-range
    neighbors are replicated from the nearest edge voxel so the output has
    the source dims.
    """
    if min(v.dims) < 2:
        raise ValueError(f"gradient_map needs every dim >= 2, got dims {v.dims}")
    p = np.pad(v.data, 1, mode="edge")
    dx = p[1:-1, 1:-1, 2:] - p[1:-1, 1:-1, :-2]
    dy = p[1:-1, 2:, 1:-1] - p[1:-1, :-2, 1:-1]
    dz = p[2:, 1:-1, 1:-1] - p[:-2, 1:-1, 1:-1]
    mag = np.sqrt(dx * dx + dy * dy + dz * dz)
    return Volume(mag, v.spacing)


def normalized_gradient_map(v: Volume) -> GradientMap:
    """Gradient map rescaled to [0, 1], as fed to the gradient branch.

    The source is intensity-normalized first so branch inputs share scale.
    """
    return normalize_intensity(gradient_map(normalize_intensity(v)))
