"""Dense displacement fields and differentiable trilinear warping.

Displacements are in voxel units with channel order (dx, dy, dz); the warp
samples the input at x + f(x) with out-of-grid coordinates clamped to the
border.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tape, Tensor, _make
from .volume import (
    LabelMask,
    Volume,
    _format_header,
    _load_raw,
    _vol_paths,
    atomic_write_bytes,
    atomic_write_text,
)


@dataclass(frozen=True)
class DeformationField:
    """Per-voxel displacement vectors, disp shaped (3, nz, ny, nx)."""

    disp: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.disp, dtype=np.float64)
        if arr is self.disp:
            arr = arr.copy()
        if arr.ndim != 4 or arr.shape[0] != 3:
            raise ValueError(f"field must be shaped (3, nz, ny, nx), got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("field contains non-finite displacements")
        arr.flags.writeable = False
        object.__setattr__(self, "disp", arr)

    @property
    def dims(self) -> tuple[int, int, int]:
        _, nz, ny, nx = self.disp.shape
        return (nx, ny, nz)


def identity_field(dims) -> DeformationField:
    """All-zero displacements: warping with it is the identity."""
    nx, ny, nz = dims
    if nx <= 0 or ny <= 0 or nz <= 0:
        raise ValueError(f"dims must be positive, got {dims}")
    return DeformationField(np.zeros((3, nz, ny, nx)))


def save_field(f: DeformationField, path):
    """3-channel raw+header file, channel-major then x-fastest."""
    vol_path, hdr_path = _vol_paths(path)
    atomic_write_bytes(vol_path, f.disp.astype("<f4").tobytes())
    atomic_write_text(hdr_path, _format_header(f.dims, (1.0, 1.0, 1.0), channels=3))


def load_field(path) -> DeformationField:
    arr, _ = _load_raw(path, expect_channels=3)
    return DeformationField(arr)


# ---------------------------------------------------------------------------
# sampling kernels
# ---------------------------------------------------------------------------


def _sample_positions(shape, disp):
    """Clamped sampling coordinates for every output voxel.

    Returns (gz, gy, gx) float arrays plus boolean masks marking positions
    strictly clamped per axis (zero gradient through the clamp there).
    """
    D, H, W = shape
    dz = np.arange(D, dtype=np.float64)[:, None, None] + disp[2]
    dy = np.arange(H, dtype=np.float64)[None, :, None] + disp[1]
    dx = np.arange(W, dtype=np.float64)[None, None, :] + disp[0]
    inz = (dz >= 0) & (dz <= D - 1)
    iny = (dy >= 0) & (dy <= H - 1)
    inx = (dx >= 0) & (dx <= W - 1)
    gz = np.clip(dz, 0, D - 1)
    gy = np.clip(dy, 0, H - 1)
    gx = np.clip(dx, 0, W - 1)
    return (gz, gy, gx), (inz, iny, inx)


def _trilinear_gather(vol, gz, gy, gx):
    """8-corner gather for channel-major vol (C, D, H, W).

    Returns (out, corners, weights, fracs, base_idx) with everything needed
    by the backward pass.
    """
    C, D, H, W = vol.shape
    z0 = np.floor(gz).astype(np.int64)
    y0 = np.floor(gy).astype(np.int64)
    x0 = np.floor(gx).astype(np.int64)
    z1 = np.minimum(z0 + 1, D - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    fz = gz - z0
    fy = gy - y0
    fx = gx - x0

    flat = vol.reshape(C, -1)
    idx = {}
    corners = {}
    for cz, zz in ((0, z0), (1, z1)):
        for cy, yy in ((0, y0), (1, y1)):
            for cx, xx in ((0, x0), (1, x1)):
                lin = (zz * H + yy) * W + xx
                idx[(cz, cy, cx)] = lin
                corners[(cz, cy, cx)] = flat[:, lin.reshape(-1)].reshape((C,) + gz.shape)

    wz = (1.0 - fz, fz)
    wy = (1.0 - fy, fy)
    wx = (1.0 - fx, fx)
    out = np.zeros((C,) + gz.shape)
    weights = {}
    for key, c in corners.items():
        w = wz[key[0]] * wy[key[1]] * wx[key[2]]
        weights[key] = w
        out += w * c
    return out, corners, weights, (fz, fy, fx), idx


def _gather_backward_volume(g, vol_shape, weights, idx):
    C = vol_shape[0]
    n = vol_shape[1] * vol_shape[2] * vol_shape[3]
    gv = np.zeros((C, n))
    for key, w in weights.items():
        lin = idx[key].reshape(-1)
        wg = (w[None] * g).reshape(C, -1)
        for c in range(C):
            gv[c] += np.bincount(lin, weights=wg[c], minlength=n)
    return gv.reshape(vol_shape)


def _gather_backward_positions(g, corners, fracs, inmask):
    """d(loss)/d(sampling coordinate) per axis, summed over channels."""
    fz, fy, fx = fracs
    wz = (1.0 - fz, fz)
    wy = (1.0 - fy, fy)
    wx = (1.0 - fx, fx)
    sign = (-1.0, 1.0)
    gz = np.zeros(fz.shape)
    gy = np.zeros(fy.shape)
    gx = np.zeros(fx.shape)
    for (cz, cy, cx), c in corners.items():
        gc = (g * c).sum(axis=0)
        gz += sign[cz] * wy[cy] * wx[cx] * gc
        gy += wz[cz] * sign[cy] * wx[cx] * gc
        gx += wz[cz] * wy[cy] * sign[cx] * gc
    inz, iny, inx = inmask
    return gz * inz, gy * iny, gx * inx


def warp_op(vol: Tensor, disp: Tensor, tape: Tape | None = None) -> Tensor:
    """Differentiable warp of a channel-major tensor by a 3-channel
    displacement tensor; gradients flow to both inputs."""
    vv, dv = vol.value, disp.value
    if dv.shape[0] != 3 or vv.shape[1:] != dv.shape[1:]:
        raise ValueError(f"warp: volume {vv.shape} and field {dv.shape} dims mismatch")
    (gz, gy, gx), inmask = _sample_positions(vv.shape[1:], dv)
    out, corners, weights, fracs, idx = _trilinear_gather(vv, gz, gy, gx)

    def bw(g):
        g_vol = _gather_backward_volume(g, vv.shape, weights, idx)
        gz_, gy_, gx_ = _gather_backward_positions(g, corners, fracs, inmask)
        g_disp = np.stack([gx_, gy_, gz_])
        return (g_vol, g_disp)

    return _make(tape, out, (vol, disp), bw)


def warp_trilinear(v: Volume, f: DeformationField) -> Volume:
    """Resample v at x + f(x) with border clamping."""
    if v.dims != f.dims:
        raise ValueError(f"warp: volume dims {v.dims} != field dims {f.dims}")
    (gz, gy, gx), _ = _sample_positions(v.data.shape, f.disp)
    out, *_ = _trilinear_gather(v.data[None], gz, gy, gx)
    return Volume(out[0], v.spacing, v.intensity_range)


def sample_trilinear(v: Volume, point) -> float:
    """Trilinear blend at one continuous (x, y, z) point, clamped to the grid."""
    x, y, z = point
    D, H, W = v.data.shape
    gx = np.clip(np.float64(x), 0, W - 1)
    gy = np.clip(np.float64(y), 0, H - 1)
    gz = np.clip(np.float64(z), 0, D - 1)
    out, *_ = _trilinear_gather(
        v.data[None], np.atleast_1d(gz), np.atleast_1d(gy), np.atleast_1d(gx)
    )
    return float(out[0, 0])


def warp_nearest(m: LabelMask, f: DeformationField) -> LabelMask:
    """Warp a label mask with nearest-neighbor sampling (labels stay integral)."""
    if m.dims != f.dims:
        raise ValueError(f"warp: mask dims {m.dims} != field dims {f.dims}")
    (gz, gy, gx), _ = _sample_positions(m.labels.shape, f.disp)
    iz = np.rint(gz).astype(np.int64)
    iy = np.rint(gy).astype(np.int64)
    ix = np.rint(gx).astype(np.int64)
    return LabelMask(m.labels[iz, iy, ix])
