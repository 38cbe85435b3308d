"""Deterministic synthetic multimodal test data: paired pseudo-modality
volumes built from smooth ellipsoid blobs, label masks, and a known
corrective deformation field.

All randomness comes from numpy's counter-based Philox generator keyed by
the config seed, so cases are reproducible across platforms.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import convolve1d

from .volume import LabelMask, Volume, atomic_write_text, load_mask, load_volume, save_mask, save_volume
from .warp import DeformationField, load_field, save_field, warp_nearest, warp_trilinear

EDGE_SOFTNESS = 0.75  # sigmoid scale in voxels: ~1.5-voxel boundary falloff


@dataclass(frozen=True)
class PhantomConfig:
    dims: tuple[int, int, int] = (32, 32, 32)
    n_blobs: int = 3
    deform_amplitude: float = 3.0
    deform_smoothness: float = 6.0
    noise_sigma: float = 0.02
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if any(d % 16 != 0 for d in self.dims):
            raise ValueError(f"dims must be divisible by 16, got {self.dims}")
        if self.deform_amplitude < 0:
            raise ValueError("deform_amplitude must be >= 0")
        if self.deform_smoothness <= 0:
            raise ValueError("deform_smoothness must be positive")
        if self.n_blobs < 1:
            raise ValueError("need at least one blob")


@dataclass(frozen=True)
class PhantomCase:
    moving: Volume
    fixed: Volume
    moving_mask: LabelMask
    fixed_mask: LabelMask
    gt_field: DeformationField  # corrective: warping moving by it recovers fixed geometry


def _rng(seed_seq) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed_seq))


def _gaussian_kernel(sigma: float) -> np.ndarray:
    radius = max(1, int(np.ceil(3.0 * sigma)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _smooth(arr: np.ndarray, sigma: float) -> np.ndarray:
    k = _gaussian_kernel(sigma)
    out = arr
    for axis in range(arr.ndim):
        out = convolve1d(out, k, axis=axis, mode="constant")
    return out


def random_smooth_field(seed, dims, amplitude: float, sigma: float) -> DeformationField:
    """Gaussian-smoothed white noise per channel, rescaled so the maximum
    displacement magnitude equals amplitude (zero field for amplitude 0)."""
    nx, ny, nz = dims
    if amplitude == 0:
        return DeformationField(np.zeros((3, nz, ny, nx)))
    rng = _rng(seed)
    noise = rng.standard_normal((3, nz, ny, nx))
    smooth = np.stack([_smooth(noise[c], sigma) for c in range(3)])
    mag = np.sqrt((smooth * smooth).sum(axis=0))
    peak = mag.max()
    if peak == 0:
        return DeformationField(np.zeros((3, nz, ny, nx)))
    return DeformationField(smooth * (amplitude / peak))


def _sample_field_at(disp: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Trilinear sample of each field channel at displaced voxel centers."""
    _, D, H, W = disp.shape
    base = disp.shape[1:]
    zz = np.clip(np.arange(D)[:, None, None] + query[2], 0, D - 1)
    yy = np.clip(np.arange(H)[None, :, None] + query[1], 0, H - 1)
    xx = np.clip(np.arange(W)[None, None, :] + query[0], 0, W - 1)
    z0 = np.floor(zz).astype(np.int64)
    y0 = np.floor(yy).astype(np.int64)
    x0 = np.floor(xx).astype(np.int64)
    z1 = np.minimum(z0 + 1, D - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    fz, fy, fx = zz - z0, yy - y0, xx - x0
    out = np.zeros_like(disp)
    for wz, zi in ((1 - fz, z0), (fz, z1)):
        for wy, yi in ((1 - fy, y0), (fy, y1)):
            for wx, xi in ((1 - fx, x0), (fx, x1)):
                w = wz * wy * wx
                out += w[None] * disp[:, zi, yi, xi]
    return out


def invert_field(f: DeformationField, iterations: int = 25) -> DeformationField:
    """Fixed-point inverse: find v with v(x) + u(x + v(x)) = 0.

    Converges for smooth fields whose Jacobian is a contraction, which the
    generator's smoothed fields satisfy at the default amplitude.
    """
    u = f.disp
    v = -u.copy()
    for _ in range(iterations):
        v = -_sample_field_at(u, v)
    return DeformationField(v)


def _blob_params(rng: np.random.Generator, dims, n_blobs):
    nx, ny, nz = dims
    sizes = np.array([nx, ny, nz], dtype=np.float64)
    centers = rng.uniform(0.3, 0.7, size=(n_blobs, 3)) * (sizes - 1)
    semiaxes = rng.uniform(0.15, 0.28, size=(n_blobs, 3)) * sizes
    return centers, semiaxes


def _blob_fields(dims, centers, semiaxes):
    """Soft indicator per blob: sigmoid of the approximate signed distance
    (voxels) to the ellipsoid boundary."""
    nx, ny, nz = dims
    zz = np.arange(nz)[:, None, None]
    yy = np.arange(ny)[None, :, None]
    xx = np.arange(nx)[None, None, :]
    blobs = []
    for (cx, cy, cz), (ax, ay, az) in zip(centers, semiaxes):
        rho = np.sqrt(((xx - cx) / ax) ** 2 + ((yy - cy) / ay) ** 2 + ((zz - cz) / az) ** 2)
        dist = (1.0 - rho) * min(ax, ay, az)
        blobs.append(1.0 / (1.0 + np.exp(-dist / EDGE_SOFTNESS)))
    return np.stack(blobs)


def generate_phantom_pair(config: PhantomConfig) -> PhantomCase:
    """Build one case: shared blob geometry, a nonlinear-mapped biased
    "MR-like" fixed volume, an affine-mapped "CT-like" moving volume that
    carries the deformation, and the corrective field between them.

    The two pseudo-modalities intentionally have a non-functional joint
    intensity relationship (the fixed side mixes a monotone remap with a
    smooth multiplicative bias field)."""
    ss = np.random.SeedSequence(config.seed)
    blob_ss, field_ss, bias_ss, noise_m_ss, noise_f_ss = ss.spawn(5)
    nx, ny, nz = config.dims

    centers, semiaxes = _blob_params(_rng(blob_ss), config.dims, config.n_blobs)
    blobs = _blob_fields(config.dims, centers, semiaxes)
    shape = blobs.max(axis=0)
    labels = np.where(shape > 0.5, blobs.argmax(axis=0) + 1, 0)
    fixed_mask = LabelMask(labels)

    u = random_smooth_field(field_ss, config.dims, config.deform_amplitude, config.deform_smoothness)
    shape_vol = Volume(shape)
    warped_shape = warp_trilinear(shape_vol, u)
    moving_mask = warp_nearest(fixed_mask, u)

    bias_rng = _rng(bias_ss)
    bias_raw = _smooth(bias_rng.standard_normal((nz, ny, nx)), min(nx, ny, nz) / 4.0)
    peak = np.abs(bias_raw).max()
    bias = 1.0 + 0.2 * (bias_raw / peak if peak > 0 else bias_raw)

    fixed_data = (1.0 - shape**0.7) * bias
    moving_data = 0.7 * warped_shape.data + 0.15
    if config.noise_sigma > 0:
        fixed_data = fixed_data + config.noise_sigma * _rng(noise_f_ss).standard_normal(
            (nz, ny, nx)
        )
        moving_data = moving_data + config.noise_sigma * _rng(noise_m_ss).standard_normal(
            (nz, ny, nx)
        )

    gt_field = invert_field(u) if config.deform_amplitude > 0 else u
    return PhantomCase(
        moving=Volume(moving_data),
        fixed=Volume(fixed_data),
        moving_mask=moving_mask,
        fixed_mask=fixed_mask,
        gt_field=gt_field,
    )


# ---------------------------------------------------------------------------
# case directories
# ---------------------------------------------------------------------------

MOVING_FILE = "moving.vol"
FIXED_FILE = "fixed.vol"
MOVING_MASK_FILE = "moving_mask.vol"
FIXED_MASK_FILE = "fixed_mask.vol"
GT_FIELD_FILE = "gt_field.vol"
MANIFEST_FILE = "manifest.json"


def save_case(case: PhantomCase, config: PhantomConfig, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_volume(case.moving, out / MOVING_FILE)
    save_volume(case.fixed, out / FIXED_FILE)
    save_mask(case.moving_mask, out / MOVING_MASK_FILE)
    save_mask(case.fixed_mask, out / FIXED_MASK_FILE)
    save_field(case.gt_field, out / GT_FIELD_FILE)
    atomic_write_text(out / MANIFEST_FILE, json.dumps(asdict(config), sort_keys=True) + "\n")


def load_case(case_dir) -> PhantomCase:
    d = Path(case_dir)
    return PhantomCase(
        moving=load_volume(d / MOVING_FILE),
        fixed=load_volume(d / FIXED_FILE),
        moving_mask=load_mask(d / MOVING_MASK_FILE),
        fixed_mask=load_mask(d / FIXED_MASK_FILE),
        gt_field=load_field(d / GT_FIELD_FILE),
    )
