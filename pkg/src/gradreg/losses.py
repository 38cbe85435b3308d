"""Similarity and regularization losses: modality-independent neighborhood
descriptor (MIND) features, their L1 feature-difference losses, and
displacement-field smoothness penalties."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .volume import Volume
from .warp import DeformationField

SIX_NEIGHBORHOOD = (
    (1, 0, 0),
    (-1, 0, 0),
    (0, 1, 0),
    (0, -1, 0),
    (0, 0, 1),
    (0, 0, -1),
)


@dataclass(frozen=True)
class MindParams:
    """offsets are (dx, dy, dz) vectors; patch_radius r gives (2r+1)^3
    patches; variance_floor clamps the local variance estimate."""

    offsets: tuple = SIX_NEIGHBORHOOD
    patch_radius: int = 1
    variance_floor: float = 1e-6

    def __post_init__(self):
        if len(self.offsets) == 0:
            raise ValueError("offset set must be non-empty")
        if self.patch_radius < 0:
            raise ValueError("patch radius must be >= 0")
        if self.variance_floor <= 0:
            raise ValueError("variance floor must be positive")

    @property
    def reach(self) -> int:
        return self.patch_radius + max(max(abs(c) for c in r) for r in self.offsets)

    def min_dim(self) -> int:
        return 2 * self.patch_radius + 2


@dataclass(frozen=True)
class MindFeatures:
    """One channel per offset, values in (0, 1]."""

    values: np.ndarray
    offsets: tuple

    @property
    def channel_count(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.4
    beta: float = 0.3
    gamma: float = 0.8

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.gamma < 0:
            raise ValueError("loss weights must be non-negative")


DEFAULT_WEIGHTS = LossWeights(0.4, 0.3, 0.8)
ALTERNATE_WEIGHTS = LossWeights(0.5, 0.5, 1.0)


@dataclass(frozen=True)
class LossReport:
    isim: float
    gsim: float
    igreg: float
    greg: float
    total: float

    @classmethod
    def compose(cls, isim, gsim, igreg, greg, w: LossWeights) -> "LossReport":
        total = (isim + w.alpha * gsim) + (w.gamma * igreg + w.beta * greg)
        return cls(float(isim), float(gsim), float(igreg), float(greg), float(total))


# ---------------------------------------------------------------------------
# MIND
# ---------------------------------------------------------------------------


def _check_mind_dims(dims, params: MindParams):
    if min(dims) < params.min_dim():
        raise ValueError(
            f"volume dims {dims} too small for patch radius {params.patch_radius} "
            f"(every dim must be >= {params.min_dim()})"
        )


def mind_graph(t: Tensor, params: MindParams, tape: Tape | None = None) -> Tensor:
    """MIND features of a 1-channel tensor as a |R|-channel tensor.

    Per offset r, D_p is the mean squared difference between the patches at
    x and x+r (replicate-padded); the variance estimate is the offset-mean
    of D_p clamped below at the floor; features are exp(-D_p / V).
    """
    p = params.patch_radius
    m = params.reach
    D, H, W = t.value.shape[1:]
    padded = ad.pad_edge(t, m, tape)
    ext = (D + 2 * p, H + 2 * p, W + 2 * p)
    base = ad.shifted_crop(padded, (m - p, m - p, m - p), ext, tape)
    dp_channels = []
    for dx, dy, dz in params.offsets:
        shifted = ad.shifted_crop(padded, (m - p + dz, m - p + dy, m - p + dx), ext, tape)
        q = ad.square(ad.sub(base, shifted, tape), tape)
        dp_channels.append(ad.box_mean_valid(q, p, tape))
    dp = ad.concat_channels(dp_channels, tape)
    variance = ad.scale(ad.channel_sum(dp, tape), 1.0 / len(params.offsets), tape)
    variance = ad.maximum_scalar(variance, params.variance_floor, tape)
    return ad.exp(ad.neg(ad.div(dp, variance, tape), tape), tape)


def mind_features(v: Volume, params: MindParams = MindParams()) -> MindFeatures:
    _check_mind_dims(v.dims, params)
    feats = mind_graph(Tensor(v.data[None]), params)
    return MindFeatures(feats.value, params.offsets)


def mind_loss_op(
    warped: Tensor, fixed_feats: Tensor, params: MindParams, tape: Tape | None = None
) -> Tensor:
    """Mean absolute MIND-feature difference against precomputed fixed
    features; differentiable with respect to the warped tensor."""
    feats = mind_graph(warped, params, tape)
    return ad.mean_all(ad.absolute(ad.sub(feats, fixed_feats, tape), tape), tape)


def mind_loss(warped: Volume, fixed: Volume, params: MindParams = MindParams()) -> float:
    """Mean |MIND(warped) - MIND(fixed)| over all voxels and offsets."""
    if warped.dims != fixed.dims:
        raise ValueError(f"mind_loss: dims mismatch {warped.dims} vs {fixed.dims}")
    _check_mind_dims(warped.dims, params)
    fixed_feats = mind_graph(Tensor(fixed.data[None]), params)
    return float(mind_loss_op(Tensor(warped.data[None]), fixed_feats, params).value)


# ---------------------------------------------------------------------------
# smoothness regularizers
# ---------------------------------------------------------------------------


def smoothness_op(f: Tensor, mode: str = "l2sq", tape: Tape | None = None) -> Tensor:
    """Forward-difference smoothness penalty, normalized by voxel count.

    "l2sq" sums squared Jacobian components (diffusion regularizer);
    "l2" sums per-voxel Euclidean norms of the 9-component Jacobian.
    The trailing slice along each axis contributes zero difference.
    """
    if mode not in ("l2", "l2sq"):
        raise ValueError(f"unknown smoothness mode {mode!r}")
    C, D, H, W = f.value.shape
    n_vox = D * H * W
    diffs = []
    for axis, (rd, rh, rw) in ((1, (D - 1, H, W)), (2, (D, H - 1, W)), (3, (D, H, W - 1))):
        off = [0, 0, 0]
        off[axis - 1] = 1
        hi = ad.shifted_crop(f, tuple(off), (rd, rh, rw), tape)
        lo = ad.shifted_crop(f, (0, 0, 0), (rd, rh, rw), tape)
        diffs.append((axis, ad.sub(hi, lo, tape)))

    if mode == "l2sq":
        total = None
        for _, d in diffs:
            s = ad.sum_all(ad.square(d, tape), tape)
            total = s if total is None else ad.add(total, s, tape)
        return ad.scale(total, 1.0 / n_vox, tape)

    # l2: embed each difference back to full dims (zeros on the trailing
    # slice), stack all 3C channels, take per-voxel norms.
    parts = [_embed(d, axis, f.value.shape, tape) for axis, d in diffs]
    stacked = ad.concat_channels(parts, tape)
    sq = ad.channel_sum(ad.square(stacked, tape), tape)
    norms = ad.sqrt(sq, tape)
    return ad.scale(ad.sum_all(norms, tape), 1.0 / n_vox, tape)


def _embed(d: Tensor, axis: int, full_shape, tape: Tape | None) -> Tensor:
    """Zero-pad tensor d by one trailing slice along the given spatial axis."""
    shape = d.value.shape
    out = np.zeros((shape[0],) + tuple(full_shape[1:]))
    sl = [slice(None)] * 4
    sl[axis] = slice(0, shape[axis])
    out[tuple(sl)] = d.value

    def bw(g):
        return (g[tuple(sl)].copy(),)

    return ad._make(tape, out, (d,), bw)


def smoothness_loss(f: DeformationField, mode: str = "l2sq") -> float:
    """Smoothness penalty of a displacement field (see smoothness_op)."""
    if min(f.dims) < 2:
        raise ValueError(f"smoothness_loss needs every dim >= 2, got {f.dims}")
    return float(smoothness_op(Tensor(f.disp), mode).value)


# ---------------------------------------------------------------------------
# combined objective
# ---------------------------------------------------------------------------


def total_loss(
    warped_ct: Volume,
    fixed_mr: Volume,
    warped_gct: Volume,
    fixed_gmr: Volume,
    f_ig: DeformationField,
    f_g: DeformationField,
    w: LossWeights = DEFAULT_WEIGHTS,
    params: MindParams = MindParams(),
    smooth_mode: str = "l2sq",
) -> LossReport:
    """Image similarity + weighted gradient-map similarity + weighted
    smoothness of both fields."""
    for other in (fixed_mr, warped_gct, fixed_gmr):
        if other.dims != warped_ct.dims:
            raise ValueError("total_loss: volume dims mismatch")
    if f_ig.dims != warped_ct.dims or f_g.dims != warped_ct.dims:
        raise ValueError("total_loss: field dims mismatch")
    isim = mind_loss(warped_ct, fixed_mr, params)
    gsim = mind_loss(warped_gct, fixed_gmr, params)
    igreg = smoothness_loss(f_ig, smooth_mode)
    greg = smoothness_loss(f_g, smooth_mode)
    return LossReport.compose(isim, gsim, igreg, greg, w)


def total_loss_op(
    isim: Tensor,
    gsim: Tensor,
    igreg: Tensor,
    greg: Tensor,
    w: LossWeights,
    tape: Tape | None = None,
) -> Tensor:
    """Tape-level combination matching LossReport.compose term grouping."""
    left = ad.add(isim, ad.scale(gsim, w.alpha, tape), tape)
    right = ad.add(ad.scale(igreg, w.gamma, tape), ad.scale(greg, w.beta, tape), tape)
    return ad.add(left, right, tape)
