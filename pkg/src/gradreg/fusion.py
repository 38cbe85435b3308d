"""Fusion of the two branch deformation fields: plain averaging or a
learnable gated module (sigmoid gate convolution, per-channel re-weighting,
1x1x1 bottleneck recombination)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .warp import DeformationField

GATE_KERNEL = 3
FIELD_CH = 3
GATE_CH = 2 * FIELD_CH


@dataclass
class GatedFusionParams:
    gate_w: Tensor  # (6, 6, 3, 3, 3)
    gate_b: Tensor  # (6,)
    bottleneck_w: Tensor  # (3, 6, 1, 1, 1)
    bottleneck_b: Tensor  # (3,)

    def parameters(self) -> list[tuple[str, Tensor]]:
        return [
            ("gate_w", self.gate_w),
            ("gate_b", self.gate_b),
            ("bottleneck_w", self.bottleneck_w),
            ("bottleneck_b", self.bottleneck_b),
        ]

    def parameter_count(self) -> int:
        return sum(t.value.size for _, t in self.parameters())


def init_gated_fusion(seed: int = 0, test_mode: bool = False) -> GatedFusionParams:
    """Gate weights are small fan-in-scaled noise (zeros in test mode) with
    zero bias, so initial gates are ~0.5; the bottleneck sums channel c with
    channel c+3 at weight 1. The initial module therefore reproduces average
    fusion (exactly, in test mode)."""
    if test_mode:
        gate_w = np.zeros((GATE_CH, GATE_CH, GATE_KERNEL, GATE_KERNEL, GATE_KERNEL))
    else:
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
        bound = 1.0 / np.sqrt(GATE_CH * GATE_KERNEL**3)
        gate_w = rng.uniform(
            -bound, bound, size=(GATE_CH, GATE_CH, GATE_KERNEL, GATE_KERNEL, GATE_KERNEL)
        )
    bottleneck_w = np.zeros((FIELD_CH, GATE_CH, 1, 1, 1))
    for c in range(FIELD_CH):
        bottleneck_w[c, c, 0, 0, 0] = 1.0
        bottleneck_w[c, c + FIELD_CH, 0, 0, 0] = 1.0
    return GatedFusionParams(
        gate_w=Tensor(gate_w, requires_grad=True),
        gate_b=Tensor(np.zeros(GATE_CH), requires_grad=True),
        bottleneck_w=Tensor(bottleneck_w, requires_grad=True),
        bottleneck_b=Tensor(np.zeros(FIELD_CH), requires_grad=True),
    )


def average_fuse_op(f_i: Tensor, f_g: Tensor, tape: Tape | None = None) -> Tensor:
    # 0.5*a + 0.5*b rather than (a+b)/2: bitwise-identical to the gated
    # module under sum-initialization.
    return ad.add(ad.scale(f_i, 0.5, tape), ad.scale(f_g, 0.5, tape), tape)


def average_fuse(f_i: DeformationField, f_g: DeformationField) -> DeformationField:
    """Per-voxel, per-channel arithmetic mean of two fields."""
    if f_i.dims != f_g.dims:
        raise ValueError(f"average_fuse: dims mismatch {f_i.dims} vs {f_g.dims}")
    return DeformationField(average_fuse_op(Tensor(f_i.disp), Tensor(f_g.disp)).value)


def gated_fuse_op(
    params: GatedFusionParams, f_i: Tensor, f_g: Tensor, tape: Tape | None = None
) -> Tensor:
    """sigmoid(conv3(concat)) gates re-weight each field per voxel and
    channel; the 1x1x1 bottleneck recombines the re-weighted fields."""
    if f_i.value.shape != f_g.value.shape:
        raise ValueError(f"gated_fuse: shape mismatch {f_i.value.shape} vs {f_g.value.shape}")
    both = ad.concat_channels([f_i, f_g], tape)
    gates = ad.sigmoid(ad.conv3d(both, params.gate_w, params.gate_b, stride=1, tape=tape), tape)
    p_i = ad.slice_channels(gates, 0, FIELD_CH, tape)
    p_g = ad.slice_channels(gates, FIELD_CH, GATE_CH, tape)
    weighted = ad.concat_channels([ad.mul(p_i, f_i, tape), ad.mul(p_g, f_g, tape)], tape)
    return ad.conv3d(weighted, params.bottleneck_w, params.bottleneck_b, stride=1, tape=tape)


def gated_fuse(
    params: GatedFusionParams, f_i: DeformationField, f_g: DeformationField
) -> DeformationField:
    if f_i.dims != f_g.dims:
        raise ValueError(f"gated_fuse: dims mismatch {f_i.dims} vs {f_g.dims}")
    return DeformationField(gated_fuse_op(params, Tensor(f_i.disp), Tensor(f_g.disp)).value)
