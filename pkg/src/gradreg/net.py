"""Encoder/decoder deformation-estimation network shared by both
registration branches: four stride-2 encoder convolutions, a decoder with
nearest-neighbor upsampling and skip concatenations, and a full-resolution
refinement head whose final convolution starts at zero so the initial
prediction is the identity deformation."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .volume import Volume
from .warp import DeformationField, warp_op

KERNEL = 3
LEAKY_SLOPE = 0.2
DOWN_FACTOR = 16  # four halvings


@dataclass(frozen=True)
class UNetConfig:
    enc_channels: tuple[int, ...] = (16, 32, 32, 32)
    dec_channels: tuple[int, ...] = (32, 32, 32, 32)
    refine_channels: tuple[int, ...] = (32, 16, 16, 3)
    input_channels: int = 2
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "enc_channels", tuple(self.enc_channels))
        object.__setattr__(self, "dec_channels", tuple(self.dec_channels))
        object.__setattr__(self, "refine_channels", tuple(self.refine_channels))
        if len(self.enc_channels) != 4:
            raise ValueError("exactly 4 stride-2 encoder stages required")
        if len(self.dec_channels) != 4:
            raise ValueError("exactly 4 decoder stages required")
        if len(self.refine_channels) != 4 or self.refine_channels[-1] != 3:
            raise ValueError("refinement head must be 4 convolutions ending in 3 channels")
        if any(c <= 0 for c in self.enc_channels + self.dec_channels + self.refine_channels):
            raise ValueError("channel counts must be positive")
        if self.input_channels <= 0:
            raise ValueError("input_channels must be positive")


# Thin preset used by gradient checks and the phantom training suite.
THIN_CONFIG = UNetConfig(
    enc_channels=(2, 2, 2, 2),
    dec_channels=(2, 2, 2, 2),
    refine_channels=(2, 2, 2, 3),
)


class ConvSpec(NamedTuple):
    name: str
    in_ch: int
    out_ch: int
    stride: int
    zero_init: bool


def conv_specs(config: UNetConfig) -> list[ConvSpec]:
    """Layer plan implied by a config; the in-channel arithmetic encodes the
    skip concatenations."""
    enc, dec, ref = config.enc_channels, config.dec_channels, config.refine_channels
    specs = []
    in_ch = config.input_channels
    for i, out in enumerate(enc):
        specs.append(ConvSpec(f"enc{i}", in_ch, out, 2, False))
        in_ch = out
    skips = [enc[2], enc[1], enc[0], config.input_channels]
    for i, out in enumerate(dec):
        specs.append(ConvSpec(f"dec{i}", in_ch, out, 1, False))
        in_ch = out + skips[i]
    for i, out in enumerate(ref):
        last = i == len(ref) - 1
        specs.append(ConvSpec(f"ref{i}", in_ch, out, 1, last))
        in_ch = out
    return specs


@dataclass
class Network:
    config: UNetConfig
    params: dict[str, Tensor] = field(default_factory=dict)

    def parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.params.items())

    def parameter_count(self) -> int:
        return sum(t.value.size for _, t in self.params.items())

    def forward(self, x: Tensor, tape: Tape | None = None) -> Tensor:
        """Predict a 3-channel field tensor from a (input_channels, ...) tensor."""
        if x.value.shape[0] != self.config.input_channels:
            raise ValueError(
                f"network expects {self.config.input_channels} input channels, "
                f"got {x.value.shape[0]}"
            )
        if any(n % DOWN_FACTOR != 0 for n in x.value.shape[1:]):
            raise ValueError(
                f"spatial dims {x.value.shape[1:]} must be divisible by {DOWN_FACTOR}"
            )
        p = self.params
        feats = [x]
        h = x
        for i in range(4):
            h = ad.leaky_relu(
                ad.conv3d(h, p[f"enc{i}_w"], p[f"enc{i}_b"], stride=2, tape=tape),
                LEAKY_SLOPE,
                tape,
            )
            feats.append(h)
        skips = [feats[3], feats[2], feats[1], feats[0]]
        for i in range(4):
            h = ad.leaky_relu(
                ad.conv3d(h, p[f"dec{i}_w"], p[f"dec{i}_b"], stride=1, tape=tape),
                LEAKY_SLOPE,
                tape,
            )
            h = ad.upsample_nearest2x(h, tape)
            h = ad.concat_channels([h, skips[i]], tape)
        for i in range(3):
            h = ad.leaky_relu(
                ad.conv3d(h, p[f"ref{i}_w"], p[f"ref{i}_b"], stride=1, tape=tape),
                LEAKY_SLOPE,
                tape,
            )
        return ad.conv3d(h, p["ref3_w"], p["ref3_b"], stride=1, tape=tape)


def build_unet(config: UNetConfig) -> Network:
    """Initialize a network: fan-in-scaled uniform weights, zero biases, and
    an all-zero final refinement convolution (identity starting point)."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(config.seed)))
    net = Network(config=config)
    for spec in conv_specs(config):
        shape = (spec.out_ch, spec.in_ch, KERNEL, KERNEL, KERNEL)
        if spec.zero_init:
            w = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(spec.in_ch * KERNEL**3)
            w = rng.uniform(-bound, bound, size=shape)
        net.params[f"{spec.name}_w"] = Tensor(w, requires_grad=True)
        net.params[f"{spec.name}_b"] = Tensor(np.zeros(spec.out_ch), requires_grad=True)
    return net


def predict_field(net: Network, moving: Volume, fixed: Volume, tape: Tape | None = None) -> DeformationField:
    """Estimate the field aligning moving to fixed (inference convenience)."""
    if moving.dims != fixed.dims:
        raise ValueError(f"dims mismatch: {moving.dims} vs {fixed.dims}")
    x = ad.concat_channels([Tensor(moving.data[None]), Tensor(fixed.data[None])], tape)
    return DeformationField(net.forward(x, tape).value)


class DualBranchOut(NamedTuple):
    phi_i: Tensor
    phi_g: Tensor
    phi_ig: Tensor
    warped_ct: Tensor
    warped_gct: Tensor


def dual_branch_forward(
    net_i: Network,
    net_g: Network,
    fuse,
    ct: Tensor,
    mr: Tensor,
    gct: Tensor,
    gmr: Tensor,
    tape: Tape | None = None,
) -> DualBranchOut:
    """Run both branches and the fusion: the image branch predicts phi_i,
    the gradient branch phi_g; the fused field warps the image, the
    gradient branch warps its own input with phi_g.

    fuse is a callable (phi_i, phi_g, tape) -> phi_ig tensor.
    """
    for t in (mr, gct, gmr):
        if t.value.shape != ct.value.shape:
            raise ValueError("dual_branch_forward: input shapes differ")
    phi_i = net_i.forward(ad.concat_channels([ct, mr], tape), tape)
    phi_g = net_g.forward(ad.concat_channels([gct, gmr], tape), tape)
    phi_ig = fuse(phi_i, phi_g, tape)
    warped_ct = warp_op(ct, phi_ig, tape)
    warped_gct = warp_op(gct, phi_g, tape)
    return DualBranchOut(phi_i, phi_g, phi_ig, warped_ct, warped_gct)
