"""
Neural building blocks for the AFIU defocus-blur detection network.

The encoder of the network is assembled from three kinds of blocks: an
aggregate interaction module (:class:`AIM`) that pulls 2 or 3 adjacent
backbone levels onto one level, a self-interaction module (:class:`SIM`)
that exchanges information between a full- and a half-resolution branch
of the same feature, and a small fusion stack (:class:`Fuse`).  The
decoder is a stack of residual U-blocks (:class:`RSU`).

Every block is an ordinary :class:`torch.nn.Module` built from a
:class:`BlockSpec` and is a pure function of its input and parameters.
Shape contracts are checked on entry and violations raise
:class:`ShapeError`.
"""
import logging
import math
from typing import List, Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F
from pydantic import BaseModel, Field, PositiveInt, field_validator

logger = logging.getLogger(__name__)


class ShapeError(ValueError):
    """Raised when a feature map violates a block's shape contract."""


class BlockSpec(BaseModel):
    """Construction record shared by every block type.

    ``rsu_depth``, ``dilated`` and ``mid_channels`` are only read by
    :class:`RSU`.
    """

    in_channels: List[PositiveInt]
    out_channels: PositiveInt
    level: int = Field(1, ge=1, le=5)
    rsu_depth: int = Field(2, ge=2)
    dilated: bool = False
    mid_channels: Optional[PositiveInt] = None

    @field_validator("in_channels")
    @classmethod
    def _non_empty(cls, value: List[int]) -> List[int]:
        if not value:
            raise ValueError("in_channels must list at least one input")
        return value

    @property
    def inner_channels(self) -> int:
        return self.mid_channels or max(self.out_channels // 2, 1)


def _check_channels(x: torch.Tensor, expected: int, what: str) -> None:
    if x.dim() != 4:
        raise ShapeError(f"{what}: expected a 4-axis (N, C, H, W) tensor, got shape {tuple(x.shape)}")
    if x.shape[1] != expected:
        raise ShapeError(f"{what}: expected {expected} channels, got {x.shape[1]}")


def resample(x: torch.Tensor, factor: float, mode: str = "image") -> torch.Tensor:
    """Rescale the spatial axes of ``x`` by a power-of-two ``factor``.

    ``mode="image"`` uses bilinear interpolation with ``align_corners=False``;
    ``mode="mask"`` uses nearest neighbour, and on downsampling keeps the
    top-left sample of every cell.  Channels are never touched.
    """
    if mode not in ("image", "mask"):
        raise ValueError(f"unknown resample mode {mode!r}")
    if factor <= 0:
        raise ValueError(f"resample factor must be positive, got {factor}")
    exponent = math.log2(factor)
    if abs(exponent - round(exponent)) > 1e-9:
        raise ValueError(f"resample factor must be a power of two, got {factor}")
    exponent = int(round(exponent))
    if exponent == 0:
        return x

    height, width = x.shape[-2:]
    if exponent > 0:
        scale = 2 ** exponent
        size = (height * scale, width * scale)
        if mode == "image":
            return F.interpolate(x, size=size, mode="bilinear", align_corners=False)
        return F.interpolate(x, size=size, mode="nearest")

    step = 2 ** (-exponent)
    if height % step or width % step:
        raise ShapeError(f"cannot downsample {height}x{width} by {step}: size not divisible")
    if mode == "mask":
        return x[..., ::step, ::step]
    return F.interpolate(x, size=(height // step, width // step), mode="bilinear", align_corners=False)


def _init_conv(conv: nn.Conv2d) -> None:
    nn.init.kaiming_normal_(conv.weight, mode="fan_in", nonlinearity="relu")
    if conv.bias is not None:
        nn.init.zeros_(conv.bias)


class ConvBNReLU(nn.Module):
    """3x3 convolution, batch normalisation and an optional ReLU.

    In training mode a single-sample batch of 1x1 features (the half-resolution
    SIM branch at the deepest level) is normalised with the running statistics
    and leaves them untouched.
    """

    def __init__(self, in_ch: int, out_ch: int, dilation: int = 1, relu: bool = True):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, padding=dilation, dilation=dilation, bias=False)
        self.bn = nn.BatchNorm2d(out_ch)
        self.relu = relu
        _init_conv(self.conv)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.conv(x)
        if self.training and x.shape[0] * x.shape[2] * x.shape[3] == 1:
            # one value per channel has no batch statistics; normalise with the running ones
            bn = self.bn
            x = F.batch_norm(x, bn.running_mean, bn.running_var, bn.weight, bn.bias, False, 0.0, bn.eps)
        else:
            x = self.bn(x)
        return F.relu(x) if self.relu else x


class AIM(nn.Module):
    """Aggregate interaction: merge 2-3 adjacent pyramid levels onto one.

    Neighbors are passed shallow to deep.  The current level is the first
    entry at level 1, the last at level 5 and the middle one otherwise.
    Shallower neighbors are downsampled x2, deeper ones upsampled x2, each
    is reduced by a 3x3 convolution, and the sum goes through
    conv + BN + ReLU.
    """

    def __init__(self, spec: BlockSpec):
        super().__init__()
        expected = 2 if spec.level in (1, 5) else 3
        if len(spec.in_channels) != expected:
            raise ShapeError(
                f"AIM at level {spec.level} takes {expected} neighbors, spec lists {len(spec.in_channels)}"
            )
        self.spec = spec
        self.current = 0 if spec.level == 1 else 1
        self.reduce = nn.ModuleList(nn.Conv2d(c, spec.out_channels, 3, padding=1) for c in spec.in_channels)
        for conv in self.reduce:
            _init_conv(conv)
        self.merge = ConvBNReLU(spec.out_channels, spec.out_channels)

    def forward(self, neighbors: Sequence[torch.Tensor]) -> torch.Tensor:
        if len(neighbors) not in (2, 3) or len(neighbors) != len(self.spec.in_channels):
            raise ShapeError(f"AIM expects {len(self.spec.in_channels)} neighbors, got {len(neighbors)}")
        for i, (x, channels) in enumerate(zip(neighbors, self.spec.in_channels)):
            _check_channels(x, channels, f"AIM neighbor {i}")
        for shallow, deep in zip(neighbors, neighbors[1:]):
            hs, ws = shallow.shape[-2:]
            hd, wd = deep.shape[-2:]
            if hs != 2 * hd or ws != 2 * wd:
                raise ShapeError(f"AIM neighbors must differ by exactly x2: {hs}x{ws} followed by {hd}x{wd}")

        merged = None
        for j, (x, reduce) in enumerate(zip(neighbors, self.reduce)):
            y = reduce(resample(x, 2.0 ** (j - self.current), "image"))
            merged = y if merged is None else merged + y
        return self.merge(merged)


class SIM(nn.Module):
    """Self-interaction between a full- and a half-resolution branch.

    The low branch is upsampled and added to the high branch, the high
    branch is downsampled and added to the low one; both are convolved
    again and summed at full resolution.
    """

    def __init__(self, spec: BlockSpec):
        super().__init__()
        self.spec = spec
        in_ch = spec.in_channels[0]
        out_ch = spec.out_channels
        self.high_in = ConvBNReLU(in_ch, out_ch)
        self.low_in = ConvBNReLU(in_ch, out_ch)
        self.high_out = ConvBNReLU(out_ch, out_ch, relu=False)
        self.low_out = ConvBNReLU(out_ch, out_ch, relu=False)

    def _check(self, x: torch.Tensor) -> None:
        _check_channels(x, self.spec.in_channels[0], "SIM input")
        height, width = x.shape[-2:]
        if height % 2 or width % 2:
            raise ShapeError(f"SIM needs even spatial size, got {height}x{width}")

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        self._check(x)
        high = self.high_in(x)
        low = self.low_in(resample(x, 0.5, "image"))
        high, low = high + resample(low, 2, "image"), low + resample(high, 0.5, "image")
        return F.relu(self.high_out(high) + resample(self.low_out(low), 2, "image"))

    def high_branch(self, x: torch.Tensor) -> torch.Tensor:
        """The output the block produces when the low branch contributes nothing."""
        self._check(x)
        return F.relu(self.high_out(self.high_in(x)))

    def low_branch(self) -> List[nn.Module]:
        return [self.low_in, self.low_out]


class Fuse(nn.Module):
    def __init__(self, spec: BlockSpec):
        super().__init__()
        self.spec = spec
        self.layers = nn.Sequential(
            ConvBNReLU(spec.in_channels[0], spec.out_channels),
            ConvBNReLU(spec.out_channels, spec.out_channels),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_channels(x, self.spec.in_channels[0], "fuse input")
        return self.layers(x)


class ResidualU(nn.Module):
    """Inner encoder-decoder of an RSU block.

    ``depth`` encoder stages; without dilation each stage after the first
    halves the resolution (max pooling) and the decoder upsamples back.
    With dilation every stage keeps the resolution and widens its
    receptive field instead (dilation 2**stage).
    """

    def __init__(self, channels: int, mid: int, depth: int, dilated: bool):
        super().__init__()
        self.depth = depth
        self.dilated = dilated
        rates = [2 ** i if dilated else 1 for i in range(depth)]
        self.encoders = nn.ModuleList(
            ConvBNReLU(channels if i == 0 else mid, mid, dilation=rates[i]) for i in range(depth)
        )
        self.bottom = ConvBNReLU(mid, mid, dilation=2 ** depth if dilated else 2)
        self.decoders = nn.ModuleList(
            ConvBNReLU(2 * mid, mid if i > 0 else channels, dilation=rates[i]) for i in reversed(range(depth))
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        skips = []
        hx = x
        for i, encoder in enumerate(self.encoders):
            if i > 0 and not self.dilated:
                hx = F.max_pool2d(hx, 2)
            hx = encoder(hx)
            skips.append(hx)
        hx = self.bottom(hx)
        for k, decoder in enumerate(self.decoders):
            if k > 0 and not self.dilated:
                hx = resample(hx, 2, "image")
            hx = decoder(torch.cat([hx, skips[self.depth - 1 - k]], dim=1))
        return hx


class RSU(nn.Module):
    """Residual U-block: ``T(x) + U(T(x))``."""

    def __init__(self, spec: BlockSpec):
        super().__init__()
        if spec.rsu_depth < 2:
            raise ShapeError(f"rsu_depth must be >= 2, got {spec.rsu_depth}")
        self.spec = spec
        self.transform = ConvBNReLU(spec.in_channels[0], spec.out_channels)
        self.inner = ResidualU(spec.out_channels, spec.inner_channels, spec.rsu_depth, spec.dilated)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_channels(x, self.spec.in_channels[0], "RSU input")
        if not self.spec.dilated:
            step = 2 ** (self.spec.rsu_depth - 1)
            height, width = x.shape[-2:]
            if height % step or width % step:
                raise ShapeError(
                    f"RSU{self.spec.rsu_depth} without dilation needs sizes divisible by {step}, got {height}x{width}"
                )
        hx = self.transform(x)
        return hx + self.inner(hx)
