"""Shared feature extractor producing the four-scale pyramid.

Two initial 3x3 convolutions (stride 2, then 1) bring the input to half
resolution with ``c`` channels, then four blocks of 2x2 max-pooling plus
two 3x3 convolutions extract 2c, 4c, 8c and 16c features at 1/4, 1/8,
1/16 and 1/32 resolution. Batch norm and ReLU follow every convolution.
The same instance processes the left and the right image, so the two
views always share one parameter set.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import nn
from .diffops import ShapeError, Tensor, max_pool_2x2


@dataclass
class FeaturePyramid:
    """Per-scale feature maps; fN sits at 1/N of the input resolution."""
    f2: Tensor
    f4: Tensor
    f8: Tensor
    f16: Tensor
    f32: Tensor

    def at_scale(self, scale: int) -> Tensor:
        return {2: self.f2, 4: self.f4, 8: self.f8,
                16: self.f16, 32: self.f32}[scale]


class Encoder(nn.Module):
    def __init__(self, c: int, rng):
        self.c = int(c)
        self.conv1 = nn.ConvBlock2d(3, c, stride=2, rng=rng)
        self.conv2 = nn.ConvBlock2d(c, c, rng=rng)
        blocks = []
        ch = c
        for _ in range(4):
            blocks.append(nn.ConvBlock2d(ch, 2 * ch, rng=rng))
            blocks.append(nn.ConvBlock2d(2 * ch, 2 * ch, rng=rng))
            ch *= 2
        self.blocks = blocks

    def extract_features(self, img: Tensor) -> FeaturePyramid:
        if img.ndim != 4 or img.shape[1] != 3:
            raise ShapeError(f"extract_features: expected Bx3xHxW input, "
                             f"got {img.shape}")
        h, w = img.shape[2], img.shape[3]
        if h % 32 or w % 32:
            raise ShapeError(
                f"extract_features: input {h}x{w} not divisible by 32; "
                f"pad or crop the image first")
        x = self.conv2(self.conv1(img))
        levels = [x]
        for i in range(4):
            x = max_pool_2x2(x)
            x = self.blocks[2 * i + 1](self.blocks[2 * i](x))
            levels.append(x)
        return FeaturePyramid(*levels)

    def forward(self, img: Tensor) -> FeaturePyramid:
        return self.extract_features(img)

    @staticmethod
    def parameter_count(c: int) -> int:
        """Parameters (conv weights/biases + BN affine) as a function of c."""
        total = 9 * 3 * c + c + 2 * c      # stride-2 conv + BN
        total += 9 * c * c + c + 2 * c     # second 3x3 conv + BN
        ch = c
        for _ in range(4):
            out = 2 * ch
            total += 9 * ch * out + out + 2 * out
            total += 9 * out * out + out + 2 * out
            ch = out
        return total
