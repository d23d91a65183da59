"""Semantic decoder with residual cross-stage accumulation.

Each stage runs a small head (two 3x3 conv blocks, then a 1x1 projection
to the class count) on the scale's shared features; stage 1 additionally
sees the 2x-upsampled 1/32 features for broader context. From stage 2 on
the head output is summed with the bilinearly upsampled previous logits,
so later stages only learn corrections. Accumulation happens on raw
logits; summing normalized probabilities would break normalization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .dispnet import STAGE_SCALES
from .diffops import ShapeError, Tensor, add, concat, upsample_bilinear_2x
from .encoder import FeaturePyramid


@dataclass
class SemanticLogits:
    """Per-class scores (B x N x h x w) at 1/scale resolution."""
    scores: Tensor
    scale: int


class SemanticHead(nn.Module):
    def __init__(self, in_channels, mid_channels, n_classes, rng):
        self.block1 = nn.ConvBlock2d(in_channels, mid_channels, rng=rng)
        self.block2 = nn.ConvBlock2d(mid_channels, mid_channels, rng=rng)
        self.project = nn.Conv2d(mid_channels, n_classes, kernel=1, rng=rng)

    def forward(self, x):
        return self.project(self.block2(self.block1(x)))


class SemanticNet(nn.Module):
    def __init__(self, c: int, n_classes: int, rng):
        self.n_classes = int(n_classes)
        self.head1 = SemanticHead(24 * c, 8 * c, n_classes, rng)
        self.head2 = SemanticHead(4 * c, 4 * c, n_classes, rng)
        self.head3 = SemanticHead(2 * c, 2 * c, n_classes, rng)

    def semantic_stage(self, pyramid: FeaturePyramid, prev_logits,
                       stage: int) -> SemanticLogits:
        if stage not in STAGE_SCALES:
            raise ValueError(f"semantic_stage: stage {stage} out of range")
        scale = STAGE_SCALES[stage]
        if stage == 1:
            x = concat([pyramid.f16, upsample_bilinear_2x(pyramid.f32)])
            return SemanticLogits(self.head1(x), scale)
        if prev_logits is None:
            raise ShapeError(f"semantic_stage: stage {stage} requires the "
                             f"previous stage's logits")
        if prev_logits.scores.shape[1] != self.n_classes:
            raise ShapeError(
                f"semantic_stage: previous logits carry "
                f"{prev_logits.scores.shape[1]} classes, expected "
                f"{self.n_classes}")
        head = self.head2 if stage == 2 else self.head3
        feats = pyramid.f8 if stage == 2 else pyramid.f4
        out = add(head(feats), upsample_bilinear_2x(prev_logits.scores))
        return SemanticLogits(out, scale)


def predict_classes(logits: SemanticLogits) -> np.ndarray:
    """Per-pixel argmax over class scores; ties go to the lowest id."""
    return np.argmax(logits.scores.data, axis=1)
