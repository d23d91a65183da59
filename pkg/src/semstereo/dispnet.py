"""Coarse-to-fine disparity decoder.

Stage 1 searches the full range at 1/16 resolution with 13 hypotheses
(offsets 0..12, i.e. up to 192 px at full resolution); stages 2 and 3
search residual offsets -2..+2 at 1/8 and 1/4 against right features
warped by the upsampled previous estimate. Each stage regularizes its
distance volume with three 3x3x3 convolution blocks and regresses a
value with soft-argmin, so every estimate is a convex combination of
the stage's offsets.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .diffops import (ShapeError, Tensor, add, distance_volume, expectation,
                      neg, reshape, scale, softmax, upsample_bilinear,
                      warp_width)

MAX_STAGE1_OFFSET = 12
STAGE_SCALES = {1: 16, 2: 8, 3: 4}
FULL_RES_MAX_DISPARITY = MAX_STAGE1_OFFSET * STAGE_SCALES[1]   # 192 px


def stage_offsets(stage: int) -> np.ndarray:
    """Disparity hypotheses searched at ``stage``, in stage-scale px."""
    if stage == 1:
        return np.arange(0, MAX_STAGE1_OFFSET + 1, dtype=np.int64)
    return np.arange(-2, 3, dtype=np.int64)


@dataclass
class CostVolume:
    """Matching costs over a disparity-hypothesis axis (B x 1 x D x h x w)."""
    costs: Tensor
    offsets: np.ndarray
    scale: int

    def __post_init__(self):
        if self.costs.ndim != 5 or self.costs.shape[1] != 1:
            raise ShapeError(f"CostVolume: costs must be Bx1xDxhxw, "
                             f"got {self.costs.shape}")
        if self.costs.shape[2] != len(self.offsets):
            raise ShapeError(f"CostVolume: {self.costs.shape[2]} cost planes "
                             f"for {len(self.offsets)} offsets")


@dataclass
class DisparityStageOutput:
    """One stage's estimate, in px at the stage's scale.

    ``residual`` is the soft-argmin component alone: the full estimate at
    stage 1, the bounded correction at stages 2-3. It always lies inside
    the convex hull of ``volume.offsets``.
    """
    disparity: Tensor
    residual: Tensor
    volume: CostVolume


def build_distance_volume(fl: Tensor, fr: Tensor, offsets,
                          scale: int) -> CostVolume:
    offsets = np.asarray(offsets, dtype=np.int64)
    raw = distance_volume(fl, fr, offsets)
    b, d, h, w = raw.shape
    return CostVolume(reshape(raw, (b, 1, d, h, w)), offsets, scale)


def soft_argmin(volume: CostVolume) -> Tensor:
    """Expectation of the offsets under softmax(-costs): B x 1 x h x w."""
    b, _, d, h, w = volume.costs.shape
    flat = reshape(volume.costs, (b, d, h, w))
    probs = softmax(neg(flat), axis=1)
    return expectation(probs, volume.offsets.astype(np.float64), axis=1)


def upsample_disparity_2x(d: Tensor) -> Tensor:
    """Doubling the grid doubles the encoded pixel offsets as well."""
    if d.ndim != 4 or d.shape[1] != 1:
        raise ShapeError(f"upsample_disparity_2x: expected Bx1xhxw, "
                         f"got {d.shape}")
    return scale(upsample_bilinear(d, 2), 2.0)


def full_resolution_disparity(stage3: DisparityStageOutput) -> Tensor:
    """4x bilinear upsample of the stage-3 map, values scaled by 4."""
    if stage3.volume.scale != 4:
        raise ShapeError("full_resolution_disparity: expected a stage-3 "
                         f"output at scale 1/4, got 1/{stage3.volume.scale}")
    return scale(upsample_bilinear(stage3.disparity, 4), 4.0)


class VolumeRegularizer(nn.Module):
    """Three 3x3x3 conv blocks; BN+ReLU between, bare final 1-channel layer."""

    def __init__(self, channels, rng):
        a, b, out = channels
        if out != 1:
            raise ShapeError("VolumeRegularizer: final layer must emit one "
                             f"channel, got {out}")
        self.block1 = nn.ConvBlock3d(1, a, rng=rng)
        self.block2 = nn.ConvBlock3d(a, b, rng=rng)
        self.final = nn.Conv3d(b, 1, rng=rng)

    def forward(self, v: Tensor) -> Tensor:
        return self.final(self.block2(self.block1(v)))


class DisparityNet(nn.Module):
    STAGE_CHANNELS = {1: (16, 16, 1), 2: (4, 4, 1), 3: (4, 4, 1)}

    def __init__(self, rng):
        self.reg1 = VolumeRegularizer(self.STAGE_CHANNELS[1], rng)
        self.reg2 = VolumeRegularizer(self.STAGE_CHANNELS[2], rng)
        self.reg3 = VolumeRegularizer(self.STAGE_CHANNELS[3], rng)

    def _regularizer(self, stage: int) -> VolumeRegularizer:
        return (self.reg1, self.reg2, self.reg3)[stage - 1]

    def regularize_volume(self, v: CostVolume, stage: int) -> CostVolume:
        out = self._regularizer(stage)(v.costs)
        return CostVolume(out, v.offsets, v.scale)

    def disparity_stage(self, fl: Tensor, fr: Tensor, prev_disp,
                        stage: int) -> DisparityStageOutput:
        """Full-range estimate at stage 1, bounded residual at stages 2-3."""
        if stage not in STAGE_SCALES:
            raise ValueError(f"disparity_stage: stage {stage} out of range")
        scale_k = STAGE_SCALES[stage]
        offsets = stage_offsets(stage)
        if stage == 1:
            volume = self.regularize_volume(
                build_distance_volume(fl, fr, offsets, scale_k), stage)
            disp = soft_argmin(volume)
            return DisparityStageOutput(disp, disp, volume)
        if prev_disp is None:
            raise ShapeError(f"disparity_stage: stage {stage} requires the "
                             f"previous stage's disparity")
        up = upsample_disparity_2x(prev_disp)
        warped = warp_width(fr, up)
        volume = self.regularize_volume(
            build_distance_volume(fl, warped, offsets, scale_k), stage)
        residual = soft_argmin(volume)
        return DisparityStageOutput(add(up, residual), residual, volume)
