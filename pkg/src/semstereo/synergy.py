"""Joint disparity refinement from hybrid semantic+disparity volumes.

Per stage: the regularized cost volume is reorganized with its disparity
hypotheses as channels, the semantic logits are compressed by a 1x1 conv
to the same channel count (so neither modality dominates), and for
stages 2-3 the upsampled previous refined disparity is appended. Three
3x3 convolutions turn the concatenation into a residual volume that is
added to the reorganized one, and soft-argmin over the corrected volume
yields the stage's refined value: absolute at stage 1, a bounded
correction to the upsampled previous refinement at stages 2-3.

With all residual-conv weights at zero the corrected volume equals the
input volume bitwise, so refinement degrades to the plain disparity
path.
"""

from __future__ import annotations

import numpy as np

from . import nn
from .dispnet import (CostVolume, STAGE_SCALES, stage_offsets,
                      upsample_disparity_2x)
from .diffops import (ShapeError, Tensor, add, concat, expectation, neg,
                      reshape, softmax)
from .semnet import SemanticLogits


class StageRefiner(nn.Module):
    def __init__(self, depth: int, n_classes: int, with_prev: bool, rng):
        self.depth = depth
        self.compress = nn.ConvBlock2d(n_classes, depth, kernel=1, rng=rng)
        in_ch = 2 * depth + (1 if with_prev else 0)
        self.trunk1 = nn.ConvBlock2d(in_ch, 2 * depth, rng=rng)
        self.trunk2 = nn.ConvBlock2d(2 * depth, depth, rng=rng)
        self.trunk3 = nn.Conv2d(depth, depth, rng=rng)

    def residual(self, hybrid: Tensor) -> Tensor:
        return self.trunk3(self.trunk2(self.trunk1(hybrid)))


class SynergyRefiner(nn.Module):
    def __init__(self, n_classes: int, rng):
        self.n_classes = int(n_classes)
        self.stage1 = StageRefiner(len(stage_offsets(1)), n_classes, False, rng)
        self.stage2 = StageRefiner(len(stage_offsets(2)), n_classes, True, rng)
        self.stage3 = StageRefiner(len(stage_offsets(3)), n_classes, True, rng)

    def _refiner(self, stage: int) -> StageRefiner:
        return (self.stage1, self.stage2, self.stage3)[stage - 1]

    def compress_semantics(self, logits: SemanticLogits, stage: int) -> Tensor:
        """1x1 conv + BN + ReLU mapping N classes to the stage's D channels."""
        if logits.scores.shape[1] != self.n_classes:
            raise ShapeError(f"compress_semantics: logits carry "
                             f"{logits.scores.shape[1]} classes, expected "
                             f"{self.n_classes}")
        return self._refiner(stage).compress(logits.scores)

    def refine_stage(self, volume: CostVolume, sem: SemanticLogits,
                     prev_refined, stage: int) -> Tensor:
        if stage not in STAGE_SCALES:
            raise ValueError(f"refine_stage: stage {stage} out of range")
        if volume.scale != STAGE_SCALES[stage]:
            raise ShapeError(f"refine_stage: volume at 1/{volume.scale} fed "
                             f"to stage {stage} (1/{STAGE_SCALES[stage]})")
        if sem.scale != volume.scale:
            raise ShapeError(f"refine_stage: semantic logits at 1/{sem.scale} "
                             f"do not match volume at 1/{volume.scale}")
        b, _, d, h, w = volume.costs.shape
        if sem.scores.shape[2:] != (h, w):
            raise ShapeError(f"refine_stage: logits extents "
                             f"{sem.scores.shape[2:]} vs volume {(h, w)}")
        reorganized = reshape(volume.costs, (b, d, h, w))
        parts = [reorganized, self.compress_semantics(sem, stage)]
        up = None
        if stage > 1:
            if prev_refined is None:
                raise ShapeError(f"refine_stage: stage {stage} requires the "
                                 f"previous refined disparity")
            up = upsample_disparity_2x(prev_refined)
            parts.append(up)
        corrected = add(reorganized, self._refiner(stage).residual(concat(parts)))
        probs = softmax(neg(corrected), axis=1)
        value = expectation(probs, volume.offsets.astype(np.float64), axis=1)
        return value if stage == 1 else add(up, value)
