"""Full network: shared encoder, disparity and semantic decoders, synergy.

``forward`` runs the pyramid stages strictly in order and only up to
``stage_stop``; a stage never reads anything produced by a later stage,
which is what makes early stopping sound. Each component runs inside an
operator scope so tests and the profiler can attribute work per stage.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .diffops import Tensor, op_scope
from .dispnet import STAGE_SCALES, DisparityNet, DisparityStageOutput
from .encoder import Encoder
from .semnet import SemanticLogits, SemanticNet
from .synergy import SynergyRefiner
from . import nn

SCOPE_ENCODER = "encoder"


def stage_scope(branch: str, stage: int) -> str:
    return f"{branch}_stage{stage}"


@dataclass
class StageOutputs:
    """Everything one pyramid stage produced, at 1/scale resolution."""
    scale: int
    disparity: DisparityStageOutput
    logits: SemanticLogits
    refined: Tensor | None


class SemStereoNet(nn.Module):
    def __init__(self, c: int, n_classes: int, seed: int = 0):
        self.c = int(c)
        self.n_classes = int(n_classes)
        rng = np.random.default_rng(seed)
        self.encoder = Encoder(c, rng)
        self.dispnet = DisparityNet(rng)
        self.semnet = SemanticNet(c, n_classes, rng)
        self.synergy = SynergyRefiner(n_classes, rng)

    def forward(self, left: Tensor, right: Tensor, stage_stop: int = 3,
                refine: bool = True, timings: dict | None = None
                ) -> list[StageOutputs]:
        if stage_stop not in STAGE_SCALES:
            raise ValueError(f"stage_stop must be 1, 2 or 3, got {stage_stop}")

        def timed(label, fn):
            if timings is None:
                with op_scope(label):
                    return fn()
            t0 = time.perf_counter()
            with op_scope(label):
                out = fn()
            timings[label] = timings.get(label, 0.0) + time.perf_counter() - t0
            return out

        pyr_l, pyr_r = timed(SCOPE_ENCODER, lambda: (
            self.encoder.extract_features(left),
            self.encoder.extract_features(right)))

        outputs: list[StageOutputs] = []
        prev_disp = prev_logits = prev_refined = None
        for stage in range(1, stage_stop + 1):
            scale = STAGE_SCALES[stage]
            fl, fr = pyr_l.at_scale(scale), pyr_r.at_scale(scale)
            disp = timed(stage_scope("disp", stage),
                         lambda: self.dispnet.disparity_stage(
                             fl, fr, prev_disp, stage))
            logits = timed(stage_scope("sem", stage),
                           lambda: self.semnet.semantic_stage(
                               pyr_l, prev_logits, stage))
            refined = None
            if refine:
                refined = timed(stage_scope("syn", stage),
                                lambda: self.synergy.refine_stage(
                                    disp.volume, logits, prev_refined, stage))
            outputs.append(StageOutputs(scale, disp, logits, refined))
            prev_disp, prev_logits, prev_refined = disp.disparity, logits, refined
        return outputs
