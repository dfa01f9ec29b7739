"""The full promptable pose+mask network."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import autodiff as ad
from ..optim import ParameterStore
from .backbone import ConvPyramid, PromptEncoder
from .decoder import Decoder, QueryInit
from .encoder import DeformableEncoder, ModalityFusion
from .heads import PredictionHeads, PredictionSet, segment_conditional, upsample_logits


@dataclass
class InferenceResult:
    """Argmax-group output of one forward pass, pixel units."""

    group: int
    score: float
    pose: np.ndarray        # (k, 2) pixel coordinates
    visibility: np.ndarray  # (k,) probabilities
    box: np.ndarray         # (x, y, w, h) pixels
    mask: np.ndarray        # (H, W) bool
    mask_prob: np.ndarray   # (H, W) float


class PromptPoseNet:
    def __init__(self, cfg, seed=0):
        self.cfg = cfg
        self.store = ParameterStore()
        rng = np.random.default_rng(seed)
        self.backbone = ConvPyramid(self.store, cfg, rng)
        self.prompt_encoder = PromptEncoder(self.store, cfg, rng)
        self.fusion = ModalityFusion(self.store, cfg, rng)
        self.encoder = DeformableEncoder(self.store, cfg, rng)
        self.query_init = QueryInit(self.store, cfg, rng)
        self.heads = PredictionHeads(self.store, cfg, rng)
        self.decoder = Decoder(self.store, cfg, rng, self.heads.keypoint)

    def forward(self, image, prompt):
        """Run the full pipeline for one image and one prompt.

        Returns (PredictionSet, fused features, query groups).
        """
        features = self.backbone(image)
        prompt_embedding = self.prompt_encoder(prompt, features)
        fused = self.fusion(features, prompt_embedding)
        fused = self.encoder(fused)
        groups = self.query_init(fused, prompt_embedding)
        groups = self.decoder(groups, fused)
        scores, boxes, pose, visibility, filters = self.heads(groups)
        mask_logits = segment_conditional(filters, fused, self.cfg)
        preds = PredictionSet(scores, boxes, pose, visibility, filters, mask_logits)
        return preds, fused, groups

    def infer(self, image, prompt):
        """Forward pass returning the highest-scoring group's outputs at
        image resolution (ties break toward the lowest group index)."""
        with ad.no_grad():
            preds, fused, _ = self.forward(image, prompt)
            h, w = fused.image_hw
            g = int(np.argmax(preds.scores.data))
            full_logits = upsample_logits(preds.mask_logits, h, w).data
        prob = 1.0 / (1.0 + np.exp(-full_logits[g]))
        box = preds.boxes.data[g] * np.array([w, h, w, h])
        return InferenceResult(
            group=g,
            score=float(preds.scores.data[g]),
            pose=preds.pose.data[g] * np.array([w, h]),
            visibility=preds.visibility.data[g].copy(),
            box=np.array([box[0] - box[2] / 2.0, box[1] - box[3] / 2.0, box[2], box[3]]),
            mask=prob >= 0.5,
            mask_prob=prob,
        )

    def save(self, path):
        self.store.save(path)

    def load(self, path):
        self.store.load(path)
