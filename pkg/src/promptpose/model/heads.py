"""Task heads: confidence, box, keypoints+visibility, and the dynamic-filter
conditional mask decoder."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .. import autodiff as ad
from ..errors import ShapeError
from .layers import MLP, Linear, resize_bilinear


@dataclass
class PredictionSet:
    """Per-group outputs of one forward pass.

    scores (n,), boxes (n, 4) normalized cxcywh, pose (n, k, 2) normalized,
    visibility (n, k) probabilities, filters (n, filter_length), mask_logits
    (n, H/8, W/8). All tensors stay on the tape for training.
    """

    scores: ad.Tensor
    boxes: ad.Tensor
    pose: ad.Tensor
    visibility: ad.Tensor
    filters: ad.Tensor
    mask_logits: ad.Tensor

    @property
    def num_groups(self):
        return self.scores.shape[0]


class KeypointHead:
    """Sigmoid-bounded offset regression from reference points, plus
    per-keypoint visibility. Shared between decoder refinement and the
    final prediction."""

    def __init__(self, store, cfg, rng):
        self.offset = MLP(store, "heads.keypoint.offset", (cfg.D, cfg.D, 2), rng)
        self.vis = Linear(store, "heads.keypoint.visibility", cfg.D, 1, rng)

    def refine(self, kp_embeddings, kp_refs):
        n, k, d = kp_embeddings.shape
        off = self.offset(kp_embeddings.reshape(n * k, d)).reshape(n, k, 2)
        return ad.sigmoid(off + ad.inverse_sigmoid(kp_refs))

    def visibility(self, kp_embeddings):
        n, k, d = kp_embeddings.shape
        return ad.sigmoid(self.vis(kp_embeddings.reshape(n * k, d))).reshape(n, k)


class PredictionHeads:
    def __init__(self, store, cfg, rng):
        self.cfg = cfg
        self.keypoint = KeypointHead(store, cfg, rng)
        # start confidence near 0.1 so early focal loss is well conditioned
        self.classifier = Linear(store, "heads.class", cfg.D, 1, rng,
                                 bias_init=math.log(0.1 / 0.9))
        self.box = MLP(store, "heads.box", (cfg.D, cfg.D, 4), rng)
        self.filters = Linear(store, "heads.mask_filters", cfg.D, cfg.filter_length, rng,
                              w_scale=1e-2)

    def __call__(self, groups):
        n, nodes, d = groups.embeddings.shape
        instance = groups.embeddings[:, 0, :]
        kp_embeddings = groups.embeddings[:, 1:, :]
        scores = ad.sigmoid(self.classifier(instance)).reshape(n)
        boxes = ad.sigmoid(self.box(instance))
        pose = self.keypoint.refine(kp_embeddings, groups.prev_kp_refs)
        visibility = self.keypoint.visibility(kp_embeddings)
        filters = self.filters(instance)
        return scores, boxes, pose, visibility, filters


def fuse_mask_features(features):
    """Resize every level to stride 8 and add them into one (D, H/8, W/8) map."""
    h8, w8 = features.level_shapes[0]
    fused = features.level_map(0)
    for level in range(1, len(features.level_shapes)):
        fused = fused + resize_bilinear(features.level_map(level), h8, w8)
    return fused


def segment_conditional(filters, features, cfg):
    """Apply each group's dynamic filters as two point-wise convolutions:
    1x1 conv -> relu -> 1x1 conv over the fused stride-8 map. Returns mask
    logits (n, H/8, W/8); sigmoid gives the probabilities."""
    d, dm = cfg.D, cfg.mask_hidden
    expected = cfg.filter_length
    if filters.shape[1] != expected:
        raise ShapeError(f"filter vectors must have length {expected}, got {filters.shape[1]}")
    fused = fuse_mask_features(features)
    h8, w8 = fused.shape[1], fused.shape[2]
    flat = ad.transpose(fused, (1, 2, 0)).reshape(h8 * w8, d)

    logits = []
    for g in range(filters.shape[0]):
        vec = filters[g, :]
        w1 = vec[: d * dm].reshape(d, dm)
        b1 = vec[d * dm: d * dm + dm]
        w2 = vec[d * dm + dm: d * dm + 2 * dm].reshape(dm, 1)
        b2 = vec[d * dm + 2 * dm:]
        hidden = ad.relu(flat @ w1 + b1)
        logits.append((hidden @ w2 + b2).reshape(h8, w8))
    return ad.stack(logits, axis=0)


def upsample_logits(mask_logits, out_h, out_w):
    """Bilinearly upsample (n, h8, w8) mask logits to (n, out_h, out_w)."""
    return resize_bilinear(mask_logits, out_h, out_w)  # groups act as channels
