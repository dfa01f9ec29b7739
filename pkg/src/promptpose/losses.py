"""Composite training loss: box (L1 + box-overlap), classification (focal),
pose (L1 + soft keypoint-similarity + visibility CE), mask (dice + focal).

The query group to supervise is the one with the smallest matching cost
against the single referred instance (box + pose + class terms; mask terms
stay out of the cost to keep matching cheap). The class focal loss covers
all groups, label one on the matched group and zero elsewhere. The total is
the fixed-order weighted sum of the eight components.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import geometry as geo
from .errors import ConfigError, ShapeError, UndefinedSimilarityError
from .model.heads import upsample_logits
from .rle import rle_decode

_EPS = 1e-12

COMPONENTS = ("box_l1", "box_giou", "class_focal", "pose_l1",
              "pose_oks", "pose_ce", "mask_dice", "mask_focal")


@dataclass
class LossConfig:
    box_l1: float = 5.0
    box_giou: float = 2.0
    class_focal: float = 2.0
    pose_l1: float = 10.0
    pose_oks: float = 4.0
    pose_ce: float = 4.0
    mask_dice: float = 5.0
    mask_focal: float = 2.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0

    def __post_init__(self):
        for name in COMPONENTS:
            if getattr(self, name) <= 0:
                raise ConfigError(f"loss coefficient {name} must be positive")

    def coefficient(self, name):
        return getattr(self, name)

    def weighted_total(self, components):
        """Recombine unweighted component values; same order as total_loss."""
        total = 0.0
        for name in COMPONENTS:
            total = total + self.coefficient(name) * components[name]
        return total

    @staticmethod
    def from_json(obj):
        return replace(LossConfig(), **obj)


def focal_terms(p, labels, alpha=0.25, gamma=2.0):
    """Elementwise focal loss on probabilities (labels are 0/1 constants)."""
    p = ad.clip(p, _EPS, 1.0 - _EPS)
    labels = np.asarray(labels, dtype=np.float64)
    pos = -alpha * ad.pow_const(1.0 - p, gamma) * ad.log(p)
    neg = -(1.0 - alpha) * ad.pow_const(p, gamma) * ad.log(1.0 - p)
    return pos * labels + neg * (1.0 - labels)


def focal_loss(p, labels, alpha=0.25, gamma=2.0):
    return focal_terms(p, labels, alpha, gamma).mean()


def binary_cross_entropy(p, labels):
    p = ad.clip(p, _EPS, 1.0 - _EPS)
    labels = np.asarray(labels, dtype=np.float64)
    return (-(ad.log(p) * labels + ad.log(1.0 - p) * (1.0 - labels))).mean()


def dice_loss(pred, gt, eps=1.0):
    """1 - (2 sum(p*g) + eps) / (sum(p) + sum(g) + eps) over all elements."""
    gt = np.asarray(gt, dtype=np.float64)
    if tuple(pred.shape) != gt.shape:
        raise ShapeError(f"dice loss shapes differ: {tuple(pred.shape)} vs {gt.shape}")
    inter = (pred * gt).sum()
    denom = pred.sum() + float(gt.sum())
    return 1.0 - (2.0 * inter + eps) / (denom + eps)


def soft_oks(pred_pose, gt_kp_px, gt_vis, gt_area, image_wh, kappas):
    """Differentiable keypoint similarity of normalized predictions against
    pixel ground truth, averaged over visible joints."""
    visible = np.asarray(gt_vis) > 0
    if not visible.any():
        raise UndefinedSimilarityError("no visible ground-truth keypoints")
    w, h = image_wh
    pred_px = pred_pose * ad.Tensor(np.array([[float(w), float(h)]]))
    delta = pred_px - np.asarray(gt_kp_px, dtype=np.float64)
    d2 = (delta * delta).sum(axis=1)
    scale = 1.0 / (2.0 * float(gt_area) * np.asarray(kappas, dtype=np.float64) ** 2)
    sim = ad.exp(-(d2 * scale))
    return _masked_mean(sim, visible)


def _masked_mean(values, mask):
    idx = np.flatnonzero(mask)
    return ad.gather_rows(values, idx).mean()


def giou_value(pred_box, gt_box):
    """Taped generalized overlap of a predicted cxcywh box against a
    constant ground-truth cxcywh box (both normalized)."""
    gt = np.asarray(gt_box, dtype=np.float64)
    gx0, gy0 = gt[0] - gt[2] / 2.0, gt[1] - gt[3] / 2.0
    gx1, gy1 = gt[0] + gt[2] / 2.0, gt[1] + gt[3] / 2.0
    garea = gt[2] * gt[3]

    px0 = pred_box[0:1] - pred_box[2:3] * 0.5
    px1 = pred_box[0:1] + pred_box[2:3] * 0.5
    py0 = pred_box[1:2] - pred_box[3:4] * 0.5
    py1 = pred_box[1:2] + pred_box[3:4] * 0.5
    parea = pred_box[2:3] * pred_box[3:4]

    iw = ad.relu(ad.minimum(px1, gx1) - ad.maximum(px0, gx0))
    ih = ad.relu(ad.minimum(py1, gy1) - ad.maximum(py0, gy0))
    inter = iw * ih
    union = parea + garea - inter
    hull = (ad.maximum(px1, gx1) - ad.minimum(px0, gx0)) * (ad.maximum(py1, gy1) - ad.minimum(py0, gy0))
    return (inter / union - (hull - union) / hull).reshape(())


def box_l1(pred_box, gt_box):
    return ad.absolute(pred_box - np.asarray(gt_box, dtype=np.float64)).mean()


def pose_l1(pred_pose, gt_pose_norm, gt_vis):
    """Mean absolute coordinate error over visible keypoints (normalized)."""
    visible = np.asarray(gt_vis) > 0
    diff = ad.absolute(pred_pose - np.asarray(gt_pose_norm, dtype=np.float64))
    return _masked_mean(diff.mean(axis=1), visible)


def pose_loss(pred_pose, pred_vis, gt, cfg):
    """Weighted pose term: coefficient-scaled L1 + (1 - soft similarity) +
    visibility cross entropy. ``gt`` is a GroundTruth."""
    l1 = pose_l1(pred_pose, gt.kp_norm, gt.vis)
    sim = soft_oks(pred_pose, gt.kp_px, gt.vis, gt.area, gt.image_wh, gt.kappas)
    ce = binary_cross_entropy(pred_vis, gt.vis)
    return cfg.pose_l1 * l1 + cfg.pose_oks * (1.0 - sim) + cfg.pose_ce * ce


@dataclass
class GroundTruth:
    """Loss-ready view of one referred instance."""

    box_norm: np.ndarray   # cxcywh normalized
    kp_px: np.ndarray      # (k, 2) pixels
    kp_norm: np.ndarray    # (k, 2) normalized
    vis: np.ndarray        # (k,) 0/1
    area: float
    mask: np.ndarray       # (H, W) binary
    image_wh: tuple[int, int]
    kappas: np.ndarray = field(default=None)

    @staticmethod
    def from_annotation(ann, image_w, image_h):
        kp = ann.keypoints[:, :2]
        vis = (ann.keypoints[:, 2] > 0).astype(np.float64)
        if not vis.any():
            raise UndefinedSimilarityError(f"annotation {ann.id} has no visible keypoints")
        x, y, w, h = ann.bbox
        box_norm = np.array([(x + w / 2) / image_w, (y + h / 2) / image_h,
                             w / image_w, h / image_h])
        return GroundTruth(
            box_norm=box_norm,
            kp_px=kp.copy(),
            kp_norm=kp / np.array([image_w, image_h]),
            vis=vis,
            area=float(ann.area),
            mask=rle_decode(ann.mask),
            image_wh=(image_w, image_h),
            kappas=geo.kappas_for(len(kp)),
        )


def matching_costs(preds, gt, cfg):
    """Per-group matching cost (box + pose + class terms), plain numpy."""
    n = preds.num_groups
    scores = preds.scores.data
    boxes = preds.boxes.data
    poses = preds.pose.data
    visible = gt.vis > 0
    alpha, gamma = cfg.focal_alpha, cfg.focal_gamma

    costs = np.empty(n)
    gt_box = geo.BBox(*gt.box_norm)
    gt_pose = geo.Pose(gt.kp_norm, gt.vis)
    for g in range(n):
        b = np.clip(boxes[g], 1e-6, None)
        cost = cfg.box_l1 * np.abs(boxes[g] - gt.box_norm).mean()
        cost += cfg.box_giou * (1.0 - geo.giou(geo.BBox(*b), gt_box))
        cost += cfg.pose_l1 * np.abs(poses[g] - gt.kp_norm)[visible].mean()
        pose_px = geo.Pose(poses[g] * np.array(gt.image_wh), np.ones(len(gt.vis)))
        cost += cfg.pose_oks * (1.0 - geo.oks(pose_px, geo.Pose(gt.kp_px, gt.vis), gt.area, gt.kappas))
        p = min(max(scores[g], _EPS), 1.0 - _EPS)
        cost += cfg.class_focal * (-alpha * (1.0 - p) ** gamma * np.log(p))
        costs[g] = cost
    return costs


def total_loss(preds, gt, cfg, fixed_group=None):
    """Composite loss against a single ground truth.

    Returns (total tensor, components dict of floats, matched group index).
    ``fixed_group`` bypasses matching (used by finite-difference checks to
    keep the discrete assignment constant under perturbation).
    """
    costs = matching_costs(preds, gt, cfg)
    matched = int(np.argmin(costs)) if fixed_group is None else int(fixed_group)

    h, w = gt.mask.shape
    labels = np.zeros(preds.num_groups)
    labels[matched] = 1.0

    mask_logits = upsample_logits(preds.mask_logits[matched:matched + 1, :, :], h, w)
    mask_probs = ad.sigmoid(mask_logits.reshape(h, w))

    terms = {
        "box_l1": box_l1(preds.boxes[matched, :], gt.box_norm),
        "box_giou": 1.0 - giou_value(preds.boxes[matched, :], gt.box_norm),
        "class_focal": focal_loss(preds.scores, labels, cfg.focal_alpha, cfg.focal_gamma),
        "pose_l1": pose_l1(preds.pose[matched, :, :], gt.kp_norm, gt.vis),
        "pose_oks": 1.0 - soft_oks(preds.pose[matched, :, :], gt.kp_px, gt.vis,
                                   gt.area, gt.image_wh, gt.kappas),
        "pose_ce": binary_cross_entropy(preds.visibility[matched, :], gt.vis),
        "mask_dice": dice_loss(mask_probs, gt.mask),
        "mask_focal": focal_loss(mask_probs, gt.mask, cfg.focal_alpha, cfg.focal_gamma),
    }
    total = None
    for name in COMPONENTS:
        piece = cfg.coefficient(name) * terms[name]
        total = piece if total is None else total + piece
    components = {name: float(terms[name].item()) for name in COMPONENTS}
    return total, components, matched
