"""Evaluation: keypoint-similarity AP, PCKh@0.5, overall IoU, mask AP,
plus the post-hoc result-selection strategies used by non-promptable
baselines.

Protocol split: AP-style metrics score every query group as a detection of
the sample's single referred instance; PCKh and overall IoU use exactly one
prediction per sample (the top score, or the strategy-selected candidate).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo
from .annotations import PromptRecord
from .errors import InvalidInputError, ShapeError, UndefinedSimilarityError
from .model.heads import upsample_logits
from .optim import atomic_write_text
from .rle import RleMask, rle_decode, rle_encode

OKS_THRESHOLDS = np.linspace(0.50, 0.95, 10)
RECALL_POINTS = np.arange(101) / 100.0
AREA_SPLIT = 96.0**2  # medium/large boundary on gt area
EAR_INDICES = (3, 4)
SELECTION_STRATEGIES = ("none", "l1", "iou", "intersection")


@dataclass
class EvalProtocol:
    ap_over: str = "all"            # "all" groups or "top" group only
    oks_thresholds: np.ndarray = field(default_factory=lambda: OKS_THRESHOLDS.copy())
    pckh_threshold: float = 0.5
    selection: str | None = None    # None, or one of SELECTION_STRATEGIES
    tau: float = 0.3

    def __post_init__(self):
        t = np.asarray(self.oks_thresholds, dtype=np.float64)
        if len(t) == 0 or (np.diff(t) <= 0).any():
            raise InvalidInputError("thresholds must be strictly increasing")
        self.oks_thresholds = t
        if self.ap_over not in ("all", "top"):
            raise InvalidInputError(f"ap_over must be 'all' or 'top', got {self.ap_over}")
        if self.selection is not None and self.selection not in SELECTION_STRATEGIES:
            raise InvalidInputError(f"unknown selection strategy '{self.selection}'")
        if not 0.0 < self.tau < 1.0:
            raise InvalidInputError(f"tau must be in (0, 1), got {self.tau}")


@dataclass
class GroupPrediction:
    score: float
    pose_px: np.ndarray        # (k, 2)
    visibility: np.ndarray     # (k,)
    box_xywh_px: np.ndarray    # (4,)
    mask: np.ndarray | None    # (H, W) bool


@dataclass
class EvalSample:
    sample_id: int
    gt_pose_px: np.ndarray
    gt_vis: np.ndarray
    gt_area: float
    gt_box_xywh_px: np.ndarray
    gt_mask: np.ndarray
    head_size: float
    predictions: list[GroupPrediction]


@dataclass
class EvalReport:
    pose_ap: float
    pose_ap50: float
    pose_ap75: float
    pose_ap_m: float | None
    pose_ap_l: float | None
    pckh05: float
    oiou: float
    mask_ap: float
    samples: int
    skipped: int

    _FIELDS = ("pose_ap", "pose_ap50", "pose_ap75", "pose_ap_m", "pose_ap_l",
               "pckh05", "oiou", "mask_ap")

    def to_json(self):
        out = {name: getattr(self, name) for name in self._FIELDS}
        out["samples"] = self.samples
        out["skipped"] = self.skipped
        return out

    def to_text(self):
        labels = {
            "pose_ap": "Pose AP", "pose_ap50": "Pose AP50", "pose_ap75": "Pose AP75",
            "pose_ap_m": "Pose AP (M)", "pose_ap_l": "Pose AP (L)",
            "pckh05": "PCKh@0.5", "oiou": "oIoU", "mask_ap": "Mask AP",
        }
        lines = []
        for name in self._FIELDS:
            value = getattr(self, name)
            shown = "-" if value is None else f"{value:.1f}"
            lines.append(f"{labels[name]:<12} {shown:>7}")
        lines.append(f"{'samples':<12} {self.samples:>7}")
        lines.append(f"{'skipped':<12} {self.skipped:>7}")
        return "\n".join(lines) + "\n"


# -- similarity primitives ------------------------------------------------------

def head_size_for(gt_pose_px, gt_vis, gt_box_xywh):
    """1.5x the ear-to-ear distance when both ears are visible (17-joint
    layout); otherwise 0.35x the box diagonal."""
    pose = np.asarray(gt_pose_px)
    vis = np.asarray(gt_vis)
    if len(pose) == 17 and vis[EAR_INDICES[0]] > 0 and vis[EAR_INDICES[1]] > 0:
        d = np.linalg.norm(pose[EAR_INDICES[0]] - pose[EAR_INDICES[1]])
        if d > 0:
            return 1.5 * d
    w, h = gt_box_xywh[2], gt_box_xywh[3]
    return 0.35 * float(np.hypot(w, h))


def pckh05(pred_pose_px, gt_pose_px, gt_vis, head_size, threshold=0.5):
    """Percentage of visible keypoints within threshold x head_size
    (boundary inclusive)."""
    if head_size <= 0:
        raise InvalidInputError(f"head_size must be positive, got {head_size}")
    vis = np.asarray(gt_vis) > 0
    if not vis.any():
        raise UndefinedSimilarityError("no visible keypoints for PCKh")
    d = np.linalg.norm(np.asarray(pred_pose_px) - np.asarray(gt_pose_px), axis=1)
    correct = (d <= threshold * head_size) & vis
    return 100.0 * correct.sum() / vis.sum()


def mask_iou(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    a = a > 0
    b = b > 0
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def oiou(pred_masks, gt_masks):
    """Overall IoU: sum of intersections over sum of unions across the set
    (not the mean of per-sample IoUs). Returns a percentage."""
    inter = 0
    union = 0
    for pred, gt in zip(pred_masks, gt_masks):
        if pred.shape != gt.shape:
            raise ShapeError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
        pred = pred > 0
        gt = gt > 0
        inter += np.logical_and(pred, gt).sum()
        union += np.logical_or(pred, gt).sum()
    if union == 0:
        return 100.0
    return 100.0 * inter / union


def box_iou_xywh(a, b):
    ax0, ay0, aw, ah = a
    bx0, by0, bw, bh = b
    iw = max(0.0, min(ax0 + aw, bx0 + bw) - max(ax0, bx0))
    ih = max(0.0, min(ay0 + ah, by0 + bh) - max(ay0, by0))
    inter = iw * ih
    union = aw * ah + bw * bh - inter
    return inter / union if union > 0 else 0.0


def box_intersection_xywh(a, b):
    iw = max(0.0, min(a[0] + a[2], b[0] + b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[1] + a[3], b[1] + b[3]) - max(a[1], b[1]))
    return iw * ih


# -- average precision ------------------------------------------------------------

def average_precision(entries, thresholds):
    """COCO-style AP for single-ground-truth samples.

    ``entries``: per sample, (scores, similarities) arrays over its scored
    predictions. Per threshold, the best-scored prediction whose similarity
    clears the threshold is the sample's true positive; global ranking then
    yields the 101-point interpolated precision-recall integral, averaged
    over thresholds.
    """
    n_gt = len(entries)
    if n_gt == 0:
        return float("nan")
    per_threshold = []
    for t in thresholds:
        scores = []
        matches = []
        for s, sims in entries:
            if len(s) == 0:
                continue
            order = np.argsort(-s, kind="stable")
            m = np.zeros(len(s), dtype=bool)
            for i in order:
                if sims[i] >= t:
                    m[i] = True
                    break
            scores.append(s)
            matches.append(m)
        if not scores:
            per_threshold.append(0.0)
            continue
        scores = np.concatenate(scores)
        matches = np.concatenate(matches)
        order = np.argsort(-scores, kind="stable")
        tp = np.cumsum(matches[order])
        fp = np.cumsum(~matches[order])
        recall = tp / n_gt
        precision = tp / np.maximum(tp + fp, 1)
        for i in range(len(precision) - 1, 0, -1):
            precision[i - 1] = max(precision[i - 1], precision[i])
        idx = np.searchsorted(recall, RECALL_POINTS, side="left")
        interp = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
        per_threshold.append(float(interp.mean()))
    return 100.0 * float(np.mean(per_threshold))


def _oks_entries(samples, top_only):
    entries = []
    for sample in samples:
        preds = sample.predictions
        if top_only and preds:
            preds = [preds[int(np.argmax([p.score for p in preds]))]]
        scores = np.array([p.score for p in preds])
        gt_pose = geo.Pose(sample.gt_pose_px, sample.gt_vis)
        sims = np.array([
            geo.oks(geo.Pose(p.pose_px), gt_pose, sample.gt_area)
            for p in preds
        ])
        entries.append((scores, sims))
    return entries


def _mask_entries(samples, top_only):
    entries = []
    for sample in samples:
        preds = sample.predictions
        if top_only and preds:
            preds = [preds[int(np.argmax([p.score for p in preds]))]]
        scores = np.array([p.score for p in preds])
        sims = np.array([
            mask_iou(p.mask, sample.gt_mask) if p.mask is not None else 0.0
            for p in preds
        ])
        entries.append((scores, sims))
    return entries


def compute_oks_ap(samples, protocol):
    """Pose AP dict (ap, ap50, ap75, ap_m, ap_l); skips zero-visible GTs."""
    usable = [s for s in samples if (np.asarray(s.gt_vis) > 0).any()]
    top_only = protocol.ap_over == "top"
    thresholds = protocol.oks_thresholds
    entries = _oks_entries(usable, top_only)
    medium = [i for i, s in enumerate(usable) if s.gt_area < AREA_SPLIT]
    large = [i for i, s in enumerate(usable) if s.gt_area >= AREA_SPLIT]
    return {
        "ap": average_precision(entries, thresholds),
        "ap50": average_precision(entries, [0.5]),
        "ap75": average_precision(entries, [0.75]),
        "ap_m": average_precision([entries[i] for i in medium], thresholds) if medium else None,
        "ap_l": average_precision([entries[i] for i in large], thresholds) if large else None,
        "skipped": len(samples) - len(usable),
    }


def compute_mask_ap(samples, protocol):
    entries = _mask_entries(samples, protocol.ap_over == "top")
    return average_precision(entries, protocol.oks_thresholds)


# -- result selection ----------------------------------------------------------------

def select_result(candidates, target_box_xywh, strategy, tau=0.3):
    """Pick one candidate index per strategy, or None on an empty filter.

    none: global max score. l1: nearest box center. iou: max score among
    candidates with box IoU >= tau. intersection: max score among candidates
    covering at least tau of the target box area.
    """
    if not candidates:
        raise InvalidInputError("select_result needs at least one candidate")
    scores = np.array([c.score for c in candidates])
    if strategy == "none":
        return int(np.argmax(scores))
    if strategy == "l1":
        target = np.array([target_box_xywh[0] + target_box_xywh[2] / 2.0,
                           target_box_xywh[1] + target_box_xywh[3] / 2.0])
        centers = np.array([[c.box_xywh_px[0] + c.box_xywh_px[2] / 2.0,
                             c.box_xywh_px[1] + c.box_xywh_px[3] / 2.0] for c in candidates])
        return int(np.argmin(np.abs(centers - target).sum(axis=1)))
    if strategy == "iou":
        keep = [i for i, c in enumerate(candidates)
                if box_iou_xywh(c.box_xywh_px, target_box_xywh) >= tau]
    elif strategy == "intersection":
        area = target_box_xywh[2] * target_box_xywh[3]
        keep = [i for i, c in enumerate(candidates)
                if box_intersection_xywh(c.box_xywh_px, target_box_xywh) >= tau * area]
    else:
        raise InvalidInputError(f"unknown selection strategy '{strategy}'")
    if not keep:
        return None
    return keep[int(np.argmax(scores[keep]))]


# -- dataset-level evaluation -----------------------------------------------------------

def predictions_from_model(net, image, prompt):
    """All query groups of one forward pass as GroupPredictions."""
    from . import autodiff as ad

    with ad.no_grad():
        preds, fused, _ = net.forward(image, prompt)
        h, w = fused.image_hw
        logits = upsample_logits(preds.mask_logits, h, w).data
    masks = logits >= 0.0  # sigmoid(0) = 0.5 decision boundary
    out = []
    for g in range(preds.num_groups):
        box = preds.boxes.data[g] * np.array([w, h, w, h])
        out.append(GroupPrediction(
            score=float(preds.scores.data[g]),
            pose_px=preds.pose.data[g] * np.array([w, h]),
            visibility=preds.visibility.data[g].copy(),
            box_xywh_px=np.array([box[0] - box[2] / 2, box[1] - box[3] / 2, box[2], box[3]]),
            mask=masks[g],
        ))
    return out


def eval_samples_from_dataset(dataset, predictions_by_sample):
    """Assemble EvalSamples; every dataset sample must have predictions."""
    samples = dataset.samples()
    if not samples:
        raise InvalidInputError("evaluation needs at least one image-prompt sample")
    missing = [s.index for s in samples if not predictions_by_sample.get(s.index)]
    if missing:
        raise InvalidInputError(f"missing predictions for sample ids {missing[:10]}")
    out = []
    for s in samples:
        ann = s.annotation
        pose = ann.keypoints[:, :2]
        vis = (ann.keypoints[:, 2] > 0).astype(float)
        out.append(EvalSample(
            sample_id=s.index,
            gt_pose_px=pose,
            gt_vis=vis,
            gt_area=float(ann.area),
            gt_box_xywh_px=np.asarray(ann.bbox, dtype=float),
            gt_mask=rle_decode(ann.mask),
            head_size=head_size_for(pose, vis, ann.bbox),
            predictions=predictions_by_sample[s.index],
        ))
    return out


def evaluate_samples(samples, protocol):
    """Aggregate every metric over assembled EvalSamples."""
    pose = compute_oks_ap(samples, protocol)
    mask_ap = compute_mask_ap(samples, protocol)

    pck_values = []
    pred_masks = []
    gt_masks = []
    strategy = protocol.selection
    for sample in samples:
        if strategy is None:
            idx = int(np.argmax([p.score for p in sample.predictions]))
        else:
            idx = select_result(sample.predictions, sample.gt_box_xywh_px,
                                strategy, protocol.tau)
        if idx is None:
            chosen = None
        else:
            chosen = sample.predictions[idx]
        gt_masks.append(sample.gt_mask)
        if chosen is None:
            pred_masks.append(np.zeros_like(sample.gt_mask))
            pck_values.append(0.0)
            continue
        pred_masks.append(chosen.mask if chosen.mask is not None
                          else np.zeros_like(sample.gt_mask))
        if (sample.gt_vis > 0).any():
            pck_values.append(pckh05(chosen.pose_px, sample.gt_pose_px, sample.gt_vis,
                                     sample.head_size, protocol.pckh_threshold))

    return EvalReport(
        pose_ap=pose["ap"],
        pose_ap50=pose["ap50"],
        pose_ap75=pose["ap75"],
        pose_ap_m=pose["ap_m"],
        pose_ap_l=pose["ap_l"],
        pckh05=float(np.mean(pck_values)) if pck_values else 0.0,
        oiou=oiou(pred_masks, gt_masks),
        mask_ap=mask_ap,
        samples=len(samples),
        skipped=pose["skipped"],
    )


def evaluate_dataset(net, dataset, protocol, workers=1):
    """Run inference per image-prompt sample and aggregate all metrics."""
    samples = dataset.samples()
    if not samples:
        raise InvalidInputError("evaluation needs at least one image-prompt sample")
    predictions = {}
    if workers > 1:
        import multiprocessing as mp

        global _POOL_CTX
        _POOL_CTX = (net, dataset)
        with mp.get_context("fork").Pool(workers) as pool:
            results = pool.map(_infer_one, [s.index for s in samples])
        _POOL_CTX = None
        for idx, preds in results:
            predictions[idx] = preds
    else:
        for s in samples:
            image = dataset.load_image(s.image)
            predictions[s.index] = predictions_from_model(net, image, s.prompt)
    eval_samples = eval_samples_from_dataset(dataset, predictions)
    return evaluate_samples(eval_samples, protocol)


_POOL_CTX = None


def _infer_one(index):
    net, dataset = _POOL_CTX
    sample = dataset.samples()[index]
    image = dataset.load_image(sample.image)
    return index, predictions_from_model(net, image, sample.prompt)


# -- prediction files --------------------------------------------------------------------

def write_predictions(path, predictions_by_sample):
    """JSON-lines, one record per sample per group."""
    lines = []
    for sample_id in sorted(predictions_by_sample):
        for g, p in enumerate(predictions_by_sample[sample_id]):
            kp = np.concatenate([p.pose_px, p.visibility.reshape(-1, 1)], axis=1)
            rec = {
                "sample_id": sample_id,
                "group": g,
                "score": float(p.score),
                "keypoints": [float(v) for v in kp.reshape(-1)],
                "box": [float(v) for v in p.box_xywh_px],
                "rle": rle_encode(p.mask.astype(np.uint8)).to_json() if p.mask is not None else None,
            }
            lines.append(json.dumps(rec, sort_keys=True))
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_predictions(path):
    predictions = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            kp = np.asarray(rec["keypoints"], dtype=float).reshape(-1, 3)
            mask = rle_decode(RleMask.from_json(rec["rle"])) if rec.get("rle") else None
            predictions.setdefault(int(rec["sample_id"]), []).append(GroupPrediction(
                score=float(rec["score"]),
                pose_px=kp[:, :2],
                visibility=kp[:, 2],
                box_xywh_px=np.asarray(rec["box"], dtype=float),
                mask=mask,
            ))
    return predictions


def predictions_from_ground_truth(dataset):
    """Oracle predictions (the GT itself), for evaluator self-checks."""
    out = {}
    for s in dataset.samples():
        ann = s.annotation
        out[s.index] = [GroupPrediction(
            score=1.0,
            pose_px=ann.keypoints[:, :2].copy(),
            visibility=(ann.keypoints[:, 2] > 0).astype(float),
            box_xywh_px=np.asarray(ann.bbox, dtype=float),
            mask=rle_decode(ann.mask).astype(bool),
        )]
    return out
