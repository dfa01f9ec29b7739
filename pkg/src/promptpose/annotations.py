"""Annotation document schema: parsing, validation, canonical serialization.

A dataset is one JSON document:

    {
      "images":      [{"id", "width", "height", "file"}],
      "annotations": [{"id", "image_id", "keypoints": [x,y,v]*k,
                       "rle": {"h", "w", "runs"}, "bbox": [x,y,w,h], "area"}],
      "prompts":     [{"ann_id", "kind": "text"|"scribble"|"point",
                       "text"? | "points"?}]
    }

Masks are uncompressed integer-run RLE; images are stored as tensor
container files referenced by ``file`` relative to the document. Every
image-prompt pair is one evaluation sample.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo
from .errors import IntegrityError, ParseError
from .optim import atomic_write_text, load_tensors
from .rle import RleMask, rle_decode

log = logging.getLogger(__name__)

PROMPT_KINDS = ("text", "scribble", "point")
BBOX_KEYPOINT_TOL = 2.0  # px slack when checking that boxes enclose keypoints


@dataclass
class ImageInfo:
    id: int
    width: int
    height: int
    file: str


@dataclass
class PersonAnnotation:
    id: int
    image_id: int
    keypoints: np.ndarray  # (k, 3) columns x, y, v
    mask: RleMask
    bbox: np.ndarray  # pixel (x, y, w, h)
    area: float

    @property
    def k(self):
        return len(self.keypoints)

    def visible(self):
        return self.keypoints[:, 2] > 0

    def pose(self, image_w, image_h):
        kp = self.keypoints[:, :2] / np.array([image_w, image_h])
        return geo.Pose(kp, (self.keypoints[:, 2] > 0).astype(float))


@dataclass
class PromptRecord:
    ann_id: int
    kind: str
    text: str | None = None
    points: np.ndarray | None = None  # (12, 2) scribble or (1, 2) point, pixels


@dataclass
class Sample:
    """One image-prompt pair."""

    index: int
    image: ImageInfo
    annotation: PersonAnnotation
    prompt: PromptRecord


@dataclass
class Dataset:
    images: dict[int, ImageInfo]
    annotations: dict[int, PersonAnnotation]
    prompts: list[PromptRecord]
    base_dir: str = "."
    _image_cache: dict = field(default_factory=dict, repr=False)

    def samples(self):
        out = []
        for i, prompt in enumerate(self.prompts):
            ann = self.annotations[prompt.ann_id]
            out.append(Sample(i, self.images[ann.image_id], ann, prompt))
        return out

    def instances(self):
        """Annotations each paired with their prompt records grouped by kind."""
        grouped = {ann_id: {k: [] for k in PROMPT_KINDS} for ann_id in self.annotations}
        for prompt in self.prompts:
            grouped[prompt.ann_id][prompt.kind].append(prompt)
        return [(self.annotations[a], grouped[a]) for a in self.annotations]

    def load_image(self, image):
        if image.id not in self._image_cache:
            arrays = load_tensors(os.path.join(self.base_dir, image.file))
            arr = arrays["image"]
            if arr.shape != (3, image.height, image.width):
                raise ParseError(
                    f"images[id={image.id}]",
                    f"tensor file has shape {arr.shape}, expected (3, {image.height}, {image.width})",
                )
            self._image_cache[image.id] = arr
        return self._image_cache[image.id]


def _require(obj, key, path, types=None):
    if key not in obj:
        raise ParseError(path, f"missing key '{key}'")
    val = obj[key]
    if types is not None and not isinstance(val, types):
        raise ParseError(f"{path}.{key}", f"expected {types}, got {type(val).__name__}")
    return val


def parse_annotations(path):
    """Parse and validate a dataset document; raises on the first violation."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError("$", f"not valid JSON: {exc}") from exc
    return parse_document(doc, base_dir=os.path.dirname(os.fspath(path)) or ".")


def parse_document(doc, base_dir="."):
    if not isinstance(doc, dict):
        raise ParseError("$", "document root must be an object")
    images = {}
    for i, rec in enumerate(_require(doc, "images", "$", list)):
        path = f"images[{i}]"
        img = ImageInfo(
            id=int(_require(rec, "id", path, (int,))),
            width=int(_require(rec, "width", path, (int,))),
            height=int(_require(rec, "height", path, (int,))),
            file=str(_require(rec, "file", path, (str,))),
        )
        if img.width <= 0 or img.height <= 0:
            raise ParseError(path, "image extents must be positive")
        if img.id in images:
            raise ParseError(path, f"duplicate image id {img.id}")
        images[img.id] = img

    annotations = {}
    for i, rec in enumerate(_require(doc, "annotations", "$", list)):
        path = f"annotations[{i}]"
        ann_id = int(_require(rec, "id", path, (int,)))
        image_id = int(_require(rec, "image_id", path, (int,)))
        if image_id not in images:
            raise IntegrityError(path, f"image_id {image_id} does not exist")
        if ann_id in annotations:
            raise ParseError(path, f"duplicate annotation id {ann_id}")
        img = images[image_id]

        flat = _require(rec, "keypoints", path, list)
        if len(flat) == 0 or len(flat) % 3 != 0:
            raise ParseError(f"{path}.keypoints", f"length {len(flat)} is not a positive multiple of 3")
        kp = np.asarray(flat, dtype=np.float64).reshape(-1, 3)
        if not np.isin(kp[:, 2], (0.0, 1.0, 2.0)).all():
            raise ParseError(f"{path}.keypoints", "visibility flags must be 0, 1 or 2")

        rle_obj = _require(rec, "rle", path, dict)
        try:
            mask = RleMask.from_json({
                "h": _require(rle_obj, "h", f"{path}.rle", (int,)),
                "w": _require(rle_obj, "w", f"{path}.rle", (int,)),
                "runs": _require(rle_obj, "runs", f"{path}.rle", list),
            })
        except Exception as exc:
            raise ParseError(f"{path}.rle", str(exc)) from exc
        if mask.height != img.height or mask.width != img.width:
            raise ParseError(f"{path}.rle", f"mask is {mask.height}x{mask.width}, image is {img.height}x{img.width}")
        if sum(mask.runs) != mask.height * mask.width:
            raise ParseError(f"{path}.rle", f"run sum {sum(mask.runs)} != {mask.height * mask.width}")

        bbox = _require(rec, "bbox", path, list)
        if len(bbox) != 4:
            raise ParseError(f"{path}.bbox", f"expected 4 values, got {len(bbox)}")
        bbox = np.asarray(bbox, dtype=np.float64)
        if bbox[2] <= 0 or bbox[3] <= 0:
            raise ParseError(f"{path}.bbox", "box extents must be positive")
        vis = kp[:, 2] > 0
        if vis.any():
            x0, y0 = bbox[0] - BBOX_KEYPOINT_TOL, bbox[1] - BBOX_KEYPOINT_TOL
            x1, y1 = bbox[0] + bbox[2] + BBOX_KEYPOINT_TOL, bbox[1] + bbox[3] + BBOX_KEYPOINT_TOL
            inside = ((kp[vis, 0] >= x0) & (kp[vis, 0] <= x1) &
                      (kp[vis, 1] >= y0) & (kp[vis, 1] <= y1))
            if not inside.all():
                raise ParseError(f"{path}.bbox", "box does not enclose all visible keypoints")

        area = float(_require(rec, "area", path, (int, float)))
        annotations[ann_id] = PersonAnnotation(ann_id, image_id, kp, mask, bbox, area)

    prompts = []
    for i, rec in enumerate(doc.get("prompts", [])):
        path = f"prompts[{i}]"
        ann_id = int(_require(rec, "ann_id", path, (int,)))
        if ann_id not in annotations:
            raise IntegrityError(path, f"ann_id {ann_id} does not exist")
        kind = _require(rec, "kind", path, (str,))
        if kind not in PROMPT_KINDS:
            raise ParseError(f"{path}.kind", f"unknown prompt kind '{kind}'")
        img = images[annotations[ann_id].image_id]
        if kind == "text":
            text = _require(rec, "text", path, (str,))
            if not text.strip():
                raise ParseError(f"{path}.text", "text prompt must be nonempty")
            prompts.append(PromptRecord(ann_id, kind, text=text))
        else:
            pts = np.asarray(_require(rec, "points", path, list), dtype=np.float64)
            expected = geo.SCRIBBLE_POINTS if kind == "scribble" else 1
            if pts.shape != (expected, 2):
                raise ParseError(f"{path}.points", f"{kind} prompt needs shape ({expected}, 2), got {pts.shape}")
            if (pts[:, 0] < 0).any() or (pts[:, 0] > img.width).any() or \
               (pts[:, 1] < 0).any() or (pts[:, 1] > img.height).any():
                raise ParseError(f"{path}.points", "prompt coordinates fall outside the image")
            prompts.append(PromptRecord(ann_id, kind, points=pts))

    return Dataset(images, annotations, prompts, base_dir=base_dir)


def document_from(dataset):
    """Canonical plain-JSON form of a dataset (stable ordering)."""
    return {
        "images": [
            {"id": im.id, "width": im.width, "height": im.height, "file": im.file}
            for im in sorted(dataset.images.values(), key=lambda im: im.id)
        ],
        "annotations": [
            {
                "id": a.id,
                "image_id": a.image_id,
                "keypoints": [float(v) for v in a.keypoints.reshape(-1)],
                "rle": a.mask.to_json(),
                "bbox": [float(v) for v in a.bbox],
                "area": float(a.area),
            }
            for a in sorted(dataset.annotations.values(), key=lambda a: a.id)
        ],
        "prompts": [
            (
                {"ann_id": p.ann_id, "kind": p.kind, "text": p.text}
                if p.kind == "text"
                else {"ann_id": p.ann_id, "kind": p.kind,
                      "points": [[float(x), float(y)] for x, y in p.points]}
            )
            for p in dataset.prompts
        ],
    }


def write_annotations(dataset, path):
    atomic_write_text(path, json.dumps(document_from(dataset), sort_keys=True, indent=1) + "\n")


def generate_prompt_annotations(dataset, per_instance, rng):
    """Synthesize positional prompts: ``per_instance`` scribbles per person,
    plus one point drawn from each scribble. Persons with an empty mask are
    skipped with a warning."""
    records = []
    for ann in sorted(dataset.annotations.values(), key=lambda a: a.id):
        mask = rle_decode(ann.mask)
        if not mask.any():
            log.warning("annotation %d has an empty mask; skipping prompt synthesis", ann.id)
            continue
        for _ in range(per_instance):
            scribble = geo.synth_scribble(mask, rng)
            point = geo.sample_point(scribble, rng)
            records.append(PromptRecord(ann.id, "scribble", points=scribble.points.copy()))
            records.append(PromptRecord(ann.id, "point", points=point.reshape(1, 2)))
    return records
