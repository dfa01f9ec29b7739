"""Synthetic scene generator: articulated stick figures with exact masks.

Each figure is a union of simple solids (head disc, torso ellipse, capsule
limbs) rasterized onto a noise background, so ground-truth masks, boxes and
keypoint skeletons are exact by construction. Figures carry distinct palette
colors per scene, which the template text prompts reference.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import geometry as geo
from .annotations import Dataset, ImageInfo, PersonAnnotation, PromptRecord
from .errors import GenerationError, InvalidInputError
from .rle import rle_encode

PALETTE = [
    ("red", (0.85, 0.15, 0.15)),
    ("green", (0.15, 0.70, 0.20)),
    ("blue", (0.20, 0.30, 0.85)),
    ("yellow", (0.90, 0.85, 0.10)),
    ("magenta", (0.80, 0.20, 0.80)),
    ("cyan", (0.10, 0.75, 0.80)),
    ("orange", (0.90, 0.55, 0.10)),
    ("white", (0.95, 0.95, 0.95)),
]

MAX_PERSONS = 8
_PLACEMENT_RETRIES = 40


@dataclass
class SceneRecipe:
    num_persons: int = 1
    image_size: int = 64
    overlap: bool = False
    seed: int = 0
    k: int = 17  # joints per person: 17, or the reduced 5-joint profile

    def __post_init__(self):
        if not 1 <= self.num_persons <= MAX_PERSONS:
            raise InvalidInputError(f"num_persons must be 1..{MAX_PERSONS}, got {self.num_persons}")
        if self.image_size < 64:
            raise InvalidInputError(f"image_size must be >= 64, got {self.image_size}")
        if self.k not in (5, 17):
            raise InvalidInputError(f"keypoint profile k must be 5 or 17, got {self.k}")

    @staticmethod
    def from_json(obj):
        return SceneRecipe(
            num_persons=int(obj.get("num_persons", 1)),
            image_size=int(obj.get("image_size", 64)),
            overlap=bool(obj.get("overlap", False)),
            seed=int(obj.get("seed", 0)),
            k=int(obj.get("k", 17)),
        )

    def to_json(self):
        return {"num_persons": self.num_persons, "image_size": self.image_size,
                "overlap": self.overlap, "seed": self.seed, "k": self.k}


@dataclass
class SyntheticScene:
    image: np.ndarray  # (3, H, W), values in [0, 1]
    persons: list[PersonAnnotation]
    prompts: list[PromptRecord]
    colors: list[str]


def _skeleton(cx, cy, h, rng):
    """17 joints of a standing figure of height ``h`` centered at (cx, cy)."""
    def jitter(a, b):
        return rng.uniform(a, b)

    sh_y = -0.22
    hip_y = 0.08
    joints = np.zeros((17, 2))
    joints[0] = (0.0, -0.36)                      # nose
    joints[1] = (-0.035, -0.40)                   # left eye
    joints[2] = (0.035, -0.40)                    # right eye
    joints[3] = (-0.075, -0.38)                   # left ear
    joints[4] = (0.075, -0.38)                    # right ear
    joints[5] = (-0.16, sh_y)                     # left shoulder
    joints[6] = (0.16, sh_y)                      # right shoulder
    for side, sign in ((5, -1.0), (6, 1.0)):
        a1 = jitter(0.15, 0.5) * sign             # upper-arm angle from vertical
        a2 = a1 + jitter(-0.2, 0.3) * sign
        elbow = joints[side] + 0.14 * np.array([np.sin(a1), np.cos(a1)])
        wrist = elbow + 0.14 * np.array([np.sin(a2), np.cos(a2)])
        joints[side + 2] = elbow
        joints[side + 4] = wrist
    joints[11] = (-0.10, hip_y)                   # left hip
    joints[12] = (0.10, hip_y)                    # right hip
    for side, sign in ((11, -1.0), (12, 1.0)):
        a1 = jitter(0.0, 0.18) * sign
        a2 = a1 + jitter(-0.1, 0.1) * sign
        knee = joints[side] + 0.16 * np.array([np.sin(a1), np.cos(a1)])
        ankle = knee + 0.16 * np.array([np.sin(a2), np.cos(a2)])
        joints[side + 2] = knee
        joints[side + 4] = ankle
    return joints * h + np.array([cx, cy])


def _figure_mask(joints, h, size):
    """Rasterize the solid silhouette for a 17-joint skeleton."""
    ys, xs = np.mgrid[0:size, 0:size]
    px = xs + 0.5
    py = ys + 0.5
    mask = np.zeros((size, size), dtype=bool)

    head_c = (joints[1] + joints[2]) / 2.0 + np.array([0.0, 0.015 * h])
    head_r = 0.105 * h
    mask |= (px - head_c[0]) ** 2 + (py - head_c[1]) ** 2 <= head_r**2

    sh_c = (joints[5] + joints[6]) / 2.0
    hip_c = (joints[11] + joints[12]) / 2.0
    torso_c = (sh_c + hip_c) / 2.0
    a = 0.175 * h  # torso half-width
    b = abs(hip_c[1] - sh_c[1]) / 2.0 + 0.07 * h
    mask |= ((px - torso_c[0]) / a) ** 2 + ((py - torso_c[1]) / b) ** 2 <= 1.0

    limb_r = 0.055 * h
    segments = [(5, 7), (7, 9), (6, 8), (8, 10), (11, 13), (13, 15), (12, 14), (14, 16),
                (5, 6), (11, 12)]
    pts = np.stack([px.ravel(), py.ravel()], axis=1)
    flat = mask.ravel()
    for i, j in segments:
        d = geo._segment_distance(pts, joints[i], joints[j])
        flat |= d <= limb_r
    return flat.reshape(size, size)


def _scale_range(num_persons):
    if num_persons <= 2:
        return 0.44, 0.58
    if num_persons <= 4:
        return 0.36, 0.48
    return 0.28, 0.40


def _place_person(rng, size, h, existing_masks, overlap_with):
    half_w = 0.40 * h
    top = 0.50 * h
    bottom = 0.56 * h
    for _ in range(_PLACEMENT_RETRIES):
        if overlap_with is not None:
            base = overlap_with
            cx = base[0] + rng.uniform(-0.30, 0.30) * h
            cy = base[1] + rng.uniform(-0.15, 0.15) * h
            cx = float(np.clip(cx, half_w, size - half_w))
            cy = float(np.clip(cy, top, size - bottom))
        else:
            if half_w >= size - half_w or top >= size - bottom:
                raise GenerationError(f"figure of height {h:.1f} cannot fit a {size}px scene")
            cx = rng.uniform(half_w, size - half_w)
            cy = rng.uniform(top, size - bottom)
        joints = _skeleton(cx, cy, h, rng)
        mask = _figure_mask(joints, h, size)
        if overlap_with is not None:
            prev = existing_masks[-1]
            if not (mask & prev).any():
                continue
        elif existing_masks:
            smallest = min(int(m.sum()) for m in existing_masks + [mask])
            worst = max(int((mask & m).sum()) for m in existing_masks)
            if worst > 0.15 * smallest:
                continue
        return (cx, cy), joints, mask
    raise GenerationError("could not place a figure within the retry budget")


def _side_word(cx, size):
    if cx < size / 3.0:
        return "left"
    if cx < 2.0 * size / 3.0:
        return "middle"
    return "right"


def _text_templates(color, side, rng):
    options = [
        f"the {color} person",
        f"the {color} figure",
        f"the {color} person on the {side}",
    ]
    return options[rng.integers(0, len(options))]


def synth_scene(recipe, seed=None):
    """Render one scene deterministically from the recipe (and seed override)."""
    rng = np.random.default_rng(recipe.seed if seed is None else seed)
    size = recipe.image_size
    lo, hi = _scale_range(recipe.num_persons)

    heights = rng.uniform(lo * size, hi * size, size=recipe.num_persons)
    color_ids = rng.permutation(len(PALETTE))[:recipe.num_persons]

    masks = []
    skeletons = []
    centers = []
    for p in range(recipe.num_persons):
        overlap_anchor = None
        if recipe.overlap and p == 1:
            overlap_anchor = centers[0]
        center, joints, mask = _place_person(rng, size, heights[p], masks, overlap_anchor)
        centers.append(center)
        skeletons.append(joints)
        masks.append(mask)

    image = rng.uniform(0.0, 0.30, size=(3, size, size))
    for p in range(recipe.num_persons):
        color = np.array(PALETTE[color_ids[p]][1])
        shade = 0.85 + 0.15 * rng.random((3, int(masks[p].sum())))
        image[:, masks[p]] = color[:, None] * shade
    image = np.clip(image, 0.0, 1.0)

    persons = []
    prompts = []
    colors = []
    for p in range(recipe.num_persons):
        joints17 = skeletons[p]
        if recipe.k == 5:
            joints = joints17[geo.K5_JOINT_INDICES]
        else:
            joints = joints17
        kp = np.concatenate([joints, np.full((len(joints), 1), 2.0)], axis=1)

        mask = masks[p]
        rows = np.any(mask, axis=1).nonzero()[0]
        cols = np.any(mask, axis=0).nonzero()[0]
        x0 = min(float(cols[0]), joints[:, 0].min())
        x1 = max(float(cols[-1] + 1), joints[:, 0].max())
        y0 = min(float(rows[0]), joints[:, 1].min())
        y1 = max(float(rows[-1] + 1), joints[:, 1].max())
        bbox = np.array([x0, y0, x1 - x0, y1 - y0])

        ann = PersonAnnotation(
            id=p,
            image_id=0,
            keypoints=kp,
            mask=rle_encode(mask.astype(np.uint8)),
            bbox=bbox,
            area=float(mask.sum()),
        )
        persons.append(ann)

        color_name = PALETTE[color_ids[p]][0]
        colors.append(color_name)
        side = _side_word(centers[p][0], size)
        prompts.append(PromptRecord(p, "text", text=_text_templates(color_name, side, rng)))
        scribble = geo.synth_scribble(mask.astype(np.uint8), rng)
        prompts.append(PromptRecord(p, "scribble", points=scribble.points.copy()))
        prompts.append(PromptRecord(p, "point", points=geo.sample_point(scribble, rng).reshape(1, 2)))

    return SyntheticScene(image, persons, prompts, colors)


def scenes_to_dataset(scenes, sizes, base_dir="."):
    """Merge per-scene annotations into one Dataset with global ids.

    ``sizes`` gives each scene's image size; tensor files are named
    scene_{index:04d}.tns relative to ``base_dir``.
    """
    images = {}
    annotations = {}
    prompts = []
    next_ann = 0
    for idx, scene in enumerate(scenes):
        size = sizes[idx]
        images[idx] = ImageInfo(id=idx, width=size, height=size, file=f"scene_{idx:04d}.tns")
        remap = {}
        for person in scene.persons:
            remap[person.id] = next_ann
            annotations[next_ann] = PersonAnnotation(
                id=next_ann, image_id=idx, keypoints=person.keypoints,
                mask=person.mask, bbox=person.bbox, area=person.area,
            )
            next_ann += 1
        for prompt in scene.prompts:
            prompts.append(PromptRecord(remap[prompt.ann_id], prompt.kind,
                                        text=prompt.text, points=prompt.points))
    return Dataset(images, annotations, prompts, base_dir=base_dir)


def load_recipe(path):
    with open(path, "r", encoding="utf-8") as fh:
        return SceneRecipe.from_json(json.load(fh))
