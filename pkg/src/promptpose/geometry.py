"""Geometry kernel: Bezier scribble synthesis, box algebra, keypoint similarity.

Pixel-space curves use continuous (x, y) coordinates; the pixel at grid cell
(r, c) covers [c, c+1) x [r, r+1) and has its sampling center at
(c + 0.5, r + 0.5). Boxes are stored normalized center-size (cx, cy, w, h).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, InvalidInputError, UndefinedSimilarityError

# Per-keypoint similarity constants for the 17-joint layout
# (nose, eyes, ears, shoulders, elbows, wrists, hips, knees, ankles).
COCO17_KAPPAS = np.array([
    0.026, 0.025, 0.025, 0.035, 0.035, 0.079, 0.079, 0.072, 0.072,
    0.062, 0.062, 0.107, 0.107, 0.087, 0.087, 0.089, 0.089,
])

COCO17_JOINT_NAMES = [
    "nose", "left_eye", "right_eye", "left_ear", "right_ear",
    "left_shoulder", "right_shoulder", "left_elbow", "right_elbow",
    "left_wrist", "right_wrist", "left_hip", "right_hip",
    "left_knee", "right_knee", "left_ankle", "right_ankle",
]

# Reduced 5-joint profile for fast tests: nose, shoulders, hips.
K5_JOINT_INDICES = [0, 5, 6, 11, 12]
K5_KAPPAS = COCO17_KAPPAS[K5_JOINT_INDICES]

SCRIBBLE_POINTS = 12

# Dense rasterization budget: 100 samples per control-polygon pixel,
# clamped so the twelve-point index formula always has room.
_RASTER_PER_PIXEL = 100
_RASTER_MIN = 120
_RASTER_MAX = 12000


def kappas_for(k):
    if k == 17:
        return COCO17_KAPPAS
    if k == 5:
        return K5_KAPPAS
    raise InvalidInputError(f"no keypoint-similarity table for k={k} (supported: 5, 17)")


@dataclass
class ControlPoints:
    """Four cubic-curve control points, pixel coordinates, shape (4, 2)."""

    points: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(4, 2)
        if not np.isfinite(self.points).all():
            raise InvalidInputError("control points must be finite")

    def polygon_length(self):
        return float(np.linalg.norm(np.diff(self.points, axis=0), axis=1).sum())


@dataclass
class Scribble:
    """Exactly twelve ordered curve points, pixel coordinates, shape (12, 2)."""

    points: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.shape != (SCRIBBLE_POINTS, 2):
            raise InvalidInputError(f"a scribble has exactly {SCRIBBLE_POINTS} points, got {self.points.shape}")


@dataclass
class BBox:
    """Axis-aligned box, normalized center-size representation."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise InvalidInputError(f"box extents must be positive, got w={self.w}, h={self.h}")

    def to_xyxy(self):
        return np.array([
            self.cx - self.w / 2.0, self.cy - self.h / 2.0,
            self.cx + self.w / 2.0, self.cy + self.h / 2.0,
        ])

    @staticmethod
    def from_xyxy(x0, y0, x1, y1):
        return BBox((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0)

    @staticmethod
    def from_pixel_xywh(x, y, w, h, image_w, image_h):
        return BBox((x + w / 2.0) / image_w, (y + h / 2.0) / image_h, w / image_w, h / image_h)

    def to_pixel_xywh(self, image_w, image_h):
        return np.array([
            (self.cx - self.w / 2.0) * image_w,
            (self.cy - self.h / 2.0) * image_h,
            self.w * image_w,
            self.h * image_h,
        ])

    def area(self):
        return self.w * self.h


@dataclass
class Pose:
    """Normalized keypoints (k, 2) plus per-keypoint visibility (k,).

    Ground truth carries {0, 1} visibility; predictions carry [0, 1] scores.
    """

    keypoints: np.ndarray
    visibility: np.ndarray = field(default=None)

    def __post_init__(self):
        self.keypoints = np.asarray(self.keypoints, dtype=np.float64).reshape(-1, 2)
        if self.visibility is None:
            self.visibility = np.ones(len(self.keypoints))
        self.visibility = np.asarray(self.visibility, dtype=np.float64).reshape(-1)
        if len(self.visibility) != len(self.keypoints):
            raise InvalidInputError("visibility length must match keypoint count")

    @property
    def k(self):
        return len(self.keypoints)


# -- Bezier machinery ---------------------------------------------------------

def bernstein(i, n, t):
    """Basis polynomial C(n,i) * (1-t)^(n-i) * t^i."""
    if not 0 <= i <= n:
        raise DomainError(f"bernstein index i={i} outside 0..{n}")
    if not 0.0 <= t <= 1.0:
        raise DomainError(f"bernstein parameter t={t} outside [0, 1]")
    return math.comb(n, i) * (1.0 - t) ** (n - i) * t**i


def bezier_point(cp, t):
    """Evaluate the cubic curve sum_i b_{i,3}(t) * p_i at parameter t."""
    if not 0.0 <= t <= 1.0:
        raise DomainError(f"curve parameter t={t} outside [0, 1]")
    weights = np.array([bernstein(i, 3, t) for i in range(4)])
    return weights @ cp.points


def _rasterize(cp):
    n = int(round(_RASTER_PER_PIXEL * cp.polygon_length()))
    n = min(max(n, _RASTER_MIN), _RASTER_MAX)
    t = np.linspace(0.0, 1.0, n)
    # vectorized cubic evaluation over the whole parameter grid
    b = np.stack([
        (1 - t) ** 3,
        3 * (1 - t) ** 2 * t,
        3 * (1 - t) * t**2,
        t**3,
    ], axis=1)
    return b @ cp.points


def discretize_scribble(cp):
    """Densely rasterize the curve, then keep the twelve points at the
    (1-based) indices floor(k*n/12), k = 1..12."""
    dense = _rasterize(cp)
    n = len(dense)
    idx = [(k * n) // 12 - 1 for k in range(1, 13)]
    return Scribble(dense[idx])


def convex_hull_2d(points):
    """Monotone-chain hull; returns CCW vertices (may be fewer than inputs)."""
    pts = sorted({(float(x), float(y)) for x, y in points})
    if len(pts) <= 2:
        return np.asarray(pts, dtype=np.float64).reshape(-1, 2)

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper = []
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.asarray(lower[:-1] + upper[:-1], dtype=np.float64)


def points_in_hull(points, hull_of, tol=1e-9):
    """True where each point lies inside the convex hull of ``hull_of``.

    Degenerate hulls (segment or single point) fall back to a distance test.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    hull = convex_hull_2d(np.asarray(hull_of, dtype=np.float64).reshape(-1, 2))
    if len(hull) == 1:
        return np.linalg.norm(points - hull[0], axis=1) <= tol
    if len(hull) == 2:
        return _segment_distance(points, hull[0], hull[1]) <= tol
    ok = np.ones(len(points), dtype=bool)
    for i in range(len(hull)):
        a = hull[i]
        b = hull[(i + 1) % len(hull)]
        cross = (b[0] - a[0]) * (points[:, 1] - a[1]) - (b[1] - a[1]) * (points[:, 0] - a[0])
        ok &= cross >= -tol
    return ok


def _segment_distance(points, a, b):
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        return np.linalg.norm(points - a, axis=1)
    t = np.clip((points - a) @ ab / denom, 0.0, 1.0)
    proj = a + t[:, None] * ab
    return np.linalg.norm(points - proj, axis=1)


def _points_in_mask(points, mask):
    h, w = mask.shape
    c = np.floor(points[:, 0]).astype(int)
    r = np.floor(points[:, 1]).astype(int)
    inside = (c >= 0) & (c < w) & (r >= 0) & (r < h)
    out = np.zeros(len(points), dtype=bool)
    out[inside] = mask[r[inside], c[inside]] > 0
    return out


def synth_scribble(mask, rng, max_attempts=50):
    """Draw four control points uniformly from the mask foreground, keep the
    first curve whose twelve discretized points all stay in the foreground.

    After ``max_attempts`` rejections the result degrades to twelve copies of
    a random foreground pixel center.
    """
    mask = np.asarray(mask)
    fg = np.argwhere(mask > 0)  # (row, col)
    if len(fg) == 0:
        raise InvalidInputError("cannot synthesize a scribble on an empty foreground")
    centers = fg[:, ::-1] + 0.5  # -> (x, y) pixel centers
    for _ in range(max_attempts):
        picks = centers[rng.integers(0, len(centers), size=4)]
        scribble = discretize_scribble(ControlPoints(picks))
        if _points_in_mask(scribble.points, mask).all():
            return scribble
    fallback = centers[rng.integers(0, len(centers))]
    return Scribble(np.tile(fallback, (SCRIBBLE_POINTS, 1)))


def sample_point(scribble, rng):
    """Uniformly pick one of the twelve scribble points."""
    return scribble.points[rng.integers(0, SCRIBBLE_POINTS)].copy()


# -- box and keypoint similarity ----------------------------------------------

def iou(a, b):
    ax0, ay0, ax1, ay1 = a.to_xyxy()
    bx0, by0, bx1, by1 = b.to_xyxy()
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = a.area() + b.area() - inter
    return inter / union


def giou(a, b):
    """IoU minus the normalized spare area of the tight enclosing box."""
    ax0, ay0, ax1, ay1 = a.to_xyxy()
    bx0, by0, bx1, by1 = b.to_xyxy()
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = a.area() + b.area() - inter
    hull = (max(ax1, bx1) - min(ax0, bx0)) * (max(ay1, by1) - min(ay0, by0))
    return inter / union - (hull - union) / hull


def oks(pred, gt, gt_area, kappas=None):
    """Keypoint similarity: mean over visible joints of
    exp(-d_i^2 / (2 * area * kappa_i^2)), distances in pixel units."""
    kappas = kappas_for(gt.k) if kappas is None else np.asarray(kappas, dtype=np.float64)
    visible = gt.visibility > 0
    if not visible.any():
        raise UndefinedSimilarityError("no visible ground-truth keypoints")
    if gt_area <= 0:
        raise InvalidInputError(f"gt_area must be positive, got {gt_area}")
    d2 = ((pred.keypoints - gt.keypoints) ** 2).sum(axis=1)
    e = d2 / (2.0 * gt_area * kappas**2)
    return float(np.exp(-e[visible]).mean())
