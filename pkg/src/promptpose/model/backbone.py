"""Visual feature pyramid and prompt encoders.

The visual encoder is a small strided-convolution pyramid emitting four
scales at strides {8, 16, 32, 64}, each projected to D channels point-wise.
Text prompts go through a hashing tokenizer + embedding table; positional
prompts read their embeddings bilinearly from the stride-16 feature map.
The per-row features pool (mean) into a single instance query vector.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from .. import autodiff as ad
from ..errors import InvalidInputError, ShapeError
from ..optim import make_param
from .config import STRIDES
from .layers import Conv2d, Linear

STRIDE16_LEVEL = STRIDES.index(16)


@dataclass
class MultiScaleFeatures:
    """Flattened multi-scale tokens plus their provenance.

    Tokens are ordered level-major then row-major, so the flattening is
    stable across runs. ``centers`` holds each token's normalized (x, y)
    cell center; ``levels`` its pyramid level index.
    """

    tokens: ad.Tensor  # (T, D)
    level_shapes: list[tuple[int, int]]
    level_offsets: list[int]
    centers: np.ndarray  # (T, 2)
    levels: np.ndarray  # (T,)
    image_hw: tuple[int, int]

    @property
    def token_count(self):
        return self.tokens.shape[0]

    def with_tokens(self, tokens):
        return MultiScaleFeatures(tokens, self.level_shapes, self.level_offsets,
                                  self.centers, self.levels, self.image_hw)

    def level_map(self, level):
        """(D, H_l, W_l) view of one level, rebuilt from the token tensor."""
        h, w = self.level_shapes[level]
        start = self.level_offsets[level]
        block = self.tokens[start:start + h * w, :]
        return ad.transpose(block.reshape(h, w, self.tokens.shape[1]), (2, 0, 1))

    def maps(self):
        return [self.level_map(i) for i in range(len(self.level_shapes))]


class ConvPyramid:
    """Strided conv stem to stride 8, then one stage per further octave."""

    def __init__(self, store, cfg, rng):
        d = cfg.D
        half = max(4, d // 2)
        g = "backbone"
        self.stem = [
            Conv2d(store, "backbone.stem0", 3, half, rng, stride=2, group=g),
            Conv2d(store, "backbone.stem1", half, half, rng, stride=2, group=g),
            Conv2d(store, "backbone.stem2", half, d, rng, stride=2, group=g),
        ]
        self.stages = [
            Conv2d(store, f"backbone.stage{i}", d, d, rng, stride=2, group=g)
            for i in range(3)
        ]
        self.projections = [
            Linear(store, f"backbone.proj{i}", d, d, rng, group=g)
            for i in range(4)
        ]
        self.d = d

    def __call__(self, image):
        image = ad.as_tensor(image)
        if image.ndim != 3 or image.shape[0] != 3:
            raise ShapeError(f"expected a (3, H, W) image, got {image.shape}")
        _, h, w = image.shape
        if h % 64 != 0 or w % 64 != 0:
            raise ShapeError(f"image extents must be divisible by 64, got {h}x{w}")

        x = image
        for conv in self.stem:
            x = ad.gelu(conv(x))
        pyramid = [x]
        for stage in self.stages:
            x = ad.gelu(stage(x))
            pyramid.append(x)

        token_blocks = []
        level_shapes = []
        level_offsets = []
        centers = []
        levels = []
        offset = 0
        for lvl, fmap in enumerate(pyramid):
            d, fh, fw = fmap.shape
            flat = ad.transpose(fmap, (1, 2, 0)).reshape(fh * fw, d)
            token_blocks.append(self.projections[lvl](flat))
            level_shapes.append((fh, fw))
            level_offsets.append(offset)
            offset += fh * fw
            ys, xs = np.mgrid[0:fh, 0:fw]
            centers.append(np.stack([(xs.ravel() + 0.5) / fw, (ys.ravel() + 0.5) / fh], axis=1))
            levels.append(np.full(fh * fw, lvl))
        tokens = ad.concat(token_blocks, axis=0)
        return MultiScaleFeatures(tokens, level_shapes, level_offsets,
                                  np.concatenate(centers), np.concatenate(levels), (h, w))


def hash_tokens(text, vocab_size):
    """Lowercase whitespace tokenization hashed into embedding buckets."""
    words = text.lower().split()
    if not words:
        raise InvalidInputError("text prompt must contain at least one token")
    return np.array([zlib.crc32(w.encode("utf-8")) % vocab_size for w in words], dtype=np.int64)


@dataclass
class PromptEmbedding:
    fw: ad.Tensor  # (L, D) per-word / per-pixel rows
    qi: ad.Tensor  # (1, D) pooled instance query
    modality: str  # "text" | "positional"


class PromptEncoder:
    def __init__(self, store, cfg, rng):
        self.vocab_size = cfg.vocab_size
        self.table = make_param(store, "prompt.text_embedding", rng,
                                (cfg.vocab_size, cfg.D), init="normal", scale=0.2)

    def __call__(self, prompt, features):
        """Encode a PromptRecord-like object (kind + text/points, pixel coords)."""
        if prompt.kind == "text":
            ids = hash_tokens(prompt.text, self.vocab_size)
            fw = ad.gather_rows(self.table, ids)
            modality = "text"
        elif prompt.kind in ("scribble", "point"):
            pts = np.asarray(prompt.points, dtype=np.float64).reshape(-1, 2)
            h, w = features.image_hw
            if (pts[:, 0] < 0).any() or (pts[:, 0] > w).any() or \
               (pts[:, 1] < 0).any() or (pts[:, 1] > h).any():
                raise InvalidInputError("positional prompt coordinates fall outside the image")
            norm = pts / np.array([w, h])
            fw = ad.bilinear_sample(features.level_map(STRIDE16_LEVEL), ad.Tensor(norm))
            modality = "positional"
        else:
            raise InvalidInputError(f"unknown prompt kind '{prompt.kind}'")
        qi = fw.mean(axis=0, keepdims=True)
        return PromptEmbedding(fw, qi, modality)
