"""Prompt fusion and the multi-scale deformable transformer encoder.

Fusion adds prompt context to every visual token through modality-specific
cross attention (one parameter set for text, one for positional prompts):
fused = tokens + Attn(Q=tokens, K=rows, V=rows). Encoder layers are
pre-norm: deformable self attention over the four levels, then a
feed-forward sublayer, each wrapped in x + f(LN(x)) so a zeroed output
projection turns the sublayer into an identity.
"""

from __future__ import annotations

import math

import numpy as np

from .. import autodiff as ad
from ..optim import make_param
from .layers import FeedForward, LayerNorm, Linear, MultiHeadAttention, sinusoidal_encoding


class DeformableAttention:
    """Each query predicts per-head sampling offsets and weights around its
    own reference point at every pyramid level, then aggregates bilinear
    reads of the value projection. Weights are softmax-normalized over the
    level x point grid per head."""

    def __init__(self, store, name, cfg, rng):
        d, m, k = cfg.D, cfg.heads, cfg.deform_points
        levels = len(cfg.strides)
        self.heads = m
        self.points = k
        self.levels = levels
        self.head_dim = cfg.head_dim
        self.value = Linear(store, f"{name}.value", d, d, rng)
        self.offsets = Linear(store, f"{name}.offsets", d, m * levels * k * 2, rng, w_scale=1e-3)
        self.offsets.b.data[:] = self._directional_bias(m, levels, k)
        self.weights = Linear(store, f"{name}.weights", d, m * levels * k, rng, w_scale=1e-3)
        self.out = Linear(store, f"{name}.out", d, d, rng)

    @staticmethod
    def _directional_bias(heads, levels, points):
        # spread initial samples on small per-head rays around the reference
        angles = 2.0 * math.pi * np.arange(heads) / heads
        dirs = np.stack([np.cos(angles), np.sin(angles)], axis=1)  # (M, 2)
        radius = 0.5 * (np.arange(points) + 1.0)
        bias = dirs[:, None, None, :] * radius[None, None, :, None]
        return np.broadcast_to(bias, (heads, levels, points, 2)).reshape(-1).copy()

    def __call__(self, queries, ref_points, features, return_weights=False):
        """queries (Q, D); ref_points (Q, 2) tensor of normalized locations."""
        q = queries.shape[0]
        m, lv, k, dh = self.heads, self.levels, self.points, self.head_dim

        value_tokens = self.value(features.tokens)
        value_features = features.with_tokens(value_tokens)

        raw = self.offsets(queries).reshape(q, m, lv, k, 2)
        shapes = np.array([(w, h) for (h, w) in features.level_shapes], dtype=np.float64)
        scale = ad.Tensor(1.0 / shapes.reshape(1, 1, lv, 1, 2))
        locations = ad.as_tensor(ref_points).reshape(q, 1, 1, 1, 2) + raw * scale

        attn = ad.softmax(self.weights(queries).reshape(q, m, lv * k), axis=-1)
        attn = attn.reshape(q, m, lv, k)

        per_head = [None] * m
        for level in range(lv):
            vmap = value_features.level_map(level)
            pts = locations[:, :, level, :, :].reshape(q * m * k, 2)
            sampled = ad.bilinear_sample(vmap, pts).reshape(q, m, k, -1)
            for head in range(m):
                sl = sampled[:, head, :, head * dh:(head + 1) * dh]  # (Q, K, dh)
                wgt = attn[:, head, level, :].reshape(q, k, 1)
                contribution = (sl * wgt).sum(axis=1)  # (Q, dh)
                per_head[head] = contribution if per_head[head] is None else per_head[head] + contribution
        merged = ad.concat(per_head, axis=1)
        out = self.out(merged)
        return (out, attn) if return_weights else out


class ModalityFusion:
    """Residual cross attention with disjoint parameter sets per modality."""

    def __init__(self, store, cfg, rng):
        self.attn = {
            "text": MultiHeadAttention(store, "fusion.text", cfg.D, cfg.heads, rng),
            "positional": MultiHeadAttention(store, "fusion.positional", cfg.D, cfg.heads, rng),
        }

    def __call__(self, features, prompt_embedding, return_weights=False):
        attn = self.attn[prompt_embedding.modality]
        update, weights = attn(features.tokens, prompt_embedding.fw)
        fused = features.with_tokens(features.tokens + update)
        return (fused, weights) if return_weights else fused


class EncoderLayer:
    def __init__(self, store, name, cfg, rng):
        self.norm = LayerNorm(store, f"{name}.norm", cfg.D, rng)
        self.attn = DeformableAttention(store, f"{name}.deform", cfg, rng)
        self.ffn = FeedForward(store, f"{name}.ffn", cfg.D, cfg.ffn_dim, rng)
        self.level_embed = make_param(store, f"{name}.level_embed", rng,
                                      (len(cfg.strides), cfg.D), init="normal", scale=0.02)
        self.dim = cfg.D

    def __call__(self, features):
        x = features.tokens
        y = self.norm(x)
        pos = sinusoidal_encoding(ad.Tensor(features.centers), self.dim)
        lvl = ad.gather_rows(self.level_embed, features.levels)
        queries = y + pos + lvl
        update = self.attn(queries, features.centers, features.with_tokens(y))
        x = x + update
        x = self.ffn(x)
        return features.with_tokens(x)


class DeformableEncoder:
    def __init__(self, store, cfg, rng):
        self.layers = [
            EncoderLayer(store, f"encoder.layer{i}", cfg, rng)
            for i in range(cfg.enc_layers)
        ]

    def __call__(self, features):
        for layer in self.layers:
            features = layer(features)
        return features
