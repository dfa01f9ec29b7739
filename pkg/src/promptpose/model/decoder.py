"""Pose-centric decoding: prompt-conditioned query groups refined by
deformable local attention and per-group graph attention.

A query group holds one instance query plus k keypoint queries with their
normalized reference points. Graph attention treats the k+1 queries of a
group as graph nodes whose edge logits are scaled query-key products plus a
learnable additive relation matrix shared across groups (one per layer per
head). After every layer the keypoint head re-predicts the keypoint
reference points and the instance reference point snaps back to their mean.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .. import autodiff as ad
from ..errors import ConfigError
from ..optim import make_param
from .encoder import DeformableAttention
from .layers import FeedForward, LayerNorm, Linear, sinusoidal_encoding


@dataclass
class QueryGroups:
    """State of the n query groups.

    ``embeddings``: (n, k+1, D), slot 0 is the instance query.
    ``ref_points``: (n, k+1, 2) normalized, slot 0 is the keypoint mean.
    ``prev_kp_refs``: (n, k, 2) keypoint references before the most recent
    refinement; the keypoint head recomputes the final pose from these.
    """

    embeddings: ad.Tensor
    ref_points: ad.Tensor
    prev_kp_refs: ad.Tensor


def _group_refs(kp_refs):
    center = kp_refs.mean(axis=1, keepdims=True)
    return ad.concat([center, kp_refs], axis=1)


class QueryInit:
    """Rank tokens with a linear scorer, regress keypoint anchors at the
    top-n positions, and replicate the prompt-conditioned group template."""

    def __init__(self, store, cfg, rng):
        self.cfg = cfg
        self.score = Linear(store, "query_init.score", cfg.D, 1, rng)
        self.regress = Linear(store, "query_init.regress", cfg.D, 2 * cfg.k, rng, w_scale=1e-2)
        self.template = make_param(store, "query_init.keypoint_embeddings", rng,
                                   (cfg.k, cfg.D), init="normal", scale=0.02)

    def __call__(self, features, prompt_embedding):
        cfg = self.cfg
        n, k, d = cfg.n, cfg.k, cfg.D
        tokens = features.tokens
        total = tokens.shape[0]
        if total < n:
            raise ConfigError(f"{n} query groups need at least {n} tokens, got {total}")

        scores = self.score(tokens).data.reshape(-1)
        order = np.argsort(-scores, kind="stable")[:n]

        selected = ad.gather_rows(tokens, order)  # (n, D)
        anchors = np.clip(features.centers[order], 1e-6, 1.0 - 1e-6)
        anchor_logit = np.log(anchors / (1.0 - anchors)).reshape(n, 1, 2)
        kp_logits = self.regress(selected).reshape(n, k, 2)
        kp_refs = ad.sigmoid(kp_logits + ad.Tensor(anchor_logit))
        refs = _group_refs(kp_refs)

        template = ad.concat([prompt_embedding.qi, self.template], axis=0).reshape(1, k + 1, d)
        pos = sinusoidal_encoding(refs.reshape(n * (k + 1), 2), d).reshape(n, k + 1, d)
        embeddings = template + pos + selected.reshape(n, 1, d)
        return QueryGroups(embeddings, refs, kp_refs)


class GraphAttention:
    """Per-group all-pairs attention with a learnable additive relation
    matrix A (heads, k+1, k+1) shared across the n groups. Edge logits are
    (W^q v_i . W^k v_j) / sqrt(head_dim) + A_ij. Pre-norm residual."""

    def __init__(self, store, name, cfg, rng):
        d = cfg.D
        self.heads = cfg.heads
        self.head_dim = cfg.head_dim
        scale = math.sqrt(6.0 / (2 * d))
        self.norm = LayerNorm(store, f"{name}.norm", d, rng)
        self.wq = make_param(store, f"{name}.wq", rng, (d, d), scale=scale)
        self.wk = make_param(store, f"{name}.wk", rng, (d, d), scale=scale)
        self.wv = Linear(store, f"{name}.value", d, d, rng)
        self.out = Linear(store, f"{name}.out", d, d, rng)
        self.adjacency = make_param(store, f"{name}.adjacency", rng,
                                    (cfg.heads, cfg.k + 1, cfg.k + 1), init="zeros")

    def __call__(self, embeddings, return_internals=False):
        n, nodes, d = embeddings.shape
        flat = embeddings.reshape(n * nodes, d)
        y = self.norm(flat)
        q = (y @ self.wq).reshape(n, nodes, self.heads, self.head_dim)
        k = (y @ self.wk).reshape(n, nodes, self.heads, self.head_dim)
        v = self.wv(y).reshape(n, nodes, self.heads, self.head_dim)

        ctx_heads = []
        attn_heads = []
        inv_scale = 1.0 / math.sqrt(self.head_dim)
        for h in range(self.heads):
            qh = q[:, :, h, :]
            kh = k[:, :, h, :]
            vh = v[:, :, h, :]
            logits = ad.bmm(qh, ad.transpose(kh, (0, 2, 1))) * inv_scale
            logits = logits + self.adjacency[h]
            attn = ad.softmax(logits, axis=-1)
            ctx_heads.append(ad.bmm(attn, vh))
            attn_heads.append(attn)
        ctx = ad.concat(ctx_heads, axis=2)  # (n, nodes, D)
        out = embeddings + self.out(ctx.reshape(n * nodes, d)).reshape(n, nodes, d)
        if return_internals:
            return out, ad.stack(attn_heads, axis=0), ctx
        return out


class DecoderLayer:
    """Deformable cross attention, graph attention, FFN, then reference
    refinement through the shared keypoint head."""

    def __init__(self, store, name, cfg, rng, keypoint_head):
        d = cfg.D
        self.cfg = cfg
        self.norm = LayerNorm(store, f"{name}.norm", d, rng)
        self.cross = DeformableAttention(store, f"{name}.deform", cfg, rng)
        self.graph = GraphAttention(store, f"{name}.graph", cfg, rng)
        self.ffn = FeedForward(store, f"{name}.ffn", d, cfg.ffn_dim, rng)
        self.keypoint_head = keypoint_head

    def __call__(self, groups, features):
        n, nodes, d = groups.embeddings.shape
        flat = groups.embeddings.reshape(n * nodes, d)
        refs_flat = groups.ref_points.reshape(n * nodes, 2)

        y = self.norm(flat)
        queries = y + sinusoidal_encoding(refs_flat, d)
        flat = flat + self.cross(queries, refs_flat, features)

        x = self.graph(flat.reshape(n, nodes, d))
        x = self.ffn(x.reshape(n * nodes, d)).reshape(n, nodes, d)

        prev_kp = groups.ref_points[:, 1:, :]
        new_kp = self.keypoint_head.refine(x[:, 1:, :], prev_kp)
        return QueryGroups(x, _group_refs(new_kp), prev_kp)


class Decoder:
    def __init__(self, store, cfg, rng, keypoint_head):
        self.layers = [
            DecoderLayer(store, f"decoder.layer{i}", cfg, rng, keypoint_head)
            for i in range(cfg.dec_layers)
        ]

    def __call__(self, groups, features):
        for layer in self.layers:
            groups = layer(groups, features)
        return groups
