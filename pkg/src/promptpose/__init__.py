"""Promptable referring human pose and mask estimation, desk scale.

A numpy-backed library covering the full pipeline: a minimal reverse-mode
tensor engine, Bezier scribble/point prompt synthesis, an annotation schema
with an RLE mask codec and a synthetic scene generator, a promptable
pose+mask transformer with deformable and graph attention, set-matching
composite losses, and COCO-style evaluation metrics.
"""

from .autodiff import Tensor, backward, no_grad
from .optim import AdamW, ParameterStore

__all__ = ["Tensor", "backward", "no_grad", "AdamW", "ParameterStore"]

__version__ = "0.1.0"
