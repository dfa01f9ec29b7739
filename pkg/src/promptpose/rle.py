"""Run-length codec for binary masks.

Runs are counted in column-major (Fortran) order and alternate zero/one
starting with the zero run, so an all-ones mask begins with a zero-length
zero run. Encoding is lossless: decode(encode(m)) == m.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import CorruptDataError, InvalidInputError


@dataclass
class RleMask:
    height: int
    width: int
    runs: list[int] = field(default_factory=list)

    def __post_init__(self):
        self.runs = [int(r) for r in self.runs]
        if any(r < 0 for r in self.runs):
            raise CorruptDataError("RLE runs must be nonnegative")

    def area(self):
        return sum(self.runs[1::2])

    def to_json(self):
        return {"h": self.height, "w": self.width, "runs": list(self.runs)}

    @staticmethod
    def from_json(obj):
        return RleMask(int(obj["h"]), int(obj["w"]), obj["runs"])


def rle_encode(mask):
    """Encode a binary (H, W) grid."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise InvalidInputError(f"mask must be 2-D, got shape {mask.shape}")
    vals = np.unique(mask)
    if not np.isin(vals, (0, 1)).all():
        raise InvalidInputError(f"mask must be binary, found values {vals[:5]}")
    h, w = mask.shape
    flat = mask.reshape(-1, order="F").astype(np.int64)
    if flat.size == 0:
        return RleMask(h, w, [])
    change = np.nonzero(np.diff(flat))[0] + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat[0] == 1:
        runs = [0] + runs
    return RleMask(h, w, runs)


def rle_decode(rle):
    """Decode back to a binary (H, W) uint8 grid."""
    total = sum(rle.runs)
    expected = rle.height * rle.width
    if total != expected:
        raise CorruptDataError(
            f"RLE run sum {total} does not cover the {rle.height}x{rle.width} grid ({expected} pixels)"
        )
    flat = np.zeros(expected, dtype=np.uint8)
    pos = 0
    val = 0
    for run in rle.runs:
        if val:
            flat[pos:pos + run] = 1
        pos += run
        val ^= 1
    return flat.reshape((rle.height, rle.width), order="F")
