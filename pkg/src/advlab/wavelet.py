"""Single-level orthonormal 2-D Haar transform over NCHW tensors.

For every non-overlapping 2x2 block ``[a b; c d]``::

    LL = (a + b + c + d) / 2      LH = (a - b + c - d) / 2
    HL = (a + b - c - d) / 2      HH = (a - b - c + d) / 2

The transform matrix is orthogonal and symmetric, so the inverse uses the
same coefficients and each direction's backward pass is the other direction.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from advlab.tensor import Tensor, _arr, _make

BANDS = ("LL", "LH", "HL", "HH")
HIGH_BANDS = ("HH", "HL", "LH")


@dataclass
class SubBands:
    LL: Tensor
    LH: Tensor
    HL: Tensor
    HH: Tensor

    def __post_init__(self):
        shapes = {b.shape for b in self.as_tuple()}
        if len(shapes) != 1:
            raise ValueError(f"sub-band shapes differ: {[b.shape for b in self.as_tuple()]}")

    def as_tuple(self) -> tuple:
        return (self.LL, self.LH, self.HL, self.HH)

    def __getitem__(self, name: str) -> Tensor:
        if name not in BANDS:
            raise KeyError(name)
        return getattr(self, name)


def _analysis(x: np.ndarray):
    a = x[:, :, 0::2, 0::2]
    b = x[:, :, 0::2, 1::2]
    c = x[:, :, 1::2, 0::2]
    d = x[:, :, 1::2, 1::2]
    return (
        (a + b + c + d) * 0.5,
        (a - b + c - d) * 0.5,
        (a + b - c - d) * 0.5,
        (a - b - c + d) * 0.5,
    )


def _synthesis(ll, lh, hl, hh) -> np.ndarray:
    n, c, h, w = ll.shape
    out = np.empty((n, c, 2 * h, 2 * w), dtype=np.result_type(ll, lh, hl, hh))
    out[:, :, 0::2, 0::2] = (ll + lh + hl + hh) * 0.5
    out[:, :, 0::2, 1::2] = (ll - lh + hl - hh) * 0.5
    out[:, :, 1::2, 0::2] = (ll + lh - hl - hh) * 0.5
    out[:, :, 1::2, 1::2] = (ll - lh - hl + hh) * 0.5
    return out


def dwt2(x: Tensor) -> SubBands:
    if x.ndim != 4:
        raise ValueError(f"dwt2 expects NCHW input, got shape {x.shape}")
    h, w = x.shape[2:]
    if h % 2 or w % 2:
        raise ValueError(f"dwt2 needs even spatial dims, got {h}x{w}")
    # one node produces the stacked coefficients; the bands are views of it
    stacked = np.stack(_analysis(_arr(x)))

    def bw(g):
        return (_synthesis(*g),)

    joint = _make(stacked, "dwt2", (x,), bw)
    return SubBands(*(_select(joint, i) for i in range(4)))


def _select(t: Tensor, i: int) -> Tensor:
    shape = t.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[i] = g
        return (full,)

    return _make(t.data[i], "select", (t,), bw)


def idwt2(bands: SubBands) -> Tensor:
    parts = bands.as_tuple()
    shapes = {p.shape for p in parts}
    if len(shapes) != 1:
        raise ValueError(f"idwt2 band shapes differ: {[p.shape for p in parts]}")
    if parts[0].ndim != 4:
        raise ValueError(f"idwt2 expects NCHW bands, got {parts[0].shape}")
    out = _synthesis(*(_arr(p) for p in parts))

    def bw(g):
        return _analysis(g)

    return _make(out, "idwt2", parts, bw)


def zero_bands(bands: SubBands, mask: Iterable[str]) -> SubBands:
    """Replace the bands named in ``mask`` by zeros; others pass through."""
    mask = set(mask)
    unknown = mask - set(BANDS)
    if unknown:
        raise ValueError(f"unknown band names {sorted(unknown)}")
    kept = {}
    for name in BANDS:
        band = bands[name]
        kept[name] = Tensor(np.zeros_like(band.data)) if name in mask else band
    return SubBands(**kept)
