"""One-level orthonormal 2D Haar patchification (patch size 2).

For every 2x2 block ``[[a, b], [c, d]]`` (rows are time, columns are Mel
bins)::

    LL = (a + b + c + d) / 2
    LH = (a - b + c - d) / 2
    HL = (a + b - c - d) / 2
    HH = (a - b - c + d) / 2

The four sub-bands are stacked as channels in that order.  The transform is
orthonormal, so it preserves energy and its inverse is its transpose.

``haar_split`` / ``haar_merge`` only use slicing and arithmetic, so they work
unchanged on numpy arrays and torch tensors with any leading batch dims.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError


@dataclass
class PatchedSpectrogram:
    subbands: np.ndarray          # (4, ceil(T/2), ceil(F/2)), order LL, LH, HL, HH
    original_shape: tuple[int, int]

    @property
    def LL(self):
        return self.subbands[0]


def haar_split(x):
    """Forward transform on the two trailing axes (both must be even)."""
    a = x[..., 0::2, 0::2]
    b = x[..., 0::2, 1::2]
    c = x[..., 1::2, 0::2]
    d = x[..., 1::2, 1::2]
    ll = (a + b + c + d) / 2
    lh = (a - b + c - d) / 2
    hl = (a + b - c - d) / 2
    hh = (a - b - c + d) / 2
    return ll, lh, hl, hh


def haar_merge(ll, lh, hl, hh, out=None):
    """Inverse of ``haar_split``; ``out`` must be a preallocated array/tensor."""
    out[..., 0::2, 0::2] = (ll + lh + hl + hh) / 2
    out[..., 0::2, 1::2] = (ll - lh + hl - hh) / 2
    out[..., 1::2, 0::2] = (ll + lh - hl - hh) / 2
    out[..., 1::2, 1::2] = (ll - lh - hl + hh) / 2
    return out


def haar_forward(m) -> PatchedSpectrogram:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.size == 0:
        raise InvalidInputError(f"expected a non-empty 2D matrix, got shape {m.shape}")
    t, f = m.shape
    # odd sizes: replicate the last row/column
    padded = np.pad(m, ((0, t % 2), (0, f % 2)), mode="edge")
    return PatchedSpectrogram(np.stack(haar_split(padded)), (t, f))


def haar_inverse(p: PatchedSpectrogram) -> np.ndarray:
    s = np.asarray(p.subbands, dtype=np.float64)
    if s.ndim != 3 or s.shape[0] != 4:
        raise InvalidInputError(f"expected subbands of shape (4, H, W), got {s.shape}")
    t, f = p.original_shape
    h, w = s.shape[1:]
    if h != -(-t // 2) or w != -(-f // 2):
        raise InvalidInputError(
            f"subband shape {(h, w)} inconsistent with original shape {(t, f)}")
    out = np.empty((2 * h, 2 * w))
    haar_merge(s[0], s[1], s[2], s[3], out=out)
    return out[:t, :f]
