"""Interleaved multi-axis rotary position embedding.

A head of ``head_dim`` features has ``head_dim // 2`` rotation pairs
``(2j, 2j+1)``.  Pairs are dealt to the token, time and band axes
round-robin (token, time, band, token, ...), skipping axes whose share is
used up.  A pair that is the ``r``-th pair of axis ``a`` with ``n_a`` pairs
rotates by ``pos_a * base_theta ** (-2 r / d_a)`` where ``d_a = 2 n_a``.

With ``axis_allocation = (head_dim, 0, 0)`` every pair belongs to the token
axis in order, which is exactly standard 1D RoPE.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InvalidInputError

AXES = ("token", "time", "band")


def default_allocation(head_dim: int) -> tuple[int, int, int]:
    """Half of the pairs to the token axis, a quarter each to time and band."""
    pairs = head_dim // 2
    quarter = pairs // 4
    return (2 * (pairs - 2 * quarter), 2 * quarter, 2 * quarter)


@dataclass
class RopeConfig:
    head_dim: int = 16
    axis_allocation: tuple[int, int, int] | None = None
    base_theta: float = 10000.0
    interleaved: bool = True
    _layout: tuple = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.head_dim <= 0 or self.head_dim % 2:
            raise ConfigError(f"head_dim must be a positive even integer, got {self.head_dim}")
        if self.axis_allocation is None:
            self.axis_allocation = default_allocation(self.head_dim)
        self.axis_allocation = tuple(int(d) for d in self.axis_allocation)
        if len(self.axis_allocation) != 3 or any(d < 0 or d % 2 for d in self.axis_allocation):
            raise ConfigError(f"axis allocation must be three even non-negative ints, got {self.axis_allocation}")
        if sum(self.axis_allocation) != self.head_dim:
            raise ConfigError(f"axis allocation {self.axis_allocation} does not sum to head_dim={self.head_dim}")
        if self.base_theta <= 0:
            raise ConfigError("base_theta must be positive")

    @classmethod
    def one_d(cls, head_dim: int, base_theta: float = 10000.0) -> "RopeConfig":
        return cls(head_dim, (head_dim, 0, 0), base_theta)

    def pair_layout(self) -> tuple[np.ndarray, np.ndarray]:
        """(axis id, rank within axis) for every feature pair."""
        if self._layout is None:
            remaining = [d // 2 for d in self.axis_allocation]
            axis_of, rank_of = [], []
            counters = [0, 0, 0]
            if self.interleaved:
                a = 0
                while sum(remaining):
                    if remaining[a]:
                        axis_of.append(a)
                        rank_of.append(counters[a])
                        counters[a] += 1
                        remaining[a] -= 1
                    a = (a + 1) % 3
            else:
                for a in range(3):
                    axis_of += [a] * remaining[a]
                    rank_of += list(range(remaining[a]))
            self._layout = (np.array(axis_of, dtype=np.int64), np.array(rank_of, dtype=np.int64))
        return self._layout

    def pair_frequencies(self) -> np.ndarray:
        axis_of, rank_of = self.pair_layout()
        d_axis = np.array(self.axis_allocation, dtype=np.float64)[axis_of]
        return self.base_theta ** (-2.0 * rank_of / d_axis)


def rope_angles(positions, cfg: RopeConfig) -> np.ndarray:
    """Rotation angle of every pair at every position, shape ``(L, head_dim // 2)``.

    ``positions`` is an ``(L, 3)`` array of (token, time, band) indices, or a
    single triple.
    """
    pos = np.atleast_2d(np.asarray(positions, dtype=np.float64))
    if pos.shape[-1] != 3:
        raise InvalidInputError(f"positions must be (token, time, band) triples, got shape {pos.shape}")
    axis_of, _ = cfg.pair_layout()
    return pos[:, axis_of] * cfg.pair_frequencies()


def apply_rotation(x, cos, sin):
    """Rotate consecutive feature pairs of ``x`` (numpy or torch, last axis)."""
    x_even = x[..., 0::2]
    x_odd = x[..., 1::2]
    out_even = x_even * cos - x_odd * sin
    out_odd = x_even * sin + x_odd * cos
    if isinstance(x, np.ndarray):
        return np.stack([out_even, out_odd], axis=-1).reshape(x.shape)
    import torch
    return torch.stack([out_even, out_odd], dim=-1).reshape(x.shape)


def rotate(v, pos, cfg: RopeConfig) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != cfg.head_dim:
        raise InvalidInputError(f"vector length {v.shape[-1]} != head_dim {cfg.head_dim}")
    ang = rope_angles(pos, cfg)
    if np.ndim(pos) == 1:
        ang = ang[0]
    return apply_rotation(v, np.cos(ang), np.sin(ang))


def relative_score(q, k, pq, pk, cfg: RopeConfig) -> float:
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    if q.shape != k.shape:
        raise InvalidInputError(f"q and k lengths differ: {q.shape} vs {k.shape}")
    return float(np.dot(rotate(q, pq, cfg), rotate(k, pk, cfg)))
