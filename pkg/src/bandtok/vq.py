"""Vector quantisation over a latent grid with a single shared codebook.

Every (time, band) cell of a ``C x T' x F'`` latent grid is replaced by its
nearest code (squared Euclidean distance, ties to the lowest index).  Codes
are moved by exponential moving averages of assignment counts and assigned
vector sums rather than by a codebook loss.  ``residual_quantize`` stacks
several books, each quantising what the previous ones left over; it is the
comparison geometry where the vertical token axis is residual depth instead
of Mel band.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from . import rng as rng_mod
from .errors import ConfigError, InvalidInputError

DEAD_SIZE_THRESHOLD = 1e-3
DEAD_PATIENCE = 200


@dataclass
class Codebook:
    codes: np.ndarray                 # (K, C)
    ema_cluster_size: np.ndarray      # (K,)
    ema_embed_sum: np.ndarray         # (K, C)
    decay: float = 0.99
    laplace_eps: float = 1e-5
    usage_count: np.ndarray = None    # (K,) int
    pinned_zero: bool = False         # code 0 stays the zero vector
    seed: int = 0
    dead_steps: np.ndarray = field(default=None, repr=False)
    n_updates: int = 0

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.float64)
        K, C = self.codes.shape
        if K < 1:
            raise ConfigError("codebook needs at least one code")
        if not 0.0 <= self.decay < 1.0:
            raise ConfigError(f"decay must lie in [0, 1), got {self.decay}")
        if self.usage_count is None:
            self.usage_count = np.zeros(K, dtype=np.int64)
        if self.dead_steps is None:
            self.dead_steps = np.zeros(K, dtype=np.int64)
        self._rng = rng_mod.derive(self.seed, "codebook.revive")

    @property
    def K(self) -> int:
        return self.codes.shape[0]

    @property
    def C(self) -> int:
        return self.codes.shape[1]

    @classmethod
    def init(cls, K: int, C: int, seed: int = 0, scale: float = 1.0, decay: float = 0.99,
             laplace_eps: float = 1e-5, pinned_zero: bool = False) -> "Codebook":
        codes = rng_mod.derive(seed, "codebook.init").normal(0.0, scale, size=(K, C))
        if pinned_zero:
            codes[0] = 0.0
        cb = cls(codes, np.ones(K), np.zeros((K, C)), decay, laplace_eps,
                 pinned_zero=pinned_zero, seed=seed)
        cb.ema_embed_sum = codes * cb.smoothed_cluster_size()[:, None]
        return cb

    @classmethod
    def from_samples(cls, vectors: np.ndarray, K: int, seed: int = 0, decay: float = 0.99,
                     laplace_eps: float = 1e-5, pinned_zero: bool = False) -> "Codebook":
        """Initialise codes from randomly chosen rows of ``vectors`` (with replacement if short)."""
        vectors = np.asarray(vectors, dtype=np.float64)
        gen = rng_mod.derive(seed, "codebook.from_samples")
        pick = gen.choice(vectors.shape[0], size=K, replace=vectors.shape[0] < K)
        codes = vectors[pick] + 1e-3 * gen.standard_normal((K, vectors.shape[1]))
        if pinned_zero:
            codes[0] = 0.0
        cb = cls(codes, np.ones(K), np.zeros_like(codes), decay, laplace_eps,
                 pinned_zero=pinned_zero, seed=seed)
        cb.ema_embed_sum = codes * cb.smoothed_cluster_size()[:, None]
        return cb

    def smoothed_cluster_size(self) -> np.ndarray:
        n = self.ema_cluster_size.sum()
        return (self.ema_cluster_size + self.laplace_eps) / (n + self.K * self.laplace_eps) * n

    def tensors(self, prefix: str = "codebook") -> dict:
        return {
            f"{prefix}.codes": self.codes,
            f"{prefix}.ema_cluster_size": self.ema_cluster_size,
            f"{prefix}.ema_embed_sum": self.ema_embed_sum,
        }

    @classmethod
    def from_tensors(cls, t: dict, prefix: str = "codebook", **kw) -> "Codebook":
        return cls(t[f"{prefix}.codes"], t[f"{prefix}.ema_cluster_size"].copy(),
                   t[f"{prefix}.ema_embed_sum"].copy(), **kw)


@dataclass
class QuantizationResult:
    indices: np.ndarray       # grid of code ids, shape z.shape[1:]
    quantized: np.ndarray     # same shape as z
    commitment_loss: float
    perplexity: float


def _as_grid(z) -> np.ndarray:
    if isinstance(z, torch.Tensor):
        return z.detach().cpu().numpy().astype(np.float64)
    return np.asarray(getattr(z, "values", z), dtype=np.float64)


def nearest_codes(vectors: np.ndarray, codes: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Index of the nearest code for each row; exact squared differences, lowest index on ties."""
    vectors = np.asarray(vectors, dtype=np.float64)
    out = np.empty(vectors.shape[0], dtype=np.int64)
    for start in range(0, vectors.shape[0], chunk):
        v = vectors[start:start + chunk]
        d = np.sum((v[:, None, :] - codes[None, :, :]) ** 2, axis=-1)
        out[start:start + chunk] = np.argmin(d, axis=1)
    return out


def code_perplexity(indices, K: int) -> float:
    counts = np.bincount(np.asarray(indices).reshape(-1), minlength=K)
    p = counts[counts > 0] / counts.sum()
    return float(np.exp(-np.sum(p * np.log(p))))


def quantize(z, cb: Codebook) -> QuantizationResult:
    """Quantise a ``(C, ...)`` latent grid cell by cell."""
    g = _as_grid(z)
    if g.shape[0] != cb.C:
        raise InvalidInputError(f"latent has {g.shape[0]} channels, codebook has {cb.C}")
    vectors = np.moveaxis(g, 0, -1).reshape(-1, cb.C)
    idx = nearest_codes(vectors, cb.codes)
    q = np.moveaxis(cb.codes[idx].reshape(g.shape[1:] + (cb.C,)), -1, 0)
    return QuantizationResult(
        indices=idx.reshape(g.shape[1:]),
        quantized=q,
        commitment_loss=float(np.mean((g - q) ** 2)),
        perplexity=code_perplexity(idx, cb.K),
    )


def ema_update(cb: Codebook, z, indices) -> Codebook:
    """Move codes toward the (Laplace-smoothed) means of their assigned vectors.

    Mutates and returns ``cb``.  Codes whose smoothed size stays below
    ``DEAD_SIZE_THRESHOLD`` for ``DEAD_PATIENCE`` consecutive updates are
    reseeded from a random vector of the current batch.
    """
    g = _as_grid(z)
    vectors = np.moveaxis(g, 0, -1).reshape(-1, cb.C)
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if idx.size != vectors.shape[0]:
        raise InvalidInputError(f"{idx.size} indices for {vectors.shape[0]} latent vectors")
    counts = np.bincount(idx, minlength=cb.K).astype(np.float64)
    sums = np.zeros_like(cb.codes)
    np.add.at(sums, idx, vectors)

    gamma = cb.decay
    cb.ema_cluster_size = gamma * cb.ema_cluster_size + (1.0 - gamma) * counts
    cb.ema_embed_sum = gamma * cb.ema_embed_sum + (1.0 - gamma) * sums
    if cb.pinned_zero:
        cb.ema_embed_sum[0] = 0.0
    cb.usage_count += counts.astype(np.int64)
    cb.n_updates += 1

    smoothed = cb.smoothed_cluster_size()
    cb.dead_steps = np.where(smoothed < DEAD_SIZE_THRESHOLD, cb.dead_steps + 1, 0)
    dead = np.flatnonzero(cb.dead_steps >= DEAD_PATIENCE)
    if cb.pinned_zero:
        dead = dead[dead != 0]
    if dead.size and vectors.shape[0]:
        picks = cb._rng.integers(0, vectors.shape[0], size=dead.size)
        cb.ema_cluster_size[dead] = 1.0
        smoothed = cb.smoothed_cluster_size()
        cb.ema_embed_sum[dead] = vectors[picks] * smoothed[dead, None]
        cb.dead_steps[dead] = 0

    if smoothed.sum() > 0:
        cb.codes = cb.ema_embed_sum / smoothed[:, None]
    return cb


def residual_quantize(z, books: list, depth: int | None = None) -> list:
    """Quantise ``z`` with a stack of books, each on the previous residual."""
    if not books:
        raise ConfigError("residual quantisation needs at least one codebook")
    depth = len(books) if depth is None else depth
    if depth != len(books):
        raise ConfigError(f"depth {depth} does not match {len(books)} codebooks")
    residual = _as_grid(z)
    results = []
    for cb in books:
        r = quantize(residual, cb)
        results.append(r)
        residual = residual - r.quantized
    return results


def residual_energies(z, results: list) -> np.ndarray:
    """Squared L2 norm of the residual before layer 0 and after every layer."""
    residual = _as_grid(z)
    out = [float(np.sum(residual ** 2))]
    for r in results:
        residual = residual - r.quantized
        out.append(float(np.sum(residual ** 2)))
    return np.array(out)


def residual_indices(results: list) -> np.ndarray:
    """Stack per-layer index grids into ``(..., depth)`` tokens."""
    return np.stack([r.indices for r in results], axis=-1)


def straight_through(z, q):
    """Forward value is ``q``'s quantised values; the gradient flows to ``z`` unchanged.

    Works on torch tensors (autograd aware) and on plain arrays (forward only).
    """
    qv = q.quantized if isinstance(q, QuantizationResult) else q
    if isinstance(z, torch.Tensor):
        qt = qv if isinstance(qv, torch.Tensor) else torch.as_tensor(qv, dtype=z.dtype)
        if tuple(qt.shape) != tuple(z.shape):
            raise InvalidInputError(f"shape mismatch {tuple(z.shape)} vs {tuple(qt.shape)}")
        return _StraightThrough.apply(z, qt)
    zv = _as_grid(z)
    qv = np.asarray(qv, dtype=np.float64)
    if zv.shape != qv.shape:
        raise InvalidInputError(f"shape mismatch {zv.shape} vs {qv.shape}")
    return qv.copy()


class _StraightThrough(torch.autograd.Function):
    @staticmethod
    def forward(ctx, z, q):
        return q.detach().clone()

    @staticmethod
    def backward(ctx, grad):
        return grad, None
