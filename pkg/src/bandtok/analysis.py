"""Token-geometry diagnostics: pairwise NMI between token axes, per-axis
teacher-forced perplexity profiles, and codebook usage.

Entropies are plug-in estimates in nats.  Counts are sorted before summing so
that any two variables with the same count multiset (e.g. a column and an
injective relabelling of it) get bitwise-identical entropies.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import InvalidInputError
from .lm import ConditioningPrefix, MicroLm, nll_from_logits
from .tokens import TokenGrid, build_sequence


def entropy_from_counts(counts) -> float:
    c = np.sort(np.asarray(counts, dtype=np.int64).reshape(-1))
    c = c[c > 0]
    n = c.sum()
    if n == 0:
        return 0.0
    p = c / n
    return float(-np.sum(p * np.log(p)))


def _codes(col):
    _, inv = np.unique(col, return_inverse=True)
    return inv.reshape(-1)


def _joint_entropy(a: np.ndarray, b: np.ndarray) -> float:
    nb = int(b.max()) + 1
    return entropy_from_counts(np.bincount(a * nb + b))


def pair_nmi(x, y) -> float:
    """NMI of two aligned discrete samples (0 if either is constant)."""
    return float(nmi(np.stack([np.asarray(x).reshape(-1), np.asarray(y).reshape(-1)], axis=1)).values[0, 1])


@dataclass
class NmiMatrix:
    values: np.ndarray
    labels: list

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([""] + self.labels)
        for label, row in zip(self.labels, self.values):
            w.writerow([label] + [f"{v:.10f}" for v in row])
        return buf.getvalue()

    def to_json(self) -> dict:
        return {"labels": self.labels, "values": self.values.tolist()}

    def mean_off_diagonal(self) -> float:
        A = self.values.shape[0]
        if A < 2:
            return 0.0
        return float((self.values.sum() - np.trace(self.values)) / (A * (A - 1)))


def nmi(samples, labels=None) -> NmiMatrix:
    """Pairwise NMI between the columns of an N x A integer matrix."""
    s = np.asarray(samples)
    if s.ndim != 2 or s.shape[0] < 2:
        raise InvalidInputError(f"need an N x A sample matrix with N >= 2, got shape {s.shape}")
    A = s.shape[1]
    codes = [_codes(s[:, i]) for i in range(A)]
    h = [entropy_from_counts(np.bincount(c)) for c in codes]
    out = np.zeros((A, A))
    for i in range(A):
        out[i, i] = 1.0
        for j in range(i + 1, A):
            if h[i] == 0.0 or h[j] == 0.0:
                v = 0.0
            else:
                mi = h[i] + h[j] - _joint_entropy(codes[i], codes[j])
                v = min(max(mi / np.sqrt(h[i] * h[j]), 0.0), 1.0)
            out[i, j] = out[j, i] = v
    return NmiMatrix(out, list(labels) if labels else [f"axis{i}" for i in range(A)])


def grid_samples(grids, offset: int = 0):
    """Pool (T x A) grids into NMI samples.

    With ``offset == 0`` each frame is one sample of the A axes.  With
    ``offset > 0`` the columns are the A axes at frame t followed by the A
    axes at frame t + offset.
    """
    mats = [g.indices if isinstance(g, TokenGrid) else np.asarray(g) for g in grids]
    if not mats:
        raise InvalidInputError("empty corpus")
    if offset == 0:
        return np.concatenate(mats, axis=0)
    parts = [np.concatenate([m[:-offset], m[offset:]], axis=1) for m in mats if m.shape[0] > offset]
    if not parts:
        raise InvalidInputError(f"no grid has more than {offset} frames")
    return np.concatenate(parts, axis=0)


def grid_nmi(grids, offset: int = 0, axis_name: str = "band") -> NmiMatrix:
    s = grid_samples(grids, offset)
    A = s.shape[1] if offset == 0 else s.shape[1] // 2
    if offset == 0:
        return nmi(s, [f"{axis_name}{i}" for i in range(A)])
    full = nmi(s)
    labels = [f"{axis_name}{i}@t" for i in range(A)]
    return NmiMatrix(full.values[:A, A:].copy(), labels)


@dataclass
class PplProfile:
    raw_ppl: np.ndarray
    normalized: np.ndarray = field(default=None)
    axis: str = "band"

    def __post_init__(self):
        self.raw_ppl = np.asarray(self.raw_ppl, dtype=np.float64)
        if self.normalized is None:
            self.normalized = normalize_profile(self.raw_ppl)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([self.axis, "raw_ppl", "normalized"])
        for i, (r, n) in enumerate(zip(self.raw_ppl, self.normalized)):
            w.writerow([i, f"{r:.10f}", f"{n:.10f}"])
        return buf.getvalue()

    def to_json(self) -> dict:
        return {"axis": self.axis, "raw_ppl": self.raw_ppl.tolist(), "normalized": self.normalized.tolist()}


def normalize_profile(raw) -> np.ndarray:
    raw = np.asarray(raw, dtype=np.float64)
    lo, hi = raw.min(), raw.max()
    if hi > lo:
        return (raw - lo) / (hi - lo)
    return np.zeros_like(raw)


def ppl_profile(grids, model: MicroLm, axis: str = "band", prefixes: list | None = None) -> PplProfile:
    """Per-axis teacher-forced perplexity over a corpus of (T x A) token grids.

    The grid's columns are flattened column-fastest, so for band grids the
    axis is the Mel band and for residual stacks it is the quantizer layer.
    Without explicit prefixes every sequence is scored under the null prefix.
    """
    if axis not in ("band", "layer"):
        raise InvalidInputError(f"axis must be 'band' or 'layer', got {axis!r}")
    mats = [g.indices if isinstance(g, TokenGrid) else np.asarray(g) for g in grids]
    if not mats:
        raise InvalidInputError("empty corpus")
    A = mats[0].shape[1]
    sums = np.zeros(A)
    counts = np.zeros(A)
    d = model.cfg.d_model
    prefixes = prefixes or [ConditioningPrefix.empty(d)] * len(mats)
    with torch.no_grad():
        for i, m in enumerate(mats):
            seq = build_sequence(model.prefix_len(prefixes[i]), m.reshape(-1), A, model.cfg.vocab)
            logits = model(seq, prefixes[i])
            nll = nll_from_logits(logits, torch.as_tensor(seq.tokens), seq.prefix_len + 1).numpy()
            axis_idx = seq.audio_band_index()
            sums += np.bincount(axis_idx, weights=nll, minlength=A)
            counts += np.bincount(axis_idx, minlength=A)
    return PplProfile(np.exp(sums / counts), axis=axis)


@dataclass
class UsageStats:
    histogram: np.ndarray
    perplexity: float
    dead: int

    def to_json(self) -> dict:
        return {"histogram": self.histogram.tolist(), "perplexity": self.perplexity, "dead": self.dead}


def usage_stats(indices, K: int) -> UsageStats:
    idx = np.concatenate([np.asarray(getattr(g, "indices", g)).reshape(-1) for g in indices]) \
        if isinstance(indices, (list, tuple)) else np.asarray(indices).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= K):
        raise InvalidInputError(f"indices must lie in [0, {K})")
    hist = np.bincount(idx, minlength=K)
    return UsageStats(hist, float(np.exp(entropy_from_counts(hist))) if idx.size else 1.0,
                      int(np.sum(hist == 0)))


def ascii_heat_table(m: np.ndarray, labels=None, ramp: str = " .:-=+*#%@") -> str:
    """Render a [0, 1] matrix as a character heat map with numeric rows."""
    m = np.asarray(m, dtype=np.float64)
    labels = labels or [str(i) for i in range(m.shape[0])]
    width = max(len(s) for s in labels)
    lines = []
    for label, row in zip(labels, m):
        cells = "".join(ramp[min(int(np.clip(v, 0, 1) * (len(ramp) - 1) + 0.5), len(ramp) - 1)] * 2 for v in row)
        lines.append(f"{label:>{width}} |{cells}| " + " ".join(f"{v:.2f}" for v in row))
    return "\n".join(lines)


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True)
