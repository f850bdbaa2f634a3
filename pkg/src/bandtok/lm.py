"""Desk-scale decoder-only transformer over band-first token sequences.

Sequence layout: ``[conditioning prefix rows | BOS | frame 0 bands | frame 1 bands | ...]``.
Prefix rows are injected embeddings (a stand-in for a text encoder),
optionally followed by two sinusoidal rows encoding the segment start time
and the track duration.  Attention is causal over the whole sequence and
queries/keys are rotated with the interleaved token/time/band RoPE.

Everything runs in float64 so the autograd gradients can be checked
against central finite differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import rng as rng_mod
from .errors import ConfigError, InvalidInputError
from .rope import RopeConfig, apply_rotation, rope_angles
from .tokens import (AUDIO, PositionedSequence, TokenGrid, Vocab, assign_positions,
                     build_sequence, unflatten)


@dataclass
class MicroLmConfig:
    n_audio: int = 8192
    n_text: int = 0
    n_special: int = 2
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    rope_mode: str = "2d"                     # "2d" or "1d"
    rope_allocation: list | None = None       # overrides the default split in 2d mode
    rope_base: float = 10000.0
    segment_time: bool = True
    null_prob: float = 0.1                    # prefix -> null embedding during training
    init_scale: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.head_dim % 2:
            raise ConfigError("head_dim must be even for rotary embeddings")
        if self.rope_mode not in ("1d", "2d"):
            raise ConfigError(f"rope_mode must be '1d' or '2d', got {self.rope_mode!r}")
        if self.segment_time and self.d_model % 2:
            raise ConfigError("segment-time encoding needs an even d_model")
        self.rope  # validates the allocation

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def vocab(self) -> Vocab:
        return Vocab(self.n_text, self.n_special, self.n_audio)

    @property
    def rope(self) -> RopeConfig:
        if self.rope_mode == "1d":
            return RopeConfig.one_d(self.head_dim, self.rope_base)
        alloc = tuple(self.rope_allocation) if self.rope_allocation else None
        return RopeConfig(self.head_dim, alloc, self.rope_base)


@dataclass
class ConditioningPrefix:
    embeddings: np.ndarray                    # (P, d) text-encoder stand-in
    segment_start_s: float = 0.0
    track_duration_s: float = 10.0
    null_flag: bool = False

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        if self.embeddings.ndim != 2:
            raise InvalidInputError("prefix embeddings must be a P x d matrix")
        if not 0 <= self.segment_start_s <= self.track_duration_s or self.track_duration_s <= 0:
            raise InvalidInputError(
                f"need 0 <= start ({self.segment_start_s}) <= duration ({self.track_duration_s}), duration > 0")

    def null(self) -> "ConditioningPrefix":
        return ConditioningPrefix(self.embeddings, self.segment_start_s, self.track_duration_s, True)

    @classmethod
    def empty(cls, d: int, null_flag: bool = True) -> "ConditioningPrefix":
        return cls(np.zeros((0, d)), 0.0, 1.0, null_flag)


@dataclass
class SamplerConfig:
    guidance_scale: float = 2.0
    temperature: float = 1.0                  # 0 means greedy argmax
    top_k: int | None = 64
    seed: int = 0

    def __post_init__(self):
        if self.temperature < 0:
            raise ConfigError("temperature must be non-negative (0 selects argmax)")
        if self.guidance_scale < 0:
            raise ConfigError("guidance scale must be non-negative")
        if self.top_k is not None and self.top_k < 1:
            raise ConfigError("top_k must be a positive integer or None")


def segment_time_frequencies(d: int) -> np.ndarray:
    n = d // 2
    if n == 1:
        return np.array([1.0])
    return np.geomspace(1e-2, 1e2, n)


def encode_segment_time(start_s: float, duration_s: float, d: int) -> np.ndarray:
    """Two rows ``[sin(f0 t), cos(f0 t), sin(f1 t), ...]`` for t = start and t = duration."""
    if d <= 0 or d % 2:
        raise InvalidInputError(f"encoding width must be a positive even integer, got {d}")
    if start_s < 0 or start_s > duration_s:
        raise InvalidInputError(f"segment start {start_s} must lie in [0, duration={duration_s}]")
    freqs = segment_time_frequencies(d)
    rows = np.empty((2, d))
    for r, t in enumerate((start_s, duration_s)):
        rows[r, 0::2] = np.sin(freqs * t)
        rows[r, 1::2] = np.cos(freqs * t)
    return rows


def cfg_mix(l_cond, l_uncond, w: float):
    """Classifier-free guidance ``u + w (c - u)``, evaluated as ``(1-w) u + w c``
    so that w = 1 and w = 0 return the inputs exactly."""
    if tuple(np.shape(l_cond)) != tuple(np.shape(l_uncond)):
        raise InvalidInputError(f"logit shapes differ: {np.shape(l_cond)} vs {np.shape(l_uncond)}")
    return (1.0 - w) * l_uncond + w * l_cond


class Block(nn.Module):
    def __init__(self, d: int, d_ff: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.ln1 = nn.LayerNorm(d, dtype=torch.float64)
        self.wq = nn.Linear(d, d, bias=False, dtype=torch.float64)
        self.wk = nn.Linear(d, d, bias=False, dtype=torch.float64)
        self.wv = nn.Linear(d, d, bias=False, dtype=torch.float64)
        self.wo = nn.Linear(d, d, bias=False, dtype=torch.float64)
        self.ln2 = nn.LayerNorm(d, dtype=torch.float64)
        self.ff1 = nn.Linear(d, d_ff, dtype=torch.float64)
        self.ff2 = nn.Linear(d_ff, d, dtype=torch.float64)

    def forward(self, x, cos, sin, mask):
        n, L, d = x.shape
        hd = d // self.n_heads
        h = self.ln1(x)

        def heads(t):
            return t.view(n, L, self.n_heads, hd).transpose(1, 2)

        q = apply_rotation(heads(self.wq(h)), cos, sin)
        k = apply_rotation(heads(self.wk(h)), cos, sin)
        v = heads(self.wv(h))
        att = (q @ k.transpose(-1, -2)) / math.sqrt(hd)
        att = att.masked_fill(mask, float("-inf")).softmax(dim=-1)
        y = (att @ v).transpose(1, 2).reshape(n, L, d)
        x = x + self.wo(y)
        return x + self.ff2(F.gelu(self.ff1(self.ln2(x))))


class MicroLm(nn.Module):
    def __init__(self, cfg: MicroLmConfig | None = None):
        super().__init__()
        self.cfg = cfg or MicroLmConfig()
        c = self.cfg
        V = c.vocab.size
        self.tok_emb = nn.Parameter(torch.zeros(V, c.d_model, dtype=torch.float64))
        self.null_emb = nn.Parameter(torch.zeros(c.d_model, dtype=torch.float64))
        self.blocks = nn.ModuleList(Block(c.d_model, c.d_ff, c.n_heads) for _ in range(c.n_layers))
        self.ln_f = nn.LayerNorm(c.d_model, dtype=torch.float64)
        self.out = nn.Linear(c.d_model, V, dtype=torch.float64)
        self.reset_parameters(c.seed, c.init_scale)

    def reset_parameters(self, seed: int, scale: float):
        gen = rng_mod.derive(seed, "lm.init")
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name == "null_emb":
                    p.zero_()
                elif name.endswith("ln1.weight") or name.endswith("ln2.weight") or name == "ln_f.weight":
                    p.fill_(1.0)
                elif "ln" in name or name.endswith(".bias"):
                    p.zero_()
                else:
                    p.copy_(torch.from_numpy(gen.normal(0.0, scale, size=tuple(p.shape))))

    def zero_(self):
        with torch.no_grad():
            for p in self.parameters():
                p.zero_()
        return self

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    # -- building blocks --------------------------------------------------

    def prefix_rows(self, prefix: ConditioningPrefix) -> torch.Tensor:
        """(P', d) prefix embeddings; null prefixes use the learned null vector."""
        d = self.cfg.d_model
        if prefix.embeddings.shape[1] != d and prefix.embeddings.shape[0]:
            raise InvalidInputError(f"prefix width {prefix.embeddings.shape[1]} != d_model {d}")
        n_rows = prefix.embeddings.shape[0] + (2 if self.cfg.segment_time else 0)
        if prefix.null_flag:
            return self.null_emb.expand(n_rows, d)
        rows = torch.as_tensor(prefix.embeddings.reshape(-1, d), dtype=torch.float64)
        if self.cfg.segment_time:
            st = encode_segment_time(prefix.segment_start_s, prefix.track_duration_s, d)
            rows = torch.cat([rows, torch.as_tensor(st)], dim=0)
        return rows

    def prefix_len(self, prefix: ConditioningPrefix) -> int:
        return prefix.embeddings.shape[0] + (2 if self.cfg.segment_time else 0)

    def rope_tables(self, positions: np.ndarray):
        ang = torch.as_tensor(rope_angles(positions, self.cfg.rope))
        return torch.cos(ang), torch.sin(ang)

    def forward_batch(self, tokens: torch.Tensor, positions: np.ndarray, prefix_rows: torch.Tensor,
                      region: np.ndarray | None = None) -> torch.Tensor:
        """Logits for a batch sharing one layout.

        tokens: (N, L) ids; positions: (L, 3); prefix_rows: (N, P, d) placed in
        the first P slots.
        """
        n, L = tokens.shape
        P = prefix_rows.shape[1]
        V = self.cfg.vocab.size
        if L and (int(tokens[:, P:].min()) < 0 or int(tokens[:, P:].max()) >= V):
            raise InvalidInputError(f"token id out of range [0, {V})")
        x = torch.cat([prefix_rows, self.tok_emb[tokens[:, P:]]], dim=1)
        cos, sin = self.rope_tables(positions)
        mask = torch.ones(L, L, dtype=torch.bool).triu(1)
        for blk in self.blocks:
            x = blk(x, cos, sin, mask)
        return self.out(self.ln_f(x))

    def forward(self, seq: PositionedSequence, prefix: ConditioningPrefix) -> torch.Tensor:
        rows = self.prefix_rows(prefix)
        if rows.shape[0] != seq.prefix_len:
            raise InvalidInputError(f"sequence reserves {seq.prefix_len} prefix slots, prefix has {rows.shape[0]}")
        tokens = torch.as_tensor(seq.tokens)[None]
        return self.forward_batch(tokens, seq.positions.stack(), rows[None])[0]

    # -- checkpoint helpers ----------------------------------------------

    def tensors(self, prefix: str = "lm") -> dict:
        return {f"{prefix}.{k}": v for k, v in self.state_dict().items()}

    def load_tensors(self, t: dict, prefix: str = "lm"):
        state = {}
        for k, v in self.state_dict().items():
            key = f"{prefix}.{k}"
            if key not in t:
                raise KeyError(key)
            if tuple(t[key].shape) != tuple(v.shape):
                raise ValueError(f"{key}: shape {tuple(t[key].shape)} != expected {tuple(v.shape)}")
            state[k] = torch.as_tensor(t[key], dtype=torch.float64)
        self.load_state_dict(state)
        return self


def forward(seq: PositionedSequence, prefix: ConditioningPrefix, params: MicroLm) -> np.ndarray:
    with torch.no_grad():
        return params(seq, prefix).numpy()


def sequence_for(model: MicroLm, prefix: ConditioningPrefix, grid, band_count: int | None = None) -> PositionedSequence:
    B = grid.band_count if isinstance(grid, TokenGrid) else band_count
    return build_sequence(model.prefix_len(prefix), grid, B, model.cfg.vocab)


def nll_from_logits(logits: torch.Tensor, tokens: torch.Tensor, start: int) -> torch.Tensor:
    """-log p(token[i] | < i) for i >= start; logits/tokens are (..., L, V) / (..., L)."""
    logp = logits[..., start - 1:-1, :].log_softmax(dim=-1)
    return -logp.gather(-1, tokens[..., start:, None]).squeeze(-1)


def teacher_forced_nll(seq: PositionedSequence, prefix: ConditioningPrefix, params: MicroLm) -> np.ndarray:
    """Per-audio-token NLL in nats, aligned with the band-first audio tokens."""
    if len(seq) < 2:
        raise InvalidInputError("teacher forcing needs at least two tokens")
    with torch.no_grad():
        logits = params(seq, prefix)
        nll = nll_from_logits(logits, torch.as_tensor(seq.tokens), seq.prefix_len + 1)
    return nll.numpy()


def perplexity(nll) -> float:
    return float(np.exp(np.mean(nll)))


def _sample_from_logits(logits: np.ndarray, cfg: SamplerConfig, gen: np.random.Generator) -> int:
    if cfg.temperature == 0:
        return int(np.argmax(logits))
    z = logits / cfg.temperature
    if cfg.top_k is not None and cfg.top_k < np.isfinite(z).sum():
        kth = np.sort(z)[-cfg.top_k]
        z = np.where(z >= kth, z, -np.inf)
    z = z - np.max(z)
    p = np.exp(z)
    cdf = np.cumsum(p)
    u = gen.random() * cdf[-1]
    return int(min(np.searchsorted(cdf, u, side="right"), len(p) - 1))


def sample(prefix: ConditioningPrefix, params: MicroLm, cfg: SamplerConfig, max_frames: int,
           band_count: int, frame_rate_hz: float = 44100 / 512 / 8,
           null_prefix: ConditioningPrefix | None = None) -> TokenGrid:
    """Generate ``max_frames`` frames of band tokens with classifier-free guidance.

    Each step runs the model on the conditional and the null prefix, mixes the
    logits, restricts them to audio ids and samples with a seeded generator.
    Setting ``guidance_scale == 1`` skips the null pass (the mix would return
    the conditional logits exactly anyway).
    """
    if max_frames < 1:
        raise InvalidInputError("max_frames must be >= 1")
    vocab = params.cfg.vocab
    null_prefix = null_prefix or prefix.null()
    gen = rng_mod.derive(cfg.seed, "sampler")
    P = params.prefix_len(prefix)
    cond_rows = params.prefix_rows(prefix)[None]
    null_rows = params.prefix_rows(null_prefix)[None]
    total = max_frames * band_count
    positions = assign_positions(P + 1, max_frames, band_count).stack()
    tokens = np.zeros(P + 1 + total, dtype=np.int64)
    tokens[P] = vocab.bos_id()
    lo, hi = vocab.audio_offset, vocab.size
    out = np.empty(total, dtype=np.int64)
    with torch.no_grad():
        for i in range(total):
            L = P + 1 + i
            tok = torch.as_tensor(tokens[:L])[None]
            l_cond = params.forward_batch(tok, positions[:L], cond_rows)[0, -1].numpy()
            if cfg.guidance_scale == 1.0:
                mixed = l_cond
            else:
                l_unc = params.forward_batch(tok, positions[:L], null_rows)[0, -1].numpy()
                mixed = cfg_mix(l_cond, l_unc, cfg.guidance_scale)
            code = _sample_from_logits(mixed[lo:hi], cfg, gen)
            out[i] = code
            tokens[L] = code + lo
    return unflatten(out, band_count, vocab.n_audio, frame_rate_hz)
