"""Desk-scale training loops for the tokenizer and the micro LM, plus the
synthetic corpora they run on."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from . import rng as rng_mod
from .codec import CodecConfig, LatentCodec
from .dsp import FrontendConfig, Waveform, compute_log_mel
from .errors import InvalidInputError
from .lm import ConditioningPrefix, MicroLm, nll_from_logits
from .losses import (CriticConfig, LossWeights, MultiScaleCritic, composite_loss,
                     critic_forward, gan_losses)
from .tokens import assign_positions, build_sequence
from .vq import Codebook, ema_update, nearest_codes, straight_through

log = logging.getLogger(__name__)


def inverse_lr(step: int, inv_gamma: float, power: float, warmup: float) -> float:
    """Multiplier ``(1 - warmup ** (step + 1)) * (1 + step / inv_gamma) ** -power``."""
    return (1.0 - warmup ** (step + 1)) * (1.0 + step / inv_gamma) ** -power


@dataclass
class OptimConfig:
    lr: float
    betas: tuple
    inv_gamma: float
    power: float = 0.5
    warmup: float = 0.999
    weight_decay: float = 0.0

    def build(self, params, adamw: bool = False):
        cls = torch.optim.AdamW if adamw else torch.optim.Adam
        opt = cls(params, lr=self.lr, betas=tuple(self.betas), weight_decay=self.weight_decay)
        sched = torch.optim.lr_scheduler.LambdaLR(
            opt, lambda s: inverse_lr(s, self.inv_gamma, self.power, self.warmup))
        return opt, sched


class JsonlLog:
    """Collects per-step records and optionally appends them to a file."""

    def __init__(self, path=None):
        self.records = []
        self._fh = open(path, "w") if path else None

    def write(self, **record):
        record = {k: (float(v.detach()) if isinstance(v, torch.Tensor) else float(v) if isinstance(v, np.floating) else v) for k, v in record.items()}
        self.records.append(record)
        if self._fh:
            self._fh.write(json.dumps(record, sort_keys=True) + "\n")

    def close(self):
        if self._fh:
            self._fh.close()


# ---------------------------------------------------------------------------
# Synthetic audio


def synthetic_waveform(seed: int, n_samples: int, sample_rate_hz: int = 44100) -> Waveform:
    """A few decaying harmonic notes over a noise floor."""
    gen = rng_mod.derive(seed, "synthetic.audio")
    t = np.arange(n_samples) / sample_rate_hz
    x = 0.01 * gen.standard_normal(n_samples)
    for _ in range(gen.integers(2, 5)):
        f0 = 55.0 * 2 ** (gen.integers(0, 48) / 12)
        onset = gen.uniform(0, t[-1] * 0.6)
        env = np.where(t >= onset, np.exp(-(t - onset) * gen.uniform(1.0, 6.0)), 0.0)
        for h in range(1, 6):
            if f0 * h < sample_rate_hz / 2:
                x += env * gen.uniform(0.05, 0.2) / h * np.sin(2 * np.pi * f0 * h * t + gen.uniform(0, 2 * np.pi))
    return Waveform(np.clip(x / max(1.0, np.max(np.abs(x))), -1, 1), sample_rate_hz)


def synthetic_mel_batch(seed: int, n_clips: int, n_frames: int, frontend: FrontendConfig) -> np.ndarray:
    n_samples = n_frames * frontend.hop_samples
    mels = [compute_log_mel(synthetic_waveform(seed * 1000 + i, n_samples, frontend.sample_rate_hz), frontend).values
            for i in range(n_clips)]
    return np.stack(mels)


# ---------------------------------------------------------------------------
# Tokenizer


@dataclass
class TokenizerTrainConfig:
    steps: int = 200
    batch: int = 4
    ms_patchgan: bool = True
    codebook_loss: bool = False
    codebook_loss_weight: float = 1.0
    optim: OptimConfig = field(default_factory=lambda: OptimConfig(2e-4, (0.8, 0.99), 200_000.0))
    critic_optim: OptimConfig = field(default_factory=lambda: OptimConfig(2e-4, (0.8, 0.99), 200_000.0))
    seed: int = 0


@dataclass
class TokenizerState:
    codec: LatentCodec
    codebook: Codebook
    critic: MultiScaleCritic
    history: list


def quantize_tensor(z: torch.Tensor, codes: torch.Tensor):
    """Nearest codes for a (N, C, T', F') latent; returns (indices, quantized)."""
    flat = z.detach().permute(0, 2, 3, 1).reshape(-1, z.shape[1]).numpy()
    idx = nearest_codes(flat, codes.detach().numpy())
    q = codes[torch.as_tensor(idx)].view(z.shape[0], z.shape[2], z.shape[3], z.shape[1]).permute(0, 3, 1, 2)
    return idx.reshape(z.shape[0], z.shape[2], z.shape[3]), q


def train_tokenizer(data: np.ndarray, codec_cfg: CodecConfig, codebook: Codebook,
                    critic_cfg: CriticConfig, weights: LossWeights, cfg: TokenizerTrainConfig,
                    logger: JsonlLog | None = None) -> TokenizerState:
    """Alternating critic / generator updates on log-Mel clips ``(M, T, F)``."""
    if data.ndim != 3 or data.shape[0] == 0:
        raise InvalidInputError("training data must be a non-empty (clips, T, F) array")
    logger = logger or JsonlLog()
    if not cfg.ms_patchgan:
        critic_cfg = CriticConfig(**{**critic_cfg.__dict__, "scales": [1.0]})
    codec = LatentCodec(codec_cfg)
    critic = MultiScaleCritic(critic_cfg)
    codes = torch.nn.Parameter(torch.as_tensor(codebook.codes.copy()), requires_grad=cfg.codebook_loss)
    gen_params = list(codec.parameters()) + ([codes] if cfg.codebook_loss else [])
    opt, sched = cfg.optim.build(gen_params)
    c_opt, c_sched = cfg.critic_optim.build(critic.parameters())
    pick = rng_mod.derive(cfg.seed, "tokenizer.batches")
    data_t = torch.as_tensor(data, dtype=torch.float64)

    for step in range(cfg.steps):
        sel = pick.choice(data.shape[0], size=min(cfg.batch, data.shape[0]), replace=False)
        x = data_t[np.sort(sel)]
        z = codec.encode_tensor(x)
        idx, q = quantize_tensor(z, codes)
        zq = straight_through(z, q.detach())
        x_hat = codec.decode_tensor(zq, x.shape[1])

        # critic update
        real = critic_forward(x, critic)
        fake = critic_forward(x_hat.detach(), critic)
        _, c_loss, _ = gan_losses([o.score for o in real], [o.score for o in fake],
                                  [o.features for o in real], [o.features for o in fake])
        c_opt.zero_grad()
        c_loss.backward()
        c_opt.step()
        c_sched.step()

        # generator update
        commit = F.mse_loss(z, q.detach())
        real = critic_forward(x, critic)
        fake = critic_forward(x_hat, critic)
        total, terms = composite_loss(x, x_hat, commit, real, fake, weights)
        objective = total
        if cfg.codebook_loss:
            cb_loss = F.mse_loss(q, z.detach())
            objective = total + cfg.codebook_loss_weight * cb_loss
        opt.zero_grad()
        objective.backward()
        critic.zero_grad(set_to_none=True)
        opt.step()
        sched.step()

        if cfg.codebook_loss:
            codebook.codes = codes.detach().numpy().copy()
            codebook.usage_count += np.bincount(idx.reshape(-1), minlength=codebook.K)
        else:
            ema_update(codebook, z.detach().permute(1, 0, 2, 3), idx)
            with torch.no_grad():
                codes.copy_(torch.as_tensor(codebook.codes))

        logger.write(step=step, total=total, critic=c_loss, lr=sched.get_last_lr()[0],
                     **{k: v for k, v in terms.items()},
                     code_perplexity=float(np.exp(_entropy(idx, codebook.K))))
    return TokenizerState(codec, codebook, critic, logger.records)


def _entropy(idx, K):
    counts = np.bincount(np.asarray(idx).reshape(-1), minlength=K)
    p = counts[counts > 0] / counts.sum()
    return -np.sum(p * np.log(p))


def fit_codebook(latents: np.ndarray, codebook: Codebook, passes: int = 20) -> Codebook:
    """Run EMA updates over a fixed set of ``(C, ...)`` latents (k-means-like)."""
    flat = np.moveaxis(latents, 0, -1).reshape(-1, codebook.C)
    for _ in range(passes):
        idx = nearest_codes(flat, codebook.codes)
        ema_update(codebook, flat.T, idx)
    return codebook


# ---------------------------------------------------------------------------
# Language model


def synthetic_band_corpus(n_seqs: int, frames: int, B: int, K: int, seed: int = 0,
                          noise: float = 0.0) -> np.ndarray:
    """(n_seqs, frames, B) grids where token[t, b] = (a + t + 2b) mod K.

    Only the start offset ``a`` is random, so everything after the first token
    is predictable.  ``noise`` replaces that fraction of tokens uniformly.
    """
    gen = rng_mod.derive(seed, "corpus.band")
    a = gen.integers(0, K, size=n_seqs)
    t = np.arange(frames)[:, None]
    b = np.arange(B)[None, :]
    grids = (a[:, None, None] + t + 2 * b) % K
    if noise:
        flip = gen.random(grids.shape) < noise
        grids = np.where(flip, gen.integers(0, K, size=grids.shape), grids)
    return grids.astype(np.int64)


@dataclass
class LmTrainConfig:
    steps: int = 300
    optim: OptimConfig = field(default_factory=lambda: OptimConfig(5e-5, (0.9, 0.95), 1_000_000.0))
    prefix_rows: int = 2
    seed: int = 0


def corpus_batch(model: MicroLm, grids: np.ndarray, prefixes: list):
    """Token tensor, positions, prefix-row tensor and NLL start index for a corpus."""
    n, frames, B = grids.shape
    P = model.prefix_len(prefixes[0])
    seqs = [build_sequence(P, g.reshape(-1), B, model.cfg.vocab) for g in grids]
    tokens = torch.as_tensor(np.stack([s.tokens for s in seqs]))
    return tokens, seqs[0].positions.stack(), P + 1


def random_prefixes(n: int, rows: int, d: int, seed: int, durations=(30.0, 240.0)) -> list:
    gen = rng_mod.derive(seed, "corpus.prefix")
    out = []
    for _ in range(n):
        dur = gen.uniform(*durations)
        out.append(ConditioningPrefix(gen.normal(0, 1, size=(rows, d)), gen.uniform(0, dur), dur))
    return out


def train_lm(model: MicroLm, grids: np.ndarray, prefixes: list, cfg: LmTrainConfig,
             logger: JsonlLog | None = None) -> list:
    """Full-batch training with prefix dropout to the null embedding."""
    logger = logger or JsonlLog()
    tokens, positions, start = corpus_batch(model, grids, prefixes)
    drop = rng_mod.derive(cfg.seed, "lm.null_prefix")
    opt, sched = cfg.optim.build(model.parameters(), adamw=True)
    for step in range(cfg.steps):
        keep = drop.random(len(prefixes)) >= model.cfg.null_prob
        rows = torch.stack([model.prefix_rows(p if k else p.null()) for p, k in zip(prefixes, keep)])
        logits = model.forward_batch(tokens, positions, rows)
        loss = nll_from_logits(logits, tokens, start).mean()
        opt.zero_grad()
        loss.backward()
        grad_norm = torch.sqrt(sum((p.grad ** 2).sum() for p in model.parameters() if p.grad is not None))
        opt.step()
        sched.step()
        logger.write(step=step, nll=loss, grad_norm=grad_norm)
    return logger.records


def corpus_nll(model: MicroLm, grids: np.ndarray, prefixes: list) -> torch.Tensor:
    """Teacher-forced NLL, shape (n_seqs, frames * B)."""
    tokens, positions, start = corpus_batch(model, grids, prefixes)
    with torch.no_grad():
        rows = torch.stack([model.prefix_rows(p) for p in prefixes])
        return nll_from_logits(model.forward_batch(tokens, positions, rows), tokens, start)
