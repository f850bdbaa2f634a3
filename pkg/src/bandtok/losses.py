"""Tokenizer training objective.

total = w_rec * L1(x, x_hat) + w_perc * perceptual + w_adv * adversarial
        + w_fm * feature_matching + w_commit * commitment

with weights 5.0 / 1.0 / 1.0 / 5.0 / 2.5.  The adversarial and
feature-matching terms come from one PatchGAN critic per spectrogram scale;
each scale sees the Mel spectrogram resized by bilinear interpolation.
Critics use hinge losses.  The perceptual term is a plug-in that returns
zero unless one is supplied.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import rng as rng_mod
from .dsp import LogMelSpectrogram
from .errors import InvalidInputError

log = logging.getLogger(__name__)


@dataclass
class LossWeights:
    rec: float = 5.0
    perc: float = 1.0
    adv: float = 1.0
    fm: float = 5.0
    commit: float = 2.5

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not math.isfinite(v) or v < 0:
                raise InvalidInputError(f"loss weight {k}={v} must be finite and non-negative")


# ---------------------------------------------------------------------------
# Bilinear resize


def _out_size(n: int, scale: float) -> int:
    return max(1, int(math.floor(n * scale + 0.5)))


def interpolation_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic linear interpolation weights with half-pixel centres."""
    w = np.zeros((n_out, n_in))
    ratio = n_in / n_out
    for i in range(n_out):
        src = min(max((i + 0.5) * ratio - 0.5, 0.0), n_in - 1)
        lo = int(math.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        w[i, lo] += 1.0 - frac
        w[i, hi] += frac
    return w


def resize_bilinear(m, scale: float):
    """Resize the two trailing axes by ``scale`` (numpy arrays or torch tensors)."""
    if not scale > 0:
        raise InvalidInputError(f"scale must be positive, got {scale}")
    t, f = m.shape[-2:]
    to, fo = _out_size(t, scale), _out_size(f, scale)
    if (to, fo) == (t, f):
        return m.clone() if isinstance(m, torch.Tensor) else np.array(m, dtype=np.float64)
    rt, rf = interpolation_matrix(t, to), interpolation_matrix(f, fo)
    if isinstance(m, torch.Tensor):
        rt = torch.as_tensor(rt, dtype=m.dtype)
        rf = torch.as_tensor(rf, dtype=m.dtype)
        return rt @ m @ rf.T
    return rt @ np.asarray(m, dtype=np.float64) @ rf.T


# ---------------------------------------------------------------------------
# Multi-scale PatchGAN


@dataclass
class CriticConfig:
    channels: list = field(default_factory=lambda: [16, 32, 64, 1])
    kernel: int = 4
    stride: int = 2
    padding: int = 1
    leaky_slope: float = 0.2
    scales: list = field(default_factory=lambda: [1.0, 0.5, 0.25])
    seed: int = 0


class PatchCritic(nn.Module):
    def __init__(self, cfg: CriticConfig, seed_name: str):
        super().__init__()
        self.cfg = cfg
        widths = [1] + list(cfg.channels)
        self.convs = nn.ModuleList(
            nn.Conv2d(widths[i], widths[i + 1], cfg.kernel, cfg.stride, cfg.padding, dtype=torch.float64)
            for i in range(len(cfg.channels)))
        gen = rng_mod.derive(cfg.seed, seed_name)
        with torch.no_grad():
            for conv in self.convs:
                s = 1.0 / math.sqrt(conv.in_channels * cfg.kernel ** 2)
                conv.weight.copy_(torch.from_numpy(gen.uniform(-s, s, size=tuple(conv.weight.shape))))
                conv.bias.copy_(torch.from_numpy(gen.uniform(-s, s, size=tuple(conv.bias.shape))))

    def output_shape(self, t: int, f: int) -> list:
        """Spatial dims after every layer."""
        shapes = []
        for _ in self.convs:
            t = (t + 2 * self.cfg.padding - self.cfg.kernel) // self.cfg.stride + 1
            f = (f + 2 * self.cfg.padding - self.cfg.kernel) // self.cfg.stride + 1
            shapes.append((t, f))
        return shapes

    def forward(self, x):
        """(N, 1, T, F) -> (score map, [hidden feature maps])."""
        feats = []
        h = x
        for i, conv in enumerate(self.convs):
            h = conv(h)
            if i < len(self.convs) - 1:
                h = F.leaky_relu(h, self.cfg.leaky_slope)
                feats.append(h)
        return h, feats


class MultiScaleCritic(nn.Module):
    def __init__(self, cfg: CriticConfig | None = None):
        super().__init__()
        self.cfg = cfg or CriticConfig()
        self.critics = nn.ModuleList(PatchCritic(self.cfg, f"critic.{i}") for i in range(len(self.cfg.scales)))

    def zero_(self):
        with torch.no_grad():
            for p in self.parameters():
                p.zero_()
        return self

    def tensors(self, prefix: str = "critic") -> dict:
        return {f"{prefix}.{k}": v for k, v in self.state_dict().items()}


@dataclass
class CriticOutput:
    scale: float
    score: torch.Tensor
    features: list


def critic_forward(m, critic: MultiScaleCritic, skipped: list | None = None) -> list:
    """Score maps and features for every scale whose resized input survives the stack.

    ``m`` is (T, F) or (N, T, F).  Scales too small for the receptive field
    are skipped and recorded in ``skipped`` (and logged).
    """
    x = m if isinstance(m, torch.Tensor) else torch.as_tensor(np.asarray(m, dtype=np.float64))
    if x.dim() == 2:
        x = x[None]
    outputs = []
    for scale, net in zip(critic.cfg.scales, critic.critics):
        xs = resize_bilinear(x, scale)
        if min(min(s) for s in net.output_shape(*xs.shape[-2:])) < 1:
            msg = f"scale {scale}: input {tuple(xs.shape[-2:])} smaller than the critic receptive field"
            log.warning(msg)
            if skipped is not None:
                skipped.append(msg)
            continue
        score, feats = net(xs[:, None])
        outputs.append(CriticOutput(scale, score, feats))
    if not outputs:
        raise InvalidInputError(f"input of shape {tuple(x.shape[-2:])} is too small for every critic scale")
    return outputs


def gan_losses(real_scores, fake_scores, real_features, fake_features):
    """Hinge losses averaged over scales.

    Returns ``(generator_adv, critic, feature_matching)``; the feature term is
    the mean over all scales and layers of the mean absolute difference.
    """
    if len(real_scores) != len(fake_scores) or len(real_features) != len(fake_features) \
            or len(real_scores) != len(real_features):
        raise InvalidInputError("real and fake critic outputs cover different numbers of scales")
    n = len(real_scores)
    adv = sum(-fake.mean() for fake in fake_scores) / n
    critic = sum(F.relu(1 - real).mean() + F.relu(1 + fake).mean()
                 for real, fake in zip(real_scores, fake_scores)) / n
    pairs = [(r, f) for rs, fs in zip(real_features, fake_features) for r, f in zip(rs, fs)]
    fm = sum((r - f).abs().mean() for r, f in pairs) / len(pairs) if pairs else real_scores[0].new_zeros(())
    return adv, critic, fm


def zero_perceptual(x, x_hat):
    return x_hat.new_zeros(()) if isinstance(x_hat, torch.Tensor) else 0.0


def composite_loss(x, x_hat, commitment, real_out: list, fake_out: list,
                   weights: LossWeights | None = None,
                   perceptual: Callable = zero_perceptual, detach_real: bool = True):
    """Weighted tokenizer objective; returns ``(total, unweighted terms)``.

    ``commitment`` is a QuantizationResult, a float, or a tensor carrying
    gradient to the encoder.  Feature matching compares fake features with
    detached real ones unless ``detach_real`` is off (used by gradient checks
    that differentiate the whole function w.r.t. critic weights).
    """
    w = weights or LossWeights()
    x, x_hat = _tensor(x), _tensor(x_hat)
    if x.shape != x_hat.shape:
        raise InvalidInputError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    commit = getattr(commitment, "commitment_loss", commitment)
    commit = commit if isinstance(commit, torch.Tensor) else x_hat.new_tensor(float(commit))
    terms = {"rec": (x - x_hat).abs().mean(), "perc": _tensor(perceptual(x, x_hat))}
    if real_out or fake_out:
        adv, _, fm = gan_losses([o.score for o in real_out], [o.score for o in fake_out],
                                [[f.detach() if detach_real else f for f in o.features] for o in real_out],
                                [o.features for o in fake_out])
    else:
        adv = fm = x_hat.new_zeros(())
    terms.update(adv=adv, fm=fm, commit=commit)
    total = (w.rec * terms["rec"] + w.perc * terms["perc"] + w.adv * terms["adv"]
             + w.fm * terms["fm"] + w.commit * terms["commit"])
    return total, terms


def _tensor(v):
    if isinstance(v, torch.Tensor):
        return v
    if isinstance(v, LogMelSpectrogram):
        v = v.values
    return torch.as_tensor(np.asarray(v, dtype=np.float64))
