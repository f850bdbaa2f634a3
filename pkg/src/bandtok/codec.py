"""Desk-scale encoder/decoder with the tokenizer's latent geometry.

Encoder: log-Mel (T x F) -> Haar patch (4 channels, /2) -> strided 3x3
convolutions -> ``C x T/8 x F/8``.  The decoder mirrors it with transposed
convolutions and the inverse Haar transform.  For F = 128 Mel bins this
gives 16 band positions per latent frame, and at 44.1 kHz / hop 512 a
latent frame rate of 44100 / 512 / 8 ~= 10.77 Hz.

Inputs are shifted by the log floor so digital silence maps to zero; the
decoder adds it back, so an all-zero network decodes to the floor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import rng as rng_mod
from .dsp import LogMelSpectrogram
from .errors import ConfigError, InvalidInputError
from .haar import haar_merge, haar_split

TOTAL_DOWNSAMPLE = 8
HAAR_FACTOR = 2


@dataclass
class CodecConfig:
    channels: int = 8                 # latent width C
    hidden: int = 32
    # (out_channels, stride) per encoder convolution; the last must output `channels`
    layers: list | None = None
    kernel: int = 3
    leaky_slope: float = 0.2
    floor_epsilon: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        if self.layers is None:
            self.layers = [[self.hidden, 2], [self.channels, 2]]
        self.layers = [[int(c), int(s)] for c, s in self.layers]
        self.validate()

    def validate(self):
        if not self.layers:
            raise ConfigError("codec needs at least one convolution")
        if self.layers[-1][0] != self.channels:
            raise ConfigError(f"last encoder layer outputs {self.layers[-1][0]} channels, expected {self.channels}")
        stride = HAAR_FACTOR * math.prod(s for _, s in self.layers)
        if stride != TOTAL_DOWNSAMPLE or any(s not in (1, 2) for _, s in self.layers):
            raise ConfigError(
                f"encoder strides times the Haar factor must equal {TOTAL_DOWNSAMPLE}, got {stride}")
        if self.kernel % 2 == 0:
            raise ConfigError("kernel size must be odd")

    @property
    def log_floor(self) -> float:
        return math.log(self.floor_epsilon)


@dataclass
class LatentGrid:
    values: np.ndarray                # (C, T', F')
    original_frames: int
    sample_rate_hz: int = 44100
    hop_samples: int = 512
    win_samples: int = 2048
    time_downsample_total: int = TOTAL_DOWNSAMPLE
    freq_downsample_total: int = TOTAL_DOWNSAMPLE

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]

    @property
    def n_bands(self) -> int:
        return self.values.shape[2]

    @property
    def frame_rate_hz(self) -> float:
        return latent_frame_rate(self.sample_rate_hz, self.hop_samples)


def latent_frame_rate(sample_rate_hz: int = 44100, hop_samples: int = 512) -> float:
    return sample_rate_hz / hop_samples / TOTAL_DOWNSAMPLE


class LatentCodec(nn.Module):
    """Encoder/decoder pair; parameters are float64 and seeded."""

    def __init__(self, cfg: CodecConfig | None = None):
        super().__init__()
        self.cfg = cfg or CodecConfig()
        k, pad = self.cfg.kernel, self.cfg.kernel // 2
        enc, dec = [], []
        in_ch = 4
        for out_ch, stride in self.cfg.layers:
            enc.append(nn.Conv2d(in_ch, out_ch, k, stride=stride, padding=pad, dtype=torch.float64))
            in_ch = out_ch
        # mirror: walk the encoder backwards
        widths = [4] + [c for c, _ in self.cfg.layers]
        for i in reversed(range(len(self.cfg.layers))):
            stride = self.cfg.layers[i][1]
            dec.append(nn.ConvTranspose2d(widths[i + 1], widths[i], k, stride=stride, padding=pad,
                                          output_padding=stride - 1, dtype=torch.float64))
        self.encoder = nn.ModuleList(enc)
        self.decoder = nn.ModuleList(dec)
        self.reset_parameters(self.cfg.seed)

    def reset_parameters(self, seed: int):
        gen = rng_mod.derive(seed, "codec.init")
        with torch.no_grad():
            for name, p in self.named_parameters():
                layer = self.get_submodule(name.rsplit(".", 1)[0])
                fan_in = layer.in_channels * self.cfg.kernel ** 2
                s = 1.0 / math.sqrt(fan_in)
                p.copy_(torch.from_numpy(gen.uniform(-s, s, size=tuple(p.shape))))

    def zero_(self):
        with torch.no_grad():
            for p in self.parameters():
                p.zero_()
        return self

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def layer_spec(self) -> list:
        return [(c, s, self.cfg.kernel) for c, s in self.cfg.layers]

    # -- tensor paths (batch-first, used by training) --------------------

    def encode_tensor(self, x: torch.Tensor) -> torch.Tensor:
        """(N, T, F) log-Mel -> (N, C, ceil(T/8), F/8)."""
        n, t, f = x.shape
        if f % TOTAL_DOWNSAMPLE:
            raise ConfigError(f"Mel bin count {f} is not divisible by {TOTAL_DOWNSAMPLE}")
        pad_t = -t % TOTAL_DOWNSAMPLE
        if pad_t:
            x = torch.cat([x, x[:, -1:, :].expand(n, pad_t, f)], dim=1)
        h = torch.stack(haar_split(x - self.cfg.log_floor), dim=1)
        for i, conv in enumerate(self.encoder):
            h = conv(h)
            if i < len(self.encoder) - 1:
                h = F.leaky_relu(h, self.cfg.leaky_slope)
        return h

    def decode_tensor(self, z: torch.Tensor, frames: int | None = None) -> torch.Tensor:
        """(N, C, T', F') -> (N, T'*8, F'*8), optionally cropped to ``frames``."""
        if z.shape[1] != self.cfg.channels:
            raise ConfigError(f"latent has {z.shape[1]} channels, codec expects {self.cfg.channels}")
        h = z
        for i, conv in enumerate(self.decoder):
            h = conv(h)
            if i < len(self.decoder) - 1:
                h = F.leaky_relu(h, self.cfg.leaky_slope)
        n, _, th, fh = h.shape
        out = h.new_zeros(n, 2 * th, 2 * fh)
        out = haar_merge(h[:, 0], h[:, 1], h[:, 2], h[:, 3], out=out) + self.cfg.log_floor
        return out if frames is None else out[:, :frames]

    def tensors(self, prefix: str = "codec") -> dict:
        return {f"{prefix}.{k}": v for k, v in self.state_dict().items()}

    def load_tensors(self, t: dict, prefix: str = "codec"):
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


def encode(x: LogMelSpectrogram, codec: LatentCodec) -> LatentGrid:
    if not isinstance(x, LogMelSpectrogram):
        x = LogMelSpectrogram(x)
    with torch.no_grad():
        z = codec.encode_tensor(torch.as_tensor(x.values, dtype=torch.float64)[None])
    return LatentGrid(z[0].numpy(), x.n_frames, x.sample_rate_hz, x.hop_samples, x.win_samples)


def decode(z: LatentGrid, codec: LatentCodec) -> LogMelSpectrogram:
    values = np.asarray(z.values, dtype=np.float64)
    if values.ndim != 3:
        raise InvalidInputError(f"latent grid must be C x T' x F', got shape {values.shape}")
    with torch.no_grad():
        out = codec.decode_tensor(torch.as_tensor(values)[None], z.original_frames)[0].numpy()
    # the spectrogram contract forbids values under the floor
    out = np.maximum(out, codec.cfg.log_floor)
    return LogMelSpectrogram(out, z.sample_rate_hz, z.hop_samples, z.win_samples, out.shape[1])
