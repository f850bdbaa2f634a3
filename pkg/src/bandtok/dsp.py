"""Log-Mel frontend, reconstruction distances, WAV input and the BMEL format.

Analysis parameters default to 44.1 kHz audio, a 2048-sample periodic Hann
window, a 512-sample hop and 128 Slaney-scale Mel bins.  Frames are centred
(reflect padding of ``win // 2`` on both sides) and the frame count is
``ceil(n / hop)``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, FormatError, InvalidInputError

BMEL_MAGIC = b"BMEL"
BMEL_VERSION = 1
_BMEL_HEADER = struct.Struct("<4s6I")


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate_hz: int = 44100

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.samples.size == 0:
            raise InvalidInputError("waveform is empty")
        if self.sample_rate_hz <= 0:
            raise InvalidInputError(f"sample rate must be positive, got {self.sample_rate_hz}")
        if not np.all(np.isfinite(self.samples)):
            raise InvalidInputError("waveform contains non-finite samples")
        if np.max(np.abs(self.samples)) > 1.0 + 1e-9:
            raise InvalidInputError("waveform samples must lie in [-1, 1]")

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_hz


@dataclass
class FrontendConfig:
    sample_rate_hz: int = 44100
    win_samples: int = 2048
    hop_samples: int = 512
    n_mels: int = 128
    fmin_hz: float = 0.0
    fmax_hz: float | None = None
    floor_epsilon: float = 1e-5
    mel_scale: str = "slaney"

    def validate(self):
        if self.n_mels <= 0:
            raise ConfigError(f"n_mels must be positive, got {self.n_mels}")
        if self.hop_samples <= 0 or self.win_samples <= 0:
            raise ConfigError("window and hop must be positive")
        if self.win_samples < self.hop_samples:
            raise ConfigError("window length must be >= hop length")
        if self.win_samples % 2:
            raise ConfigError("window length must be even")
        if self.floor_epsilon <= 0:
            raise ConfigError("floor_epsilon must be positive")
        if self.mel_scale not in ("slaney", "htk"):
            raise ConfigError(f"unknown mel scale {self.mel_scale!r}")


@dataclass
class LogMelSpectrogram:
    """T x F log-amplitude Mel matrix with the analysis settings that made it."""

    values: np.ndarray
    sample_rate_hz: int = 44100
    hop_samples: int = 512
    win_samples: int = 2048
    n_mels: int = field(default=-1)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise InvalidInputError(f"expected a T x F matrix, got shape {self.values.shape}")
        if self.n_mels == -1:
            self.n_mels = self.values.shape[1]
        if self.values.shape[1] != self.n_mels:
            raise InvalidInputError(
                f"matrix has {self.values.shape[1]} columns but n_mels={self.n_mels}")

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    @property
    def frame_rate_hz(self) -> float:
        return self.sample_rate_hz / self.hop_samples


# ---------------------------------------------------------------------------
# Mel scale and filterbank


def hz_to_mel(f, scale: str = "slaney"):
    f = np.asarray(f, dtype=np.float64)
    if scale == "htk":
        return 2595.0 * np.log10(1.0 + f / 700.0)
    # linear below 1 kHz, logarithmic above
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = math.log(6.4) / 27.0
    return np.where(
        f >= min_log_hz,
        min_log_mel + np.log(np.maximum(f, min_log_hz) / min_log_hz) / logstep,
        f / f_sp,
    )


def mel_to_hz(m, scale: str = "slaney"):
    m = np.asarray(m, dtype=np.float64)
    if scale == "htk":
        return 700.0 * (10.0 ** (m / 2595.0) - 1.0)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = math.log(6.4) / 27.0
    return np.where(
        m >= min_log_mel,
        min_log_hz * np.exp(logstep * (m - min_log_mel)),
        f_sp * m,
    )


def mel_center_frequencies(n_mels: int, sample_rate_hz: int, fmin_hz: float = 0.0,
                           fmax_hz: float | None = None, scale: str = "slaney") -> np.ndarray:
    """Peak frequency (Hz) of each triangular filter."""
    edges = _mel_edges(n_mels, sample_rate_hz, fmin_hz, fmax_hz, scale)
    return edges[1:-1]


def _mel_edges(n_mels, sample_rate_hz, fmin_hz, fmax_hz, scale):
    fmax = sample_rate_hz / 2.0 if fmax_hz is None else fmax_hz
    mels = np.linspace(hz_to_mel(fmin_hz, scale), hz_to_mel(fmax, scale), n_mels + 2)
    return mel_to_hz(mels, scale)


def mel_filterbank(n_fft: int, n_mels: int, sample_rate_hz: int, fmin_hz: float = 0.0,
                   fmax_hz: float | None = None, scale: str = "slaney") -> np.ndarray:
    """Area-normalised triangular filters, shape ``(n_mels, n_fft // 2 + 1)``.

    Raises ConfigError when ``n_mels >= n_fft // 2 + 1`` or when the FFT grid
    is too coarse for some filter to cover any bin.
    """
    if n_fft <= 0 or n_mels <= 0 or sample_rate_hz <= 0:
        raise ConfigError("n_fft, n_mels and sample rate must be positive")
    n_bins = n_fft // 2 + 1
    if n_mels >= n_bins:
        raise ConfigError(f"n_mels={n_mels} must be smaller than n_fft/2+1={n_bins}")
    fft_freqs = np.linspace(0.0, sample_rate_hz / 2.0, n_bins)
    edges = _mel_edges(n_mels, sample_rate_hz, fmin_hz, fmax_hz, scale)
    widths = np.diff(edges)
    ramps = edges[:, None] - fft_freqs[None, :]
    lower = -ramps[:-2] / widths[:-1, None]
    upper = ramps[2:] / widths[1:, None]
    weights = np.maximum(0.0, np.minimum(lower, upper))
    weights *= (2.0 / (edges[2:] - edges[:-2]))[:, None]
    empty = np.flatnonzero(weights.max(axis=1) <= 0)
    if empty.size:
        raise ConfigError(
            f"FFT size {n_fft} too small for {n_mels} Mel bands; empty filters {empty.tolist()}")
    return weights


# ---------------------------------------------------------------------------
# STFT helpers


def periodic_hann(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def frame_count(n_samples: int, hop: int) -> int:
    return -(-n_samples // hop)


def stft_power(x: np.ndarray, win: int, hop: int) -> np.ndarray:
    """Centred power spectrogram, shape ``(ceil(n/hop), win//2+1)``."""
    x = np.asarray(x, dtype=np.float64)
    n_frames = frame_count(x.size, hop)
    padded = np.pad(x, win // 2, mode="reflect")
    frames = np.lib.stride_tricks.sliding_window_view(padded, win)[::hop][:n_frames]
    spec = np.fft.rfft(frames * periodic_hann(win), axis=-1)
    return spec.real ** 2 + spec.imag ** 2


def compute_log_mel(w: Waveform, cfg: FrontendConfig | None = None) -> LogMelSpectrogram:
    cfg = cfg or FrontendConfig(sample_rate_hz=w.sample_rate_hz)
    cfg.validate()
    if not isinstance(w, Waveform):
        w = Waveform(w, cfg.sample_rate_hz)
    fb = mel_filterbank(cfg.win_samples, cfg.n_mels, w.sample_rate_hz,
                        cfg.fmin_hz, cfg.fmax_hz, cfg.mel_scale)
    power = stft_power(w.samples, cfg.win_samples, cfg.hop_samples)
    mel_power = power @ fb.T
    # log of the amplitude-equivalent, clamped at the floor
    values = np.log(np.maximum(np.sqrt(mel_power), cfg.floor_epsilon))
    return LogMelSpectrogram(values, w.sample_rate_hz, cfg.hop_samples, cfg.win_samples, cfg.n_mels)


# ---------------------------------------------------------------------------
# Distances


def _mel_values(a):
    return a.values if isinstance(a, LogMelSpectrogram) else np.asarray(a, dtype=np.float64)


def mel_distance(a, b) -> float:
    """Mean absolute difference between two equal-shaped log-Mel matrices."""
    va, vb = _mel_values(a), _mel_values(b)
    if va.shape != vb.shape:
        raise InvalidInputError(f"shape mismatch {va.shape} vs {vb.shape}")
    return float(np.mean(np.abs(va - vb)))


def log_magnitude_stft(x: np.ndarray, n_fft: int, floor_epsilon: float = 1e-5) -> np.ndarray:
    mag = np.sqrt(stft_power(x, n_fft, n_fft // 4))
    return np.log(np.maximum(mag, floor_epsilon))


def stft_distance(a, b, scales=(2048, 1024, 512), floor_epsilon: float = 1e-5) -> float:
    """Multi-resolution distance: mean over FFT sizes of mean |log|A| - log|B||.

    The hop at each scale is a quarter of its FFT size.
    """
    xa = a.samples if isinstance(a, Waveform) else np.asarray(a, dtype=np.float64)
    xb = b.samples if isinstance(b, Waveform) else np.asarray(b, dtype=np.float64)
    if xa.shape != xb.shape:
        raise InvalidInputError(f"length mismatch {xa.shape} vs {xb.shape}")
    if not scales:
        raise InvalidInputError("at least one FFT scale is required")
    per_scale = [
        np.mean(np.abs(log_magnitude_stft(xa, n, floor_epsilon) - log_magnitude_stft(xb, n, floor_epsilon)))
        for n in scales
    ]
    return float(np.mean(per_scale))


# ---------------------------------------------------------------------------
# WAV input


def read_wav(path) -> Waveform:
    from scipy.io import wavfile

    try:
        sr, data = wavfile.read(path)
    except FileNotFoundError:
        raise
    except ValueError as exc:
        raise FormatError(f"{path}: unreadable WAV ({exc})") from exc
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        x = data.astype(np.float64) / 2147483648.0
    elif data.dtype == np.uint8:
        x = (data.astype(np.float64) - 128.0) / 128.0
    elif data.dtype in (np.float32, np.float64):
        x = data.astype(np.float64)
    else:
        raise FormatError(f"{path}: unsupported sample type {data.dtype}")
    if x.ndim == 2:
        x = x.mean(axis=1)
    return Waveform(np.clip(x, -1.0, 1.0), int(sr))


def write_wav(path, w: Waveform, sample_format: str = "int16"):
    from scipy.io import wavfile

    if sample_format == "int16":
        data = np.clip(np.round(w.samples * 32767.0), -32768, 32767).astype(np.int16)
    elif sample_format == "float32":
        data = w.samples.astype(np.float32)
    else:
        raise InvalidInputError(f"unsupported sample format {sample_format!r}")
    wavfile.write(path, w.sample_rate_hz, data)


# ---------------------------------------------------------------------------
# BMEL container


def bmel_bytes(m: LogMelSpectrogram) -> bytes:
    t, f = m.values.shape
    header = _BMEL_HEADER.pack(BMEL_MAGIC, BMEL_VERSION, t, f, m.sample_rate_hz, m.hop_samples, m.win_samples)
    return header + np.ascontiguousarray(m.values, dtype="<f4").tobytes()


def parse_bmel(buf: bytes) -> LogMelSpectrogram:
    if len(buf) < _BMEL_HEADER.size:
        raise FormatError(f"BMEL truncated: need {_BMEL_HEADER.size} header bytes, got {len(buf)}")
    magic, version, t, f, sr, hop, win = _BMEL_HEADER.unpack_from(buf, 0)
    if magic != BMEL_MAGIC:
        raise FormatError(f"bad BMEL magic {magic!r} at offset 0")
    if version != BMEL_VERSION:
        raise FormatError(f"unsupported BMEL version {version} at offset 4")
    expected = _BMEL_HEADER.size + 4 * t * f
    if len(buf) != expected:
        raise FormatError(f"BMEL size mismatch: expected {expected} bytes, got {len(buf)}")
    values = np.frombuffer(buf, dtype="<f4", count=t * f, offset=_BMEL_HEADER.size).reshape(t, f)
    return LogMelSpectrogram(values.astype(np.float64), sr, hop, win, f)


def write_bmel(path, m: LogMelSpectrogram):
    with open(path, "wb") as fh:
        fh.write(bmel_bytes(m))


def read_bmel(path) -> LogMelSpectrogram:
    with open(path, "rb") as fh:
        return parse_bmel(fh.read())
