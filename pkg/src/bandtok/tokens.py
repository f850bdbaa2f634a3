"""Discrete time-frequency token grids, band-first flattening, position
triples for the language model, and the BTOK file format.

Within a frame, bands run from the lowest Mel band (index 0) to the highest.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, InvalidInputError

BTOK_MAGIC = b"BTOK"
BTOK_VERSION = 1
FLATTEN_BAND_FIRST = 0
_BTOK_HEADER = struct.Struct("<4sIIIIB3sf")

# region labels inside a PositionedSequence
TEXT, SPECIAL, AUDIO = 0, 1, 2


@dataclass
class TokenGrid:
    indices: np.ndarray           # (T', B) integer codes
    K: int
    frame_rate_hz: float = 44100 / 512 / 8

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if self.indices.ndim != 2:
            raise InvalidInputError(f"token grid must be 2D, got shape {self.indices.shape}")
        if self.K < 1 or self.indices.shape[1] < 1:
            raise InvalidInputError("K and band count must be >= 1")
        if self.indices.size and (self.indices.min() < 0 or self.indices.max() >= self.K):
            raise InvalidInputError(f"token ids must lie in [0, {self.K})")

    @property
    def n_frames(self) -> int:
        return self.indices.shape[0]

    @property
    def band_count(self) -> int:
        return self.indices.shape[1]

    @property
    def tokens_per_second(self) -> float:
        return self.frame_rate_hz * self.band_count


def flatten_band_first(g: TokenGrid) -> np.ndarray:
    return np.ascontiguousarray(g.indices).reshape(-1)


def unflatten(s, B: int, K: int | None = None, frame_rate_hz: float = 44100 / 512 / 8) -> TokenGrid:
    s = np.asarray(s, dtype=np.int64).reshape(-1)
    if B < 1:
        raise InvalidInputError("band count must be >= 1")
    if s.size % B:
        raise InvalidInputError(f"sequence length {s.size} not divisible by band count {B}")
    if K is None:
        K = int(s.max()) + 1 if s.size else 1
    return TokenGrid(s.reshape(-1, B), K, frame_rate_hz)


@dataclass
class Positions:
    token: np.ndarray
    time: np.ndarray
    band: np.ndarray

    def __len__(self):
        return self.token.size

    def stack(self) -> np.ndarray:
        """(L, 3) integer array of (token, time, band) triples."""
        return np.stack([self.token, self.time, self.band], axis=1)


def assign_positions(text_len: int, frames: int, B: int) -> Positions:
    """Position triples for ``text_len`` text slots followed by ``frames`` x ``B`` audio tokens.

    Text slots get sequential time indices and band 0.  Every audio frame
    shares one time index, continuing from the last text index, and its bands
    run 1..B.
    """
    if text_len < 0 or frames < 0 or B < 1:
        raise InvalidInputError("text_len and frames must be >= 0 and B >= 1")
    n = text_len + frames * B
    token = np.arange(n, dtype=np.int64)
    time = np.concatenate([
        np.arange(text_len, dtype=np.int64),
        text_len + np.repeat(np.arange(frames, dtype=np.int64), B),
    ])
    band = np.concatenate([
        np.zeros(text_len, dtype=np.int64),
        np.tile(np.arange(1, B + 1, dtype=np.int64), frames),
    ])
    return Positions(token, time, band)


@dataclass
class Vocab:
    """Unified LM vocabulary: [text | special | audio]."""

    n_text: int = 0
    n_special: int = 2
    n_audio: int = 8192

    BOS = 0
    EOS = 1

    @property
    def size(self) -> int:
        return self.n_text + self.n_special + self.n_audio

    @property
    def special_offset(self) -> int:
        return self.n_text

    @property
    def audio_offset(self) -> int:
        return self.n_text + self.n_special

    def bos_id(self) -> int:
        return self.special_offset + self.BOS


@dataclass
class PositionedSequence:
    """Token ids plus position triples.

    The first ``prefix_len`` slots are placeholders that the LM fills with
    conditioning embeddings; their ids are ignored.  A BOS special token
    follows, then band-first audio ids offset into the unified vocabulary.
    """

    tokens: np.ndarray
    positions: Positions
    region: np.ndarray
    prefix_len: int
    band_count: int
    vocab: Vocab = field(default_factory=Vocab)

    def __len__(self):
        return self.tokens.size

    @property
    def audio_slice(self) -> slice:
        return slice(self.prefix_len + 1, len(self))

    def audio_band_index(self) -> np.ndarray:
        """0-based band (or layer) coordinate of every audio slot."""
        return self.positions.band[self.audio_slice] - 1


def build_sequence(prefix_len: int, audio, band_count: int, vocab: Vocab) -> PositionedSequence:
    """Lay out [prefix placeholders, BOS, flattened audio] with positions.

    ``audio`` is a TokenGrid or a flat band-first array of raw codes.
    """
    if isinstance(audio, TokenGrid):
        flat = flatten_band_first(audio)
        band_count = audio.band_count
    else:
        flat = np.asarray(audio, dtype=np.int64).reshape(-1)
    if flat.size % band_count:
        raise InvalidInputError(f"{flat.size} audio tokens do not fill whole frames of {band_count}")
    if flat.size and (flat.min() < 0 or flat.max() >= vocab.n_audio):
        raise InvalidInputError(f"audio ids must lie in [0, {vocab.n_audio})")
    frames = flat.size // band_count
    text_len = prefix_len + 1
    tokens = np.concatenate([
        np.zeros(prefix_len, dtype=np.int64),
        [vocab.bos_id()],
        flat + vocab.audio_offset,
    ]).astype(np.int64)
    region = np.concatenate([
        np.full(prefix_len, TEXT), [SPECIAL], np.full(flat.size, AUDIO)]).astype(np.int8)
    return PositionedSequence(tokens, assign_positions(text_len, frames, band_count),
                              region, prefix_len, band_count, vocab)


# ---------------------------------------------------------------------------
# BTOK files


def btok_bytes(g: TokenGrid) -> bytes:
    if g.K > 0xFFFFFFFF:
        raise InvalidInputError("K does not fit in u32")
    header = _BTOK_HEADER.pack(BTOK_MAGIC, BTOK_VERSION, g.K, g.n_frames, g.band_count,
                               FLATTEN_BAND_FIRST, b"\0\0\0", g.frame_rate_hz)
    return header + flatten_band_first(g).astype("<u4").tobytes()


def parse_btok(buf: bytes) -> TokenGrid:
    if len(buf) < _BTOK_HEADER.size:
        raise FormatError(f"BTOK truncated: expected at least {_BTOK_HEADER.size} header bytes, got {len(buf)}")
    magic, version, K, t, b, order, _, rate = _BTOK_HEADER.unpack_from(buf, 0)
    if magic != BTOK_MAGIC:
        raise FormatError(f"bad BTOK magic {magic!r} at offset 0")
    if version != BTOK_VERSION:
        raise FormatError(f"unsupported BTOK version {version} at offset 4")
    if order != FLATTEN_BAND_FIRST:
        raise FormatError(f"unsupported flatten order {order} at offset 20")
    expected = _BTOK_HEADER.size + 4 * t * b
    if len(buf) != expected:
        raise FormatError(f"BTOK size mismatch: expected {expected} bytes, got {len(buf)}")
    ids = np.frombuffer(buf, dtype="<u4", count=t * b, offset=_BTOK_HEADER.size)
    try:
        return TokenGrid(ids.astype(np.int64).reshape(t, b), K, float(rate))
    except InvalidInputError as exc:
        raise FormatError(f"BTOK payload invalid: {exc}") from exc


def write_btok(path, g: TokenGrid):
    with open(path, "wb") as fh:
        fh.write(btok_bytes(g))


def read_btok(path) -> TokenGrid:
    with open(path, "rb") as fh:
        return parse_btok(fh.read())
