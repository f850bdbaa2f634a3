"""End-to-end tokenizer: waveform -> log-Mel -> latent -> token grid, and back
to a log-Mel spectrogram.  Also the band-vs-residual comparison harness.

``quantizer="band"`` quantises every (frame, band) cell of the latent grid
with one shared codebook.  ``quantizer="residual"`` treats each latent frame
(all C x F' values) as one vector and quantises it with a stack of residual
codebooks, so the vertical token axis becomes residual depth.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from . import bprm
from .analysis import grid_nmi, ppl_profile, usage_stats
from .codec import LatentCodec, LatentGrid, decode, encode
from .config import RunConfig
from .dsp import LogMelSpectrogram, Waveform, compute_log_mel
from .errors import FormatError
from .lm import MicroLm
from .tokens import TokenGrid
from .train import (JsonlLog, fit_codebook, random_prefixes, synthetic_mel_batch, train_lm,
                    train_tokenizer)
from .vq import Codebook, nearest_codes, quantize, residual_quantize

log = logging.getLogger(__name__)


@dataclass
class Tokenizer:
    cfg: RunConfig
    codec: LatentCodec
    books: list                     # one book (band) or residual_depth books

    @classmethod
    def fresh(cls, cfg: RunConfig) -> "Tokenizer":
        codec = LatentCodec(cfg.codec_config())
        return cls(cfg, codec, _fresh_books(cfg, codec.cfg.channels))

    @property
    def residual(self) -> bool:
        return self.cfg.codebook.quantizer == "residual"

    @property
    def K(self) -> int:
        return self.books[0].K

    # -- token path ---------------------------------------------------------

    def latent(self, mel: LogMelSpectrogram) -> LatentGrid:
        return encode(mel, self.codec)

    def tokens_from_latent(self, z: LatentGrid) -> TokenGrid:
        rate = z.frame_rate_hz
        if self.residual:
            frames = frame_vectors(z.values)
            results = residual_quantize(frames.T, self.books)
            return TokenGrid(np.stack([r.indices for r in results], axis=1), self.K, rate)
        q = quantize(z.values, self.books[0])
        return TokenGrid(q.indices, self.K, rate)

    def tokenize(self, w: Waveform) -> tuple[TokenGrid, LogMelSpectrogram]:
        mel = compute_log_mel(w, self.cfg.frontend_config())
        return self.tokens_from_latent(self.latent(mel)), mel

    def latent_from_tokens(self, g: TokenGrid, original_frames: int | None = None) -> LatentGrid:
        if g.K != self.K:
            raise FormatError(f"token file uses K={g.K}, checkpoint has K={self.K}")
        C, Fp = self.codec.cfg.channels, self.cfg.band_count
        if self.residual:
            if g.band_count != len(self.books):
                raise FormatError(f"token grid has {g.band_count} layers, checkpoint has {len(self.books)}")
            frames = sum(cb.codes[g.indices[:, l]] for l, cb in enumerate(self.books))
            values = frames.reshape(g.n_frames, C, Fp).transpose(1, 0, 2)
        else:
            if g.band_count != Fp:
                raise FormatError(f"token grid has {g.band_count} bands, config expects {Fp}")
            values = np.moveaxis(self.books[0].codes[g.indices], -1, 0)
        fe = self.cfg.frontend
        return LatentGrid(values, original_frames or g.n_frames * 8, fe.sample_rate_hz,
                          fe.hop_samples, fe.win_samples)

    def detokenize(self, g: TokenGrid, original_frames: int | None = None) -> LogMelSpectrogram:
        return decode(self.latent_from_tokens(g, original_frames), self.codec)

    # -- checkpoints ------------------------------------------------------------

    def tensors(self) -> dict:
        out = self.codec.tensors()
        if self.residual:
            for l, cb in enumerate(self.books):
                out.update(cb.tensors(f"residual.{l}"))
        else:
            out.update(self.books[0].tensors())
        return out

    def save(self, path):
        bprm.save(path, self.tensors())

    @classmethod
    def load(cls, path, cfg: RunConfig) -> "Tokenizer":
        t = bprm.load(path)
        codec = LatentCodec(cfg.codec_config())
        try:
            codec.load_tensors(t)
            cb = cfg.codebook
            kw = dict(decay=cb.decay, laplace_eps=cb.laplace_eps, seed=cfg.seed)
            if cfg.codebook.quantizer == "residual":
                books = [Codebook.from_tensors(t, f"residual.{l}", pinned_zero=True, **kw)
                         for l in range(cb.residual_depth)]
            else:
                books = [Codebook.from_tensors(t, **kw)]
        except KeyError as exc:
            raise FormatError(f"{path}: checkpoint is missing tensor {exc.args[0]!r}") from exc
        except ValueError as exc:
            raise FormatError(f"{path}: {exc}") from exc
        return cls(cfg, codec, books)


def frame_vectors(values: np.ndarray) -> np.ndarray:
    """(C, T', F') latent -> (T', C * F') one vector per frame."""
    C, T, Fp = values.shape
    return values.transpose(1, 0, 2).reshape(T, C * Fp)


def _fresh_books(cfg: RunConfig, channels: int) -> list:
    cb = cfg.codebook
    if cb.quantizer == "residual":
        dim = channels * cfg.band_count
        return [Codebook.init(cb.K, dim, seed=cfg.seed * 131 + l, scale=cb.init_scale / (l + 1),
                              decay=cb.decay, laplace_eps=cb.laplace_eps, pinned_zero=True)
                for l in range(cb.residual_depth)]
    return [Codebook.init(cb.K, channels, seed=cfg.seed, scale=cb.init_scale,
                          decay=cb.decay, laplace_eps=cb.laplace_eps)]


def fit_residual_books(frames: np.ndarray, K: int, depth: int, seed: int = 0, passes: int = 20) -> list:
    """Fit residual books layer by layer on (M, D) frame vectors."""
    books = []
    residual = frames.copy()
    for l in range(depth):
        cb = Codebook.from_samples(residual, K, seed=seed * 131 + l, pinned_zero=True)
        fit_codebook(residual.T, cb, passes)
        residual = residual - cb.codes[nearest_codes(residual, cb.codes)]
        books.append(cb)
    return books


def train_tokenizer_from_config(cfg: RunConfig, data: np.ndarray | None = None,
                                logger: JsonlLog | None = None) -> tuple[Tokenizer, list]:
    """Train codec (+ band codebook) with the composite objective.

    In residual mode the codec is trained with a band codebook and the
    residual books are then fitted to its latents by EMA passes.
    """
    s = cfg.loss
    if data is None:
        data = synthetic_mel_batch(cfg.seed, s.train_clips, s.train_frames, cfg.frontend_config())
    tok = Tokenizer.fresh(cfg)
    band_book = tok.books[0] if not tok.residual else _fresh_books(
        cfg.override("codebook", quantizer="band"), tok.codec.cfg.channels)[0]
    history = []
    if s.steps > 0:
        state = train_tokenizer(data, cfg.codec_config(), band_book, cfg.critic_config(),
                                cfg.loss_weights(), cfg.tokenizer_train_config(), logger)
        tok.codec = state.codec
        history = state.history
    if tok.residual:
        with torch.no_grad():
            z = tok.codec.encode_tensor(torch.as_tensor(data)).numpy()
        frames = np.concatenate([frame_vectors(zi) for zi in z])
        tok.books = fit_residual_books(frames, cfg.codebook.K, cfg.codebook.residual_depth, cfg.seed)
    else:
        tok.books = [band_book]
    return tok, history


# ---------------------------------------------------------------------------
# Band vs residual geometry comparison


@dataclass
class GeometryReport:
    band_nmi: object
    residual_nmi: object
    band_ppl: object
    residual_ppl: object
    band_usage: object
    residual_usage: object
    notes: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "band": {"nmi": self.band_nmi.to_json(), "ppl": self.band_ppl.to_json(),
                     "mean_off_diagonal_nmi": self.band_nmi.mean_off_diagonal(),
                     "code_perplexity": self.band_usage.perplexity, "dead_codes": self.band_usage.dead},
            "residual": {"nmi": self.residual_nmi.to_json(), "ppl": self.residual_ppl.to_json(),
                         "mean_off_diagonal_nmi": self.residual_nmi.mean_off_diagonal(),
                         "code_perplexity": self.residual_usage.perplexity,
                         "dead_codes": self.residual_usage.dead},
            "notes": self.notes,
        }


def compare_geometry(cfg: RunConfig, n_clips: int = 16, n_frames: int = 64,
                     tokenizer_steps: int = 0, lm_steps: int | None = None) -> GeometryReport:
    """Tokenise one synthetic corpus both ways, then measure NMI and PPL profiles.

    The two token sets share the codec latents; band tokens come from a
    shared codebook over (frame, band) cells, residual tokens from a stack of
    books over whole frames with depth equal to the band count.
    """
    fe = cfg.frontend_config()
    data = synthetic_mel_batch(cfg.seed + 7, n_clips, n_frames, fe)
    band_cfg = cfg.override("codebook", quantizer="band").override("loss", steps=tokenizer_steps)
    tok, _ = train_tokenizer_from_config(band_cfg, data)
    with torch.no_grad():
        z = tok.codec.encode_tensor(torch.as_tensor(data)).numpy()   # (N, C, T', F')
    K, B = cfg.codebook.K, cfg.band_count

    cells = np.moveaxis(z, 1, -1).reshape(-1, z.shape[1])
    band_book = fit_codebook(np.ascontiguousarray(cells.T), Codebook.from_samples(cells, K, seed=cfg.seed))
    band_grids = [nearest_codes(np.moveaxis(zi, 0, -1).reshape(-1, zi.shape[0]), band_book.codes).reshape(zi.shape[1:])
                  for zi in z]

    frames = [frame_vectors(zi) for zi in z]
    n_vectors = sum(len(f) for f in frames)
    if n_vectors <= K:
        log.warning("only %d frame vectors for K=%d: residual layer 0 can memorise every frame "
                    "and deeper layers collapse to the zero code", n_vectors, K)
    books = fit_residual_books(np.concatenate(frames), K, B, cfg.seed)
    residual_grids = [np.stack([r.indices for r in residual_quantize(f.T, books)], axis=1) for f in frames]

    lm_steps = cfg.lm.steps if lm_steps is None else lm_steps
    profiles = []
    for grids, axis in ((band_grids, "band"), (residual_grids, "layer")):
        lm_cfg = cfg.lm_config()
        lm_cfg.segment_time = False
        model = MicroLm(lm_cfg)
        stacked = np.stack(grids)
        prefixes = random_prefixes(len(grids), 0, cfg.lm.d_model, cfg.seed)
        train_cfg = cfg.lm_train_config()
        train_cfg.steps = lm_steps
        model.cfg.null_prob = 0.0
        train_lm(model, stacked, prefixes, train_cfg)
        profiles.append(ppl_profile(grids, model, axis))

    return GeometryReport(
        band_nmi=grid_nmi(band_grids, axis_name="band"),
        residual_nmi=grid_nmi(residual_grids, axis_name="layer"),
        band_ppl=profiles[0], residual_ppl=profiles[1],
        band_usage=usage_stats(band_grids, K), residual_usage=usage_stats(residual_grids, K),
        notes={"clips": n_clips, "frame_vectors": n_vectors, "frames_per_clip": int(z.shape[2]), "axes": B, "K": K,
               "lm_steps": lm_steps, "tokenizer_steps": tokenizer_steps},
    )


# ---------------------------------------------------------------------------
# LM checkpoints


def save_lm(path, model: MicroLm):
    bprm.save(path, model.tensors())


def load_lm(path, cfg: RunConfig) -> MicroLm:
    model = MicroLm(cfg.lm_config())
    try:
        model.load_tensors(bprm.load(path))
    except KeyError as exc:
        raise FormatError(f"{path}: checkpoint is missing tensor {exc.args[0]!r}") from exc
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    return model
