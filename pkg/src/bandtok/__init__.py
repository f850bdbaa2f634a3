"""Band-wise 2D Mel-spectrogram tokenizer with a 2D-RoPE micro language model."""

from .analysis import grid_nmi, nmi, ppl_profile, usage_stats
from .codec import CodecConfig, LatentCodec, LatentGrid, decode, encode, latent_frame_rate
from .config import RunConfig, desk_preset
from .dsp import (FrontendConfig, LogMelSpectrogram, Waveform, compute_log_mel, mel_distance,
                  mel_filterbank, read_wav, stft_distance, write_wav)
from .errors import BandTokError, ConfigError, FormatError, InvalidInputError, VerificationError
from .haar import PatchedSpectrogram, haar_forward, haar_inverse
from .lm import ConditioningPrefix, MicroLm, MicroLmConfig, SamplerConfig, cfg_mix, sample
from .losses import CriticConfig, LossWeights, MultiScaleCritic, composite_loss
from .pipeline import Tokenizer, compare_geometry
from .rope import RopeConfig, relative_score, rotate
from .tokens import (TokenGrid, Vocab, assign_positions, build_sequence, flatten_band_first, read_btok,
                     unflatten, write_btok)
from .vq import Codebook, ema_update, quantize, residual_quantize, straight_through

__version__ = "0.1.0"
