"""Run configuration: one JSON document with a section per module.

The ``full`` preset (the defaults) uses analysis window
2048 / hop 512 / 128 Mel bins at 44.1 kHz, 8192 codes, loss weights
5 / 1 / 1 / 5 / 2.5, tokenizer Adam 2e-4 with betas (0.8, 0.99), LM AdamW
5e-5 with betas (0.9, 0.95) and inverse schedules with power 0.5.  The
``desk`` preset shrinks everything so the full pipeline trains in seconds.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields

from .codec import CodecConfig
from .dsp import FrontendConfig
from .errors import ConfigError, InvalidInputError
from .lm import MicroLmConfig, SamplerConfig
from .losses import CriticConfig, LossWeights
from .train import LmTrainConfig, OptimConfig, TokenizerTrainConfig


@dataclass
class FrontendSection:
    sample_rate_hz: int = 44100
    win_samples: int = 2048
    hop_samples: int = 512
    n_mels: int = 128
    fmin_hz: float = 0.0
    fmax_hz: float | None = None
    floor_epsilon: float = 1e-5
    mel_scale: str = "slaney"


@dataclass
class CodecSection:
    channels: int = 8
    hidden: int = 32
    layers: list | None = None
    kernel: int = 3
    leaky_slope: float = 0.2


@dataclass
class CodebookSection:
    K: int = 8192
    decay: float = 0.99
    laplace_eps: float = 1e-5
    init_scale: float = 1.0
    quantizer: str = "band"           # "band" or "residual"
    residual_depth: int = 16


@dataclass
class RopeSection:
    mode: str = "2d"
    allocation: list | None = None
    base_theta: float = 10000.0


@dataclass
class LmSection:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    n_text: int = 0
    n_special: int = 2
    segment_time: bool = True
    null_prob: float = 0.1
    init_scale: float = 0.02
    prefix_rows: int = 8
    lr: float = 5e-5
    betas: list = field(default_factory=lambda: [0.9, 0.95])
    inv_gamma: float = 1_000_000.0
    power: float = 0.5
    warmup: float = 0.999
    weight_decay: float = 0.0
    steps: int = 300
    corpus_seqs: int = 64
    corpus_frames: int = 4


@dataclass
class LossSection:
    rec: float = 5.0
    perc: float = 1.0
    adv: float = 1.0
    fm: float = 5.0
    commit: float = 2.5
    critic_channels: list = field(default_factory=lambda: [16, 32, 64, 1])
    scales: list = field(default_factory=lambda: [1.0, 0.5, 0.25])
    ms_patchgan: bool = True
    codebook_loss: bool = False
    lr: float = 2e-4
    betas: list = field(default_factory=lambda: [0.8, 0.99])
    inv_gamma: float = 200_000.0
    power: float = 0.5
    warmup: float = 0.999
    steps: int = 200
    batch: int = 4
    train_clips: int = 8
    train_frames: int = 64


@dataclass
class SamplerSection:
    guidance_scale: float = 2.0
    temperature: float = 1.0
    top_k: int | None = 64
    max_frames: int = 11
    segment_start_s: float = 0.0
    track_duration_s: float = 10.0


SECTIONS = {
    "frontend": FrontendSection,
    "codec": CodecSection,
    "codebook": CodebookSection,
    "rope": RopeSection,
    "lm": LmSection,
    "loss": LossSection,
    "sampler": SamplerSection,
}


@dataclass
class RunConfig:
    frontend: FrontendSection = field(default_factory=FrontendSection)
    codec: CodecSection = field(default_factory=CodecSection)
    codebook: CodebookSection = field(default_factory=CodebookSection)
    rope: RopeSection = field(default_factory=RopeSection)
    lm: LmSection = field(default_factory=LmSection)
    loss: LossSection = field(default_factory=LossSection)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    seed: int = 0

    # -- serialisation ----------------------------------------------------

    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config root must be an object")
        unknown = set(d) - set(SECTIONS) - {"seed"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for name, section in SECTIONS.items():
            body = d.get(name, {})
            if not isinstance(body, dict):
                raise ConfigError(f"section {name!r} must be an object")
            allowed = {f.name for f in fields(section)}
            bad = set(body) - allowed
            if bad:
                raise ConfigError(f"unknown keys in section {name!r}: {sorted(bad)}")
            kwargs[name] = section(**body)
        seed = d.get("seed", 0)
        if not isinstance(seed, int):
            raise ConfigError("seed must be an integer")
        cfg = cls(**kwargs, seed=seed)
        cfg.validate()
        return cfg

    @classmethod
    def loads(cls, text: str) -> "RunConfig":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as fh:
            return cls.loads(fh.read())

    def override(self, section: str, **values) -> "RunConfig":
        """Copy with non-None values replaced (command-line flags win over the file)."""
        out = copy.deepcopy(self)
        target = getattr(out, section)
        for k, v in values.items():
            if v is not None:
                setattr(target, k, v)
        out.validate()
        return out

    def validate(self):
        try:
            self._validate()
        except InvalidInputError as exc:
            raise ConfigError(str(exc)) from exc

    def _validate(self):
        self.frontend_config().validate()
        self.codec_config()
        if self.codebook.quantizer not in ("band", "residual"):
            raise ConfigError(f"quantizer must be 'band' or 'residual', got {self.codebook.quantizer!r}")
        if self.codebook.K < 1 or self.codebook.residual_depth < 1:
            raise ConfigError("K and residual_depth must be >= 1")
        self.lm_config()
        self.sampler_config()
        self.loss_weights()

    # -- module configs ---------------------------------------------------

    def frontend_config(self) -> FrontendConfig:
        return FrontendConfig(**asdict(self.frontend))

    def codec_config(self) -> CodecConfig:
        return CodecConfig(**asdict(self.codec), floor_epsilon=self.frontend.floor_epsilon, seed=self.seed)

    @property
    def band_count(self) -> int:
        return self.frontend.n_mels // 8

    @property
    def token_axis_count(self) -> int:
        return self.band_count if self.codebook.quantizer == "band" else self.codebook.residual_depth

    def lm_config(self) -> MicroLmConfig:
        s = self.lm
        return MicroLmConfig(
            n_audio=self.codebook.K, n_text=s.n_text, n_special=s.n_special, d_model=s.d_model,
            n_layers=s.n_layers, n_heads=s.n_heads, d_ff=s.d_ff, rope_mode=self.rope.mode,
            rope_allocation=self.rope.allocation, rope_base=self.rope.base_theta,
            segment_time=s.segment_time, null_prob=s.null_prob, init_scale=s.init_scale, seed=self.seed)

    def lm_train_config(self) -> LmTrainConfig:
        s = self.lm
        return LmTrainConfig(steps=s.steps, prefix_rows=s.prefix_rows, seed=self.seed,
                             optim=OptimConfig(s.lr, tuple(s.betas), s.inv_gamma, s.power, s.warmup, s.weight_decay))

    def loss_weights(self) -> LossWeights:
        s = self.loss
        return LossWeights(s.rec, s.perc, s.adv, s.fm, s.commit)

    def critic_config(self) -> CriticConfig:
        return CriticConfig(channels=list(self.loss.critic_channels), scales=list(self.loss.scales), seed=self.seed)

    def tokenizer_train_config(self) -> TokenizerTrainConfig:
        s = self.loss
        opt = OptimConfig(s.lr, tuple(s.betas), s.inv_gamma, s.power, s.warmup)
        return TokenizerTrainConfig(steps=s.steps, batch=s.batch, ms_patchgan=s.ms_patchgan,
                                    codebook_loss=s.codebook_loss, optim=opt, critic_optim=copy.deepcopy(opt),
                                    seed=self.seed)

    def sampler_config(self, seed: int | None = None) -> SamplerConfig:
        s = self.sampler
        return SamplerConfig(s.guidance_scale, s.temperature, s.top_k, self.seed if seed is None else seed)


def desk_preset() -> RunConfig:
    """Small settings used by the tests and the quick-start commands."""
    cfg = RunConfig()
    cfg.frontend.n_mels = 64
    cfg.codec.hidden = 16
    cfg.codebook.K = 64
    cfg.codebook.residual_depth = 8
    cfg.lm.d_model = 32
    cfg.lm.n_heads = 2
    cfg.lm.d_ff = 64
    cfg.lm.prefix_rows = 2
    cfg.lm.lr = 3e-3
    cfg.lm.warmup = 0.0
    cfg.loss.lr = 1e-3
    cfg.loss.warmup = 0.0
    cfg.sampler.max_frames = 4
    cfg.validate()
    return cfg


PRESETS = {"full": RunConfig, "desk": desk_preset}
