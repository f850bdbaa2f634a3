import json

import pytest

from bandtok.config import PRESETS, RunConfig, desk_preset
from bandtok.errors import ConfigError


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_round_trip(name, tmp_path):
    cfg = PRESETS[name]()
    text = cfg.dumps()
    assert RunConfig.loads(text) == cfg
    p = tmp_path / "c.json"
    p.write_text(text)
    assert RunConfig.load(p).dumps() == text


def test_partial_document_uses_defaults():
    cfg = RunConfig.loads('{"codebook": {"K": 32}, "seed": 4}')
    assert cfg.codebook.K == 32 and cfg.seed == 4
    assert cfg.frontend == RunConfig().frontend


@pytest.mark.parametrize("doc", [
    '{"bogus": 1}',
    '{"lm": {"d_model": 16, "nope": 2}}',
    '{"lm": 3}',
    '[1, 2]',
    '{"seed": "x"}',
    '{not json',
    '{"codebook": {"quantizer": "tree"}}',
    '{"codebook": {"K": 0}}',
    '{"lm": {"d_model": 10, "n_heads": 4}}',
    '{"rope": {"mode": "3d"}}',
    '{"frontend": {"hop_samples": 0}}',
    '{"loss": {"rec": -1}}',
])
def test_rejects_bad_documents(doc):
    with pytest.raises(ConfigError):
        RunConfig.loads(doc)


def test_unknown_key_message_names_it():
    with pytest.raises(ConfigError, match="nope"):
        RunConfig.loads('{"lm": {"nope": 2}}')


def test_override_flags_win_and_none_is_ignored():
    cfg = desk_preset()
    out = cfg.override("lm", steps=7, d_model=None)
    assert out.lm.steps == 7 and out.lm.d_model == cfg.lm.d_model
    assert cfg.lm.steps == 300          # original untouched
    with pytest.raises(ConfigError):
        cfg.override("codebook", quantizer="nope")


def test_builders_carry_values():
    cfg = desk_preset()
    assert cfg.band_count == 8 and cfg.token_axis_count == 8
    assert cfg.override("codebook", residual_depth=5, quantizer="residual").token_axis_count == 5
    lm = cfg.lm_config()
    assert (lm.n_audio, lm.d_model, lm.n_heads, lm.rope_mode) == (64, 32, 2, "2d")
    assert cfg.lm_train_config().optim.lr == 3e-3
    w = cfg.loss_weights()
    assert (w.rec, w.perc, w.adv, w.fm, w.commit) == (5.0, 1.0, 1.0, 5.0, 2.5)
    t = cfg.tokenizer_train_config()
    assert t.optim.betas == (0.8, 0.99) and t.critic_optim is not t.optim
    assert cfg.critic_config().scales == [1.0, 0.5, 0.25]
    assert cfg.sampler_config(seed=9).seed == 9 and cfg.sampler_config().guidance_scale == 2.0
    assert cfg.codec_config().channels == 8


def test_full_defaults():
    d = json.loads(RunConfig().dumps())
    assert d["frontend"]["win_samples"] == 2048 and d["frontend"]["hop_samples"] == 512
    assert d["frontend"]["n_mels"] == 128 and d["codebook"]["K"] == 8192
    assert RunConfig().band_count == 16
