import json
import math

import numpy as np
import pytest
import torch

from bandtok.config import desk_preset
from bandtok.dsp import FrontendConfig
from bandtok.errors import InvalidInputError
from bandtok.lm import MicroLm
from bandtok.train import (JsonlLog, OptimConfig, fit_codebook, inverse_lr, random_prefixes,
                           synthetic_band_corpus, synthetic_mel_batch, synthetic_waveform, train_lm,
                           train_tokenizer)
from bandtok.vq import Codebook


def test_inverse_lr_formula():
    assert inverse_lr(0, 100.0, 0.5, 0.0) == 1.0
    assert abs(inverse_lr(300, 100.0, 0.5, 0.0) - 0.5) < 1e-15
    assert abs(inverse_lr(0, 1e6, 0.5, 0.999) - 0.001) < 1e-12
    assert abs(inverse_lr(9, 1.0, 1.0, 0.5) - (1 - 0.5 ** 10) / 10) < 1e-15


def test_scheduler_follows_formula():
    p = torch.nn.Parameter(torch.zeros(1))
    opt, sched = OptimConfig(1e-2, (0.9, 0.99), 10.0, 0.5, 0.9).build([p])
    for step in range(5):
        assert abs(opt.param_groups[0]["lr"] - 1e-2 * inverse_lr(step, 10.0, 0.5, 0.9)) < 1e-15
        opt.step()
        sched.step()


def test_synthetic_data_is_deterministic():
    a, b = synthetic_waveform(3, 4000), synthetic_waveform(3, 4000)
    assert np.array_equal(a.samples, b.samples) and np.max(np.abs(a.samples)) <= 1
    fe = FrontendConfig(n_mels=64)
    m = synthetic_mel_batch(1, 2, 16, fe)
    assert m.shape == (2, 16, 64) and np.all(np.isfinite(m))


def test_band_corpus_formula():
    g = synthetic_band_corpus(5, 4, 3, 11, seed=2)
    a = g[:, 0, 0]
    t, b = np.arange(4)[:, None], np.arange(3)[None, :]
    assert np.array_equal(g, (a[:, None, None] + t + 2 * b) % 11)
    noisy = synthetic_band_corpus(200, 4, 3, 11, seed=2, noise=0.5)
    assert 0.2 < np.mean(noisy != synthetic_band_corpus(200, 4, 3, 11, seed=2)) < 0.6


def test_fit_codebook_finds_two_clusters(gen):
    pts = np.concatenate([gen.normal(-5, 0.1, (100, 2)), gen.normal(5, 0.1, (100, 2))])
    cb = Codebook.from_samples(pts, 2, seed=0)
    cb.codes = np.array([[-1.0, -1.0], [1.0, 1.0]])
    fit_codebook(pts.T, cb, passes=200)
    assert np.allclose(np.sort(cb.codes[:, 0]), [-5, 5], atol=0.2)


def test_jsonl_log(tmp_path):
    p = tmp_path / "log.jsonl"
    log = JsonlLog(p)
    log.write(step=0, loss=torch.tensor(1.5), x=np.float64(2.0))
    log.write(step=1, loss=0.25)
    log.close()
    lines = [json.loads(s) for s in p.read_text().splitlines()]
    assert lines == [{"loss": 1.5, "step": 0, "x": 2.0}, {"loss": 0.25, "step": 1}]
    assert JsonlLog().records == []


def test_short_tokenizer_run_is_finite(gen):
    cfg = desk_preset()
    data = synthetic_mel_batch(0, 3, 32, cfg.frontend_config())
    tc = cfg.tokenizer_train_config()
    tc.steps = 3
    cb = Codebook.init(cfg.codebook.K, cfg.codec.channels, seed=0)
    state = train_tokenizer(data, cfg.codec_config(), cb, cfg.critic_config(), cfg.loss_weights(), tc)
    assert len(state.history) == 3
    for r in state.history:
        assert all(math.isfinite(r[k]) for k in ("total", "critic", "rec", "adv", "fm", "commit"))
    with pytest.raises(InvalidInputError):
        train_tokenizer(np.zeros((0, 8, 64)), cfg.codec_config(), cb, cfg.critic_config(), cfg.loss_weights(), tc)


def test_short_lm_run_reduces_loss():
    cfg = desk_preset().override("lm", steps=60)
    model = MicroLm(cfg.lm_config())
    grids = synthetic_band_corpus(16, 2, 8, 64, seed=0)
    hist = train_lm(model, grids, random_prefixes(16, 2, 32, 0), cfg.lm_train_config())
    assert len(hist) == 60
    assert hist[-1]["nll"] < 0.5 * hist[0]["nll"]
