import math

import numpy as np
import pytest
import torch
from scipy.special import erf

from bandtok.errors import ConfigError, InvalidInputError
from bandtok.lm import (ConditioningPrefix, MicroLm, MicroLmConfig, SamplerConfig, cfg_mix,
                        encode_segment_time, forward, nll_from_logits, perplexity, sample,
                        sequence_for, teacher_forced_nll)
from bandtok.tokens import TokenGrid, build_sequence
from bandtok.verify import fd_relative_errors, reference_rope_1d, tiny_lm_problem


def _model(**kw):
    base = dict(n_audio=10, d_model=16, n_layers=2, n_heads=2, d_ff=32, init_scale=0.3, seed=3)
    base.update(kw)
    return MicroLm(MicroLmConfig(**base))


def _prefix(gen, d=16, rows=2):
    return ConditioningPrefix(gen.standard_normal((rows, d)), 12.0, 180.0)


def test_causality(gen):
    m = _model()
    p = _prefix(gen)
    seq = build_sequence(m.prefix_len(p), gen.integers(0, 10, 12), 3, m.cfg.vocab)
    base = forward(seq, p, m)
    for j in range(seq.prefix_len + 1, len(seq)):
        seq2 = build_sequence(m.prefix_len(p), seq.tokens[seq.prefix_len + 1:] - 2, 3, m.cfg.vocab)
        seq2.tokens[j] = (seq.tokens[j] - 2 + 1) % 10 + 2       # another audio id
        out = forward(seq2, p, m)
        assert np.max(np.abs(out[:j] - base[:j])) == 0.0
        assert np.max(np.abs(out[j:] - base[j:])) > 0.0


def _layer_norm(x, w, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * w + b


def test_hand_computed_forward(gen):
    cfg = MicroLmConfig(n_audio=3, d_model=4, n_layers=1, n_heads=1, d_ff=8, segment_time=False,
                        rope_allocation=[2, 0, 2], seed=9)
    m = MicroLm(cfg)
    W = {k: gen.standard_normal(tuple(v.shape)) * 0.7 for k, v in m.state_dict().items()}
    m.load_state_dict({k: torch.as_tensor(v) for k, v in W.items()})
    p = ConditioningPrefix.empty(4, null_flag=False)
    seq = build_sequence(0, np.array([2, 0]), 1, cfg.vocab)          # [BOS, a2, a0]
    got = forward(seq, p, m)

    x = W["tok_emb"][seq.tokens]
    h = _layer_norm(x, W["blocks.0.ln1.weight"], W["blocks.0.ln1.bias"])
    q, k, v = h @ W["blocks.0.wq.weight"].T, h @ W["blocks.0.wk.weight"].T, h @ W["blocks.0.wv.weight"].T
    pos = seq.positions.stack()

    def rot(t):
        # pair 0 follows the token axis, pair 1 the band axis, both at frequency 1
        out = t.copy()
        for pair, ang in ((0, pos[:, 0]), (1, pos[:, 2])):
            c, s = np.cos(ang), np.sin(ang)
            a, b = t[:, 2 * pair], t[:, 2 * pair + 1]
            out[:, 2 * pair], out[:, 2 * pair + 1] = a * c - b * s, a * s + b * c
        return out
    q, k = rot(q), rot(k)
    scores = q @ k.T / 2.0
    scores[np.triu_indices(3, 1)] = -np.inf
    att = np.exp(scores - scores.max(1, keepdims=True))
    att /= att.sum(1, keepdims=True)
    x = x + (att @ v) @ W["blocks.0.wo.weight"].T
    f = _layer_norm(x, W["blocks.0.ln2.weight"], W["blocks.0.ln2.bias"]) @ W["blocks.0.ff1.weight"].T + W["blocks.0.ff1.bias"]
    f = 0.5 * f * (1 + erf(f / math.sqrt(2)))
    x = x + f @ W["blocks.0.ff2.weight"].T + W["blocks.0.ff2.bias"]
    want = _layer_norm(x, W["ln_f.weight"], W["ln_f.bias"]) @ W["out.weight"].T + W["out.bias"]
    assert np.max(np.abs(got - want)) < 1e-10


def test_conditioning_is_consumed(gen):
    m = _model()
    m.null_emb.data = torch.as_tensor(gen.standard_normal(16))
    p = _prefix(gen)
    seq = build_sequence(m.prefix_len(p), gen.integers(0, 10, 6), 3, m.cfg.vocab)
    assert not np.allclose(forward(seq, p, m), forward(seq, p.null(), m))


def test_segment_time_changes_logits(gen):
    m = _model()
    e = gen.standard_normal((2, 16))
    a, b = ConditioningPrefix(e, 0.0, 60.0), ConditioningPrefix(e, 30.0, 60.0)
    seq = build_sequence(m.prefix_len(a), gen.integers(0, 10, 6), 3, m.cfg.vocab)
    assert not np.allclose(forward(seq, a, m), forward(seq, b, m))


def test_gradients_match_finite_differences():
    model, loss = tiny_lm_problem(seed=4)
    errs = fd_relative_errors(loss, dict(model.named_parameters()))
    assert max(errs.values()) < 1e-4, errs


def test_zero_loss_and_unused_rows_have_zero_gradient(gen):
    m = _model()
    p = _prefix(gen)
    seq = build_sequence(m.prefix_len(p), np.array([1, 2, 3, 1, 2, 3]), 3, m.cfg.vocab)
    logits = m(seq, p)
    (0.0 * logits.sum()).backward()
    assert all(torch.all(q.grad == 0) for q in m.parameters() if q.grad is not None)
    m.zero_grad()
    logits = m(seq, p)
    nll_from_logits(logits, torch.as_tensor(seq.tokens), seq.prefix_len + 1).mean().backward()
    used = set(seq.tokens[seq.prefix_len:].tolist())
    for row in range(m.cfg.vocab.size):
        if row not in used:
            assert torch.all(m.tok_emb.grad[row] == 0)
    assert torch.any(m.tok_emb.grad[sorted(used)] != 0)


def test_uniform_model_nll_is_log_v(gen):
    m = _model().zero_()
    p = _prefix(gen)
    seq = build_sequence(m.prefix_len(p), gen.integers(0, 10, 9), 3, m.cfg.vocab)
    nll = teacher_forced_nll(seq, p, m)
    assert nll.shape == (9,)
    assert np.allclose(nll, math.log(m.cfg.vocab.size), atol=1e-12)


def test_confident_model_nll_near_zero(gen):
    m = _model().zero_()
    with torch.no_grad():
        m.out.bias[2 + 4] = 60.0
    p = _prefix(gen)
    seq = build_sequence(m.prefix_len(p), np.full(6, 4), 3, m.cfg.vocab)
    assert np.max(teacher_forced_nll(seq, p, m)) < 1e-20


def test_nll_matches_independent_softmax(gen):
    m = _model()
    p = _prefix(gen)
    seq = build_sequence(m.prefix_len(p), gen.integers(0, 10, 9), 3, m.cfg.vocab)
    logits = forward(seq, p, m)
    start = seq.prefix_len + 1
    manual = []
    for i in range(start, len(seq)):
        row = logits[i - 1]
        manual.append(-(row[seq.tokens[i]] - (row.max() + np.log(np.sum(np.exp(row - row.max()))))))
    nll = teacher_forced_nll(seq, p, m)
    assert abs(perplexity(nll) - math.exp(np.mean(manual))) < 1e-10


def test_cfg_mix_examples(gen):
    c, u = gen.standard_normal(50), gen.standard_normal(50)
    assert np.array_equal(cfg_mix(c, u, 1.0), c)
    assert np.array_equal(cfg_mix(c, u, 0.0), u)
    assert cfg_mix(np.array([1.0, -1.0]), np.array([0.0, 0.0]), 2.0).tolist() == [2.0, -2.0]
    with pytest.raises(InvalidInputError):
        cfg_mix(np.zeros(3), np.zeros(4), 1.0)


def test_segment_time_examples():
    assert encode_segment_time(0.0, 5.0, 8)[0].tolist() == [0.0, 1.0] * 4
    row = encode_segment_time(1.0, 1.0, 2)[0]
    assert row.tolist() == [math.sin(1.0), math.cos(1.0)]
    grid = [encode_segment_time(s, 300.0, 16)[0] for s in range(0, 300, 7)]
    for i in range(len(grid)):
        assert np.array_equal(grid[i], encode_segment_time(7.0 * i, 300.0, 16)[0])
        for j in range(i):
            assert np.max(np.abs(grid[i] - grid[j])) > 0
    with pytest.raises(InvalidInputError):
        encode_segment_time(5.0, 2.0, 8)
    with pytest.raises(InvalidInputError):
        encode_segment_time(0.0, 2.0, 3)


def test_sampling_guidance_with_identical_prefixes_equals_single_pass(gen):
    m = _model()
    p = _prefix(gen)
    single = sample(p, m, SamplerConfig(1.0, 1.0, 5, seed=11), 3, 3)
    both = sample(p, m, SamplerConfig(2.0, 1.0, 5, seed=11), 3, 3, null_prefix=p)
    assert np.array_equal(single.indices, both.indices)


def test_greedy_is_seed_independent_and_sampling_is_reproducible(gen):
    m = _model()
    p = _prefix(gen)
    g1 = sample(p, m, SamplerConfig(2.0, 0.0, None, seed=1), 3, 3)
    g2 = sample(p, m, SamplerConfig(2.0, 0.0, None, seed=99), 3, 3)
    assert np.array_equal(g1.indices, g2.indices)
    a = sample(p, m, SamplerConfig(2.0, 1.0, 4, seed=7), 4, 3)
    b = sample(p, m, SamplerConfig(2.0, 1.0, 4, seed=7), 4, 3)
    assert np.array_equal(a.indices, b.indices)
    assert a.indices.shape == (4, 3) and a.K == 10
    assert a.indices.min() >= 0 and a.indices.max() < 10


def test_one_d_mode_is_reference_rope_bitwise(gen, monkeypatch):
    a = _model(rope_mode="1d")
    b = _model(rope_mode="2d")
    b.load_state_dict(a.state_dict())

    def ref_tables(positions):
        hd = b.cfg.head_dim
        # reference rotation of a (1, 0) pair recovers cos and sin of each angle
        rot_x = reference_rope_1d(np.tile([1.0, 0.0], (len(positions), hd // 2)), positions[:, 0])
        return torch.as_tensor(rot_x[:, 0::2].copy()), torch.as_tensor(rot_x[:, 1::2].copy())
    monkeypatch.setattr(b, "rope_tables", ref_tables)
    p = _prefix(gen)
    seq = build_sequence(a.prefix_len(p), gen.integers(0, 10, 9), 3, a.cfg.vocab)
    assert np.array_equal(forward(seq, p, a), forward(seq, p, b))


def test_sequence_for_and_checkpoint_tensors(gen):
    m = _model()
    p = _prefix(gen)
    seq = sequence_for(m, p, TokenGrid(gen.integers(0, 10, (2, 3)), 10))
    assert seq.prefix_len == 4 and len(seq) == 4 + 1 + 6
    clone = _model(seed=99).load_tensors({k: v.numpy() for k, v in m.tensors().items()})
    assert np.array_equal(forward(seq, p, m), forward(seq, p, clone))


def test_config_and_input_validation(gen):
    with pytest.raises(ConfigError):
        MicroLmConfig(d_model=10, n_heads=4)
    with pytest.raises(ConfigError):
        MicroLmConfig(rope_mode="3d")
    with pytest.raises(ConfigError):
        SamplerConfig(temperature=-1.0)
    with pytest.raises(InvalidInputError):
        ConditioningPrefix(np.zeros((1, 4)), 5.0, 2.0)
    m = _model()
    with pytest.raises(InvalidInputError):
        m.prefix_rows(ConditioningPrefix(np.zeros((1, 8))))
    with pytest.raises(InvalidInputError):
        sample(_prefix(gen), m, SamplerConfig(), 0, 3)
