import numpy as np
import pytest
import torch

from bandtok.errors import InvalidInputError
from bandtok.losses import (CriticConfig, CriticOutput, LossWeights, MultiScaleCritic, composite_loss,
                            critic_forward, gan_losses, interpolation_matrix, resize_bilinear)
from bandtok.verify import fd_relative_errors, tiny_composite_problem


def test_resize_identity_and_constants(gen):
    m = gen.standard_normal((6, 10))
    assert np.array_equal(resize_bilinear(m, 1.0), m)
    for s in (0.5, 0.25, 0.3, 0.8):
        out = resize_bilinear(np.full((12, 20), 3.25), s)
        assert np.allclose(out, 3.25, atol=1e-15)


def test_resize_ramp_by_hand():
    ramp = np.arange(16.0).reshape(4, 4)
    # half-pixel centres land midway between source rows/cols 0-1 and 2-3
    want = np.array([[2.5, 4.5], [10.5, 12.5]])
    assert np.max(np.abs(resize_bilinear(ramp, 0.5) - want)) < 1e-12


def test_interpolation_rows_sum_to_one():
    for n_in, n_out in ((7, 3), (4, 4), (5, 9), (1, 3)):
        w = interpolation_matrix(n_in, n_out)
        assert np.allclose(w.sum(1), 1.0) and np.all(w >= 0)


def test_resize_torch_numpy_agree(gen):
    m = gen.standard_normal((2, 9, 14))
    assert np.allclose(resize_bilinear(torch.as_tensor(m), 0.5).numpy(), resize_bilinear(m, 0.5), atol=1e-14)
    with pytest.raises(InvalidInputError):
        resize_bilinear(m, 0.0)


def test_zero_critic_zero_scores():
    critic = MultiScaleCritic().zero_()
    for out in critic_forward(np.zeros((64, 64)), critic):
        assert torch.all(out.score == 0)


def test_default_scales_on_128_square():
    critic = MultiScaleCritic()
    outs = critic_forward(np.random.default_rng(0).standard_normal((128, 128)), critic)
    assert [o.scale for o in outs] == [1.0, 0.5, 0.25]
    for o, side in zip(outs, (128, 64, 32)):
        n = side
        for _ in range(4):
            n = (n + 2 * 1 - 4) // 2 + 1
        assert tuple(o.score.shape[-2:]) == (n, n)
        assert [tuple(f.shape[-2:]) for f in o.features] == critic.critics[0].output_shape(side, side)[:3]


def test_small_inputs_skip_scales():
    critic = MultiScaleCritic()
    skipped = []
    outs = critic_forward(np.zeros((20, 20)), critic, skipped)
    assert [o.scale for o in outs] == [1.0]
    assert len(skipped) == 2 and "0.5" in skipped[0]
    with pytest.raises(InvalidInputError):
        critic_forward(np.zeros((4, 4)), critic)


def _out(score, feats, scale=1.0):
    return CriticOutput(scale, torch.as_tensor(score, dtype=torch.float64),
                        [torch.as_tensor(f, dtype=torch.float64) for f in feats])


def test_composite_zero_case(gen):
    x = gen.standard_normal((8, 8))
    zero = [_out(np.zeros((2, 2)), [np.zeros((3, 3))])]
    total, terms = composite_loss(x, x.copy(), 0.0, zero, zero)
    assert float(total) == 0.0
    assert set(terms) == {"rec", "perc", "adv", "fm", "commit"}


def test_composite_unit_terms_give_weight_sum(gen):
    x = gen.standard_normal((8, 8))
    real = [_out(np.ones((2, 2)), [np.zeros((3, 3))])]
    fake = [_out(-np.ones((2, 2)), [np.ones((3, 3))])]
    total, terms = composite_loss(x, x + 1.0, 1.0, real, fake, LossWeights(),
                                  perceptual=lambda a, b: torch.tensor(1.0, dtype=torch.float64))
    assert {k: float(v) for k, v in terms.items()} == {"rec": 1.0, "perc": 1.0, "adv": 1.0, "fm": 1.0, "commit": 1.0}
    assert float(total) == 14.5


def test_composite_random_matches_term_by_term(gen):
    x, xh = gen.standard_normal((8, 8)), gen.standard_normal((8, 8))
    rs, fs = [gen.standard_normal((3, 3)), gen.standard_normal((2, 2))], [gen.standard_normal((3, 3)), gen.standard_normal((2, 2))]
    rf = [[gen.standard_normal((4, 4)), gen.standard_normal((2, 5))], [gen.standard_normal((3, 1))]]
    ff = [[gen.standard_normal((4, 4)), gen.standard_normal((2, 5))], [gen.standard_normal((3, 1))]]
    real = [_out(s, f) for s, f in zip(rs, rf)]
    fake = [_out(s, f) for s, f in zip(fs, ff)]
    w = LossWeights(2.0, 0.5, 0.7, 3.0, 1.5)
    total, _ = composite_loss(x, xh, 0.3, real, fake, w)
    rec = np.mean(np.abs(x - xh))
    adv = np.mean([-np.mean(s) for s in fs])
    pairs = [(a, b) for ra, fa in zip(rf, ff) for a, b in zip(ra, fa)]
    fm = np.mean([np.mean(np.abs(a - b)) for a, b in pairs])
    assert abs(float(total) - (2.0 * rec + 0.7 * adv + 3.0 * fm + 1.5 * 0.3)) < 1e-12


def test_gan_losses_examples(gen):
    ones = [torch.ones(3, 3, dtype=torch.float64)]
    adv, critic, fm = gan_losses(ones, [-o for o in ones], [[o] for o in ones], [[o] for o in ones])
    assert float(critic) == 0.0 and float(fm) == 0.0 and float(adv) == 1.0
    r = [torch.as_tensor(gen.standard_normal((4, 4))) for _ in range(2)]
    f = [torch.as_tensor(gen.standard_normal((4, 4))) for _ in range(2)]
    _, critic, _ = gan_losses(r, f, [[]] * 2, [[]] * 2)
    want = np.mean([np.mean(np.maximum(0, 1 - a.numpy())) + np.mean(np.maximum(0, 1 + b.numpy()))
                    for a, b in zip(r, f)])
    assert abs(float(critic) - want) < 1e-12
    with pytest.raises(InvalidInputError):
        gan_losses(r, f[:1], [[]] * 2, [[]])


def test_shape_mismatch_and_weight_validation():
    with pytest.raises(InvalidInputError):
        composite_loss(np.zeros((2, 2)), np.zeros((2, 3)), 0.0, [], [])
    with pytest.raises(InvalidInputError):
        LossWeights(rec=-1.0)
    with pytest.raises(InvalidInputError):
        LossWeights(fm=float("nan"))


def test_composite_gradients_through_critic():
    params, loss = tiny_composite_problem(seed=2)
    errs = fd_relative_errors(loss, params)
    assert max(errs.values()) < 1e-4, errs


def test_real_features_detached_by_default(gen):
    critic = MultiScaleCritic(CriticConfig(channels=[4, 4, 1], scales=[1.0], seed=1))
    x = torch.as_tensor(gen.standard_normal((1, 16, 16)))
    xh = torch.as_tensor(gen.standard_normal((1, 16, 16)))
    real = critic_forward(x, critic)
    total, terms = composite_loss(x, xh, 0.0, real, critic_forward(xh, critic), LossWeights(0, 0, 0, 1, 0))
    total.backward()
    # only the fake branch reaches the critic: the result equals a run with a frozen real copy
    g_default = [p.grad.clone() for p in critic.parameters()]
    critic.zero_grad()
    frozen = [CriticOutput(o.scale, o.score.detach(), [f.detach() for f in o.features]) for o in critic_forward(x, critic)]
    composite_loss(x, xh, 0.0, frozen, critic_forward(xh, critic), LossWeights(0, 0, 0, 1, 0))[0].backward()
    assert all(torch.equal(a, p.grad) for a, p in zip(g_default, critic.parameters()))
