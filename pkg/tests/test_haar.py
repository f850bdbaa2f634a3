import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bandtok.errors import InvalidInputError
from bandtok.haar import PatchedSpectrogram, haar_forward, haar_inverse, haar_merge, haar_split


def test_constant_block():
    p = haar_forward(np.ones((2, 2)))
    assert p.subbands[:, 0, 0].tolist() == [2.0, 0.0, 0.0, 0.0]


def test_corner_block():
    p = haar_forward(np.array([[1.0, 0.0], [0.0, 0.0]]))
    assert p.subbands[:, 0, 0].tolist() == [0.5, 0.5, 0.5, 0.5]


def test_subband_formulas_by_hand(gen):
    m = gen.standard_normal((2, 2))
    a, b, c, d = m[0, 0], m[0, 1], m[1, 0], m[1, 1]
    s = haar_forward(m).subbands[:, 0, 0]
    assert np.allclose(s, [(a + b + c + d) / 2, (a - b + c - d) / 2, (a + b - c - d) / 2, (a - b - c + d) / 2],
                       atol=1e-15)


def test_inverse_examples():
    one = np.zeros((4, 1, 1))
    one[0] = 2.0
    assert np.array_equal(haar_inverse(PatchedSpectrogram(one, (2, 2))), np.ones((2, 2)))
    assert np.array_equal(haar_inverse(PatchedSpectrogram(np.zeros((4, 3, 2)), (6, 4))), np.zeros((6, 4)))


@pytest.mark.parametrize("shape", [(4, 4), (6, 6), (2, 10)])
def test_roundtrip_small(gen, shape):
    m = gen.standard_normal(shape)
    assert np.max(np.abs(haar_inverse(haar_forward(m)) - m)) < 1e-12


@given(arrays(np.float64, st.tuples(st.integers(1, 17), st.integers(1, 17)),
              elements=st.floats(-1e3, 1e3)))
def test_roundtrip_any_shape(m):
    p = haar_forward(m)
    assert p.subbands.shape == (4, -(-m.shape[0] // 2), -(-m.shape[1] // 2))
    assert np.allclose(haar_inverse(p), m, atol=1e-9)


@given(arrays(np.float64, st.tuples(st.integers(1, 8).map(lambda n: 2 * n), st.integers(1, 8).map(lambda n: 2 * n)),
              elements=st.floats(-1e3, 1e3)))
def test_energy_conserved_even(m):
    e = np.sum(m ** 2)
    assert abs(np.sum(haar_forward(m).subbands ** 2) - e) <= 1e-10 * max(e, 1e-300) + 1e-300


def test_odd_sizes_replicate_edge():
    m = np.arange(9.0).reshape(3, 3)
    p = haar_forward(m)
    padded = np.pad(m, ((0, 1), (0, 1)), mode="edge")
    assert np.allclose(haar_inverse(PatchedSpectrogram(p.subbands, (4, 4))), padded)


def test_torch_and_numpy_agree(gen):
    m = gen.standard_normal((3, 6, 8))
    np_parts = haar_split(m)
    t_parts = haar_split(torch.as_tensor(m))
    for a, b in zip(np_parts, t_parts):
        assert np.array_equal(a, b.numpy())
    out = haar_merge(*t_parts, out=torch.empty(3, 6, 8, dtype=torch.float64))
    assert torch.allclose(out, torch.as_tensor(m), atol=1e-14)


def test_errors():
    with pytest.raises(InvalidInputError):
        haar_forward(np.zeros((0, 4)))
    with pytest.raises(InvalidInputError):
        haar_forward(np.zeros(4))
    with pytest.raises(InvalidInputError):
        haar_inverse(PatchedSpectrogram(np.zeros((3, 2, 2)), (4, 4)))
    with pytest.raises(InvalidInputError):
        haar_inverse(PatchedSpectrogram(np.zeros((4, 2, 2)), (8, 4)))
