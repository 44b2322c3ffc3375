import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spsflow import tensors
from spsflow.tensors import (ConvGeometry, FeatureMap, ShapeError, Tensor4, conv2d_dense,
                             inverse_permutation, maxpool2, permute_channels, relu, requantize)

from conftest import random_fm, scalar_conv


def test_identity_kernel():
    fm = FeatureMap(np.array([[[1, 2], [3, 4]]]))
    out = conv2d_dense(fm, Tensor4(np.ones((1, 1, 1, 1))), ConvGeometry(1, 0))
    assert out == fm


def test_zero_weights_give_zero_map(rng):
    fm = random_fm(rng, 3, 5, 5)
    out = conv2d_dense(fm, Tensor4.zeros(4, 3, 3, 3))
    assert not out.values.any() and out.shape == (4, 5, 5)


def test_all_ones_3x3_sums_to_45():
    fm = FeatureMap(np.arange(1, 10).reshape(1, 3, 3))
    out = conv2d_dense(fm, Tensor4(np.ones((1, 1, 3, 3))), ConvGeometry(1, 0))
    assert out.shape == (1, 1, 1) and out.values[0, 0, 0] == 45


@pytest.mark.parametrize("stride,pad,k", [(1, 1, 3), (2, 1, 3), (1, 0, 3), (1, 0, 1), (2, 2, 5)])
def test_matches_scalar_loops(rng, stride, pad, k):
    h = 9 if stride == 2 and k == 5 else 7
    fm = random_fm(rng, 3, h, h)
    w = Tensor4(rng.integers(-128, 128, size=(4, 3, k, k)))
    try:
        out = conv2d_dense(fm, w, ConvGeometry(stride, pad))
    except ShapeError:
        pytest.skip("non-integral geometry")
    np.testing.assert_array_equal(out.values, scalar_conv(fm.values, w.values, stride, pad))


def test_linear_in_weights(rng):
    fm = random_fm(rng, 4, 6, 6)
    a = rng.integers(-60, 60, size=(5, 4, 3, 3))
    b = rng.integers(-60, 60, size=(5, 4, 3, 3))
    lhs = conv2d_dense(fm, Tensor4(a + b)).values
    rhs = conv2d_dense(fm, Tensor4(a)).values + conv2d_dense(fm, Tensor4(b)).values
    np.testing.assert_array_equal(lhs, rhs)


def test_masking_one_tap_removes_its_contribution(rng):
    fm = random_fm(rng, 2, 5, 5)
    w = rng.integers(-128, 128, size=(3, 2, 3, 3))
    kh, kw = 2, 1
    masked = w.copy()
    masked[:, :, kh, kw] = 0
    tap = np.zeros_like(w)
    tap[:, :, kh, kw] = w[:, :, kh, kw]
    full = conv2d_dense(fm, Tensor4(w)).values
    np.testing.assert_array_equal(conv2d_dense(fm, Tensor4(masked)).values,
                                  full - conv2d_dense(fm, Tensor4(tap)).values)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), c_out=st.integers(1, 8))
def test_filter_axis_equivariance(seed, c_out):
    r = np.random.default_rng(seed)
    fm = random_fm(r, 3, 4, 4)
    w = r.integers(-128, 128, size=(c_out, 3, 3, 3))
    perm = r.permutation(c_out)
    # permuting the output equals convolving with filters moved the same way
    permuted_w = np.empty_like(w)
    permuted_w[perm] = w
    assert permute_channels(conv2d_dense(fm, Tensor4(w)), perm) == conv2d_dense(fm, Tensor4(permuted_w))


def test_dimension_mismatch_is_reported():
    with pytest.raises(ShapeError, match="c_in=3"):
        conv2d_dense(FeatureMap(np.zeros((2, 4, 4))), Tensor4.zeros(1, 3, 3, 3))


def test_non_integral_output_rejected():
    with pytest.raises(ShapeError):
        conv2d_dense(FeatureMap(np.zeros((1, 4, 4))), Tensor4.zeros(1, 1, 3, 3), ConvGeometry(2, 0))


def test_relu_examples():
    assert relu(FeatureMap(np.array([[[-1, 0, 5]]]))).values.tolist() == [[[0, 0, 5]]]
    assert not relu(FeatureMap(-np.ones((2, 2, 2)))).values.any()
    pos = FeatureMap(np.arange(1, 9).reshape(2, 2, 2))
    assert relu(pos) == pos


def test_maxpool_examples(rng):
    assert maxpool2(FeatureMap(np.array([[[1, 2], [3, 4]]]))).values.tolist() == [[[4]]]
    const = maxpool2(FeatureMap(np.full((2, 4, 6), 7)))
    assert const.shape == (2, 2, 3) and (const.values == 7).all()
    fm = rng.permutation(16).reshape(1, 4, 4)
    brute = [[max(fm[0, y + dy, x + dx] for dy in (0, 1) for dx in (0, 1)) for x in (0, 2)] for y in (0, 2)]
    assert maxpool2(FeatureMap(fm)).values[0].tolist() == brute
    with pytest.raises(ShapeError):
        maxpool2(FeatureMap(np.zeros((1, 3, 4))))


def test_permutation_examples(rng):
    fm = random_fm(rng, 4, 3, 3)
    assert permute_channels(fm, np.arange(4)) == fm
    perm = rng.permutation(4)
    assert permute_channels(permute_channels(fm, perm), inverse_permutation(perm)) == fm
    swap = [0, 2, 1, 3]
    assert permute_channels(permute_channels(fm, swap), swap) == fm
    with pytest.raises(ValueError):
        permute_channels(fm, [0, 0, 1, 2])


def test_requantize_fits_int8_and_commutes_with_permutation(rng):
    fm = FeatureMap(rng.integers(-100000, 100000, size=(5, 4, 4)))
    q = requantize(fm)
    assert q.values.min() >= -128 and q.values.max() <= 127
    perm = rng.permutation(5)
    assert requantize(permute_channels(fm, perm)) == permute_channels(q, perm)
    small = FeatureMap(np.array([[[-127, 127]]]))
    assert requantize(small) == small


def test_value_ranges():
    with pytest.raises(ValueError):
        Tensor4(np.full((1, 1, 1, 1), 200))
    with pytest.raises(OverflowError):
        FeatureMap(np.full((1, 1, 1), 2**40))
    with pytest.raises(ValueError):
        Tensor4.from_flat(1, 1, 2, 2, [1, 2, 3])


@pytest.mark.parametrize("make", [lambda r: Tensor4(r.integers(-128, 128, size=(2, 3, 3, 3))),
                                  lambda r: FeatureMap(r.integers(-2**31, 2**31, size=(3, 4, 5)))])
def test_blob_and_json_round_trip(rng, tmp_path, make):
    t = make(rng)
    assert tensors.from_bytes(tensors.to_bytes(t)) == t
    assert tensors.from_json(tensors.to_json(t)) == t
    tensors.save(t, tmp_path / "t.bin")
    assert tensors.load(tmp_path / "t.bin") == t
    assert tensors.to_bytes(t)[:4] == b"TNSR"
