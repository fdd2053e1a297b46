import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from attnatlas.errors import ShapeError
from attnatlas.numerics import Rng, as_matrix, gelu, gelu_grad, layer_norm, matmul, sample_normal, softmax_rows

# reference values computed at 30 digits with mpmath
GELU_REF = {1.0: (0.84119199060827670478, 1.0829640838457825551),
            -2.0: (-0.045402305912224981219, -0.086099256623618381565),
            0.5: (0.34571400982514392204, 0.86736990353464231156)}

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(np.zeros((2, 3)), np.zeros((2, 3)))


def test_matmul_values():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(matmul(a, np.eye(2)), a)
    assert np.array_equal(matmul(a, a), np.array([[7.0, 10.0], [15.0, 22.0]]))


def test_as_matrix_rejects():
    with pytest.raises(ShapeError):
        as_matrix([1.0, 2.0])
    with pytest.raises(ValueError):
        as_matrix([[1.0, np.nan]])


def test_softmax_reference():
    got = softmax_rows(np.array([[1.0, 2.0, 3.0]]))
    ref = [0.090030573170380457998, 0.24472847105479765247, 0.66524095577482188953]
    assert np.allclose(got[0], ref, rtol=0, atol=1e-15)


def test_softmax_large_logits_stay_finite():
    out = softmax_rows(np.array([[1000.0, 1000.0, -1000.0]]))
    assert np.all(np.isfinite(out))
    assert out[0, 0] == out[0, 1] == 0.5


@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 9)), elements=finite))
def test_softmax_rows_are_distributions(m):
    p = softmax_rows(m)
    assert np.all(p >= 0)
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-12)


@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 7)), elements=finite), finite)
def test_softmax_shift_invariant(m, c):
    assert np.allclose(softmax_rows(m), softmax_rows(m + c), atol=1e-12)


def test_layer_norm_reference():
    got = layer_norm(np.array([1.0, 2.0, 3.0, 4.0]), np.ones(4), np.zeros(4), 1e-12)
    ref = [-1.3416407864993371615, -0.44721359549977905384, 0.44721359549977905384, 1.3416407864993371615]
    assert np.allclose(got, ref, rtol=0, atol=1e-11)


def test_layer_norm_errors():
    with pytest.raises(ShapeError):
        layer_norm(np.zeros(4), np.ones(3), np.zeros(4), 1e-12)
    with pytest.raises(ValueError):
        layer_norm(np.zeros(4), np.ones(4), np.zeros(4), 0.0)


@settings(max_examples=50)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 8)), elements=st.floats(-10, 10)))
def test_layer_norm_rows_standardised(x):
    spread = x.std(axis=1)
    y = layer_norm(x, np.ones(x.shape[1]), np.zeros(x.shape[1]), 1e-12)
    for row, s in zip(y, spread):
        if s > 1e-3:
            assert abs(row.mean()) < 1e-9
            assert abs(row.var() - 1.0) < 1e-6


@pytest.mark.parametrize("x", sorted(GELU_REF))
def test_gelu_reference(x):
    val, grad = GELU_REF[x]
    assert gelu(x) == pytest.approx(val, abs=1e-15)
    assert float(gelu_grad(x)) == pytest.approx(grad, abs=1e-14)


def test_gelu_scalar_returns_float():
    assert isinstance(gelu(0.3), float)
    assert gelu(0.0) == 0.0


@given(st.floats(-8, 8))
def test_gelu_grad_matches_central_difference(x):
    h = 1e-6
    num = (gelu(x + h) - gelu(x - h)) / (2 * h)
    assert abs(num - float(gelu_grad(x))) < 1e-7


def test_rng_uniform_frozen_stream():
    # top 53 bits of the first PCG64 words for seed 0
    u = Rng(0).uniform(3)
    assert u.tolist() == [0.6369616873214543, 0.2697867137638703, 0.04097352393619469]


def test_rng_reproducible_and_spawn_independent():
    a, b = Rng(42), Rng(42)
    assert np.array_equal(a.normal(7), b.normal(7))
    c1, c2 = Rng(42).spawn(1), Rng(42).spawn(2)
    assert not np.array_equal(c1.raw(4), c2.raw(4))
    assert np.array_equal(Rng(42).spawn(1).raw(4), Rng(42).spawn(1).raw(4))


def test_rng_normal_moments():
    z = Rng(3).normal(200_000)
    assert abs(z.mean()) < 0.01
    assert abs(z.std() - 1.0) < 0.01


@given(st.integers(0, 2**32), st.integers(1, 1000))
def test_rng_integer_in_range(seed, high):
    r = Rng(seed)
    for _ in range(5):
        assert 0 <= r.integer(high) < high


@given(st.integers(0, 2**32), st.integers(0, 30))
def test_shuffle_is_permutation(seed, n):
    items = list(range(n))
    assert sorted(Rng(seed).shuffle(items)) == list(range(n))


@given(st.integers(0, 2**32), st.integers(1, 40), st.data())
def test_sample_without_replacement_distinct(seed, population, data):
    k = data.draw(st.integers(0, population))
    picks = Rng(seed).sample_without_replacement(population, k)
    assert len(set(picks)) == k and all(0 <= p < population for p in picks)


def test_rng_errors():
    with pytest.raises(ValueError):
        Rng(-1)
    with pytest.raises(ValueError):
        Rng(0).integer(0)
    with pytest.raises(ValueError):
        Rng(0).sample_without_replacement(3, 4)
    with pytest.raises(ValueError):
        sample_normal(Rng(0), 0.0, -1.0, 3)


def test_sample_normal_scales():
    z = sample_normal(Rng(1), 2.0, 0.0, 5)
    assert np.all(z == 2.0)
    assert math.isclose(sample_normal(Rng(1), 0.0, 0.02, 1)[0], 0.02 * Rng(1).normal(1)[0])
