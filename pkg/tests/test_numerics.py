import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import numeric_grad, rel_err
from longmalconv.numerics import (EOF_ID, PAD_ID, VOCAB_SIZE, Conv1dLayer, EmbeddingTable, InputError,
                                  LinearLayer, NumericError, bce_with_logits, conv1d_backward,
                                  conv1d_forward, conv1d_windows, conv1d_windows_backward,
                                  conv_output_length, embed, embed_backward, glu_backward, glu_gate,
                                  linear_backward, linear_forward, relu_backward, relu_forward,
                                  temporal_max_pool, temporal_max_pool_backward)


def naive_conv(X, w, b, stride):
    """Direct loop: y[l, o] = b[o] + sum_k sum_c w[o, c, k] * X[l*S + k, c]."""
    T, cin = X.shape
    cout, _, W = w.shape
    L = (T - W) // stride + 1
    y = np.zeros((L, cout))
    for l in range(L):
        for o in range(cout):
            acc = b[o]
            for k in range(W):
                for c in range(cin):
                    acc += w[o, c, k] * X[l * stride + k, c]
            y[l, o] = acc
    return y


def random_conv(rng, cin, cout, W, S, dtype=np.float64):
    return Conv1dLayer(rng.standard_normal((cout, cin, W)).astype(dtype),
                       rng.standard_normal(cout).astype(dtype), S)


# --- constants and embedding ---------------------------------------------------

def test_vocabulary_layout():
    assert (EOF_ID, PAD_ID, VOCAB_SIZE) == (256, 257, 258)


def test_embedding_lookup_matches_indexing(rng):
    table = EmbeddingTable.init(rng, 5)
    toks = rng.integers(0, VOCAB_SIZE, (3, 7))
    out = embed(toks, table)
    assert out.shape == (3, 7, 5)
    for i in range(3):
        for j in range(7):
            np.testing.assert_array_equal(out[i, j], table.weights[toks[i, j]])


def test_pad_row_is_zero_and_frozen(rng):
    table = EmbeddingTable.init(rng, 4)
    assert not table.weights[PAD_ID].any()
    toks = np.array([PAD_ID, 3, PAD_ID])
    grad = embed_backward(toks, np.ones((3, 4)), table)
    assert not grad[PAD_ID].any()
    np.testing.assert_array_equal(grad[3], np.ones(4))


def test_embedding_rejects_bad_ids(rng):
    table = EmbeddingTable.init(rng, 4)
    with pytest.raises(InputError):
        embed(np.array([VOCAB_SIZE]), table)
    with pytest.raises(InputError):
        embed(np.array([-1]), table)


@pytest.mark.parametrize("seed", range(5))
def test_embedding_backward_finite_difference(seed):
    rng = np.random.default_rng(seed)
    dim = int(rng.integers(1, 5))
    w = rng.standard_normal((VOCAB_SIZE, dim))
    w[PAD_ID] = 0
    toks = rng.integers(250, VOCAB_SIZE, int(rng.integers(2, 12)))  # include EOF/PAD sometimes
    R = rng.standard_normal((len(toks), dim))
    grad = embed_backward(toks, R, w)
    num = numeric_grad(lambda: float(np.sum(R * embed(toks, w))), w)
    num[PAD_ID] = 0
    assert rel_err(grad, num) < 1e-6


# --- convolution -------------------------------------------------------------

@pytest.mark.parametrize("T,cin,cout,W,S", [(10, 1, 1, 3, 1), (17, 2, 3, 4, 2), (33, 3, 2, 8, 8),
                                            (20, 2, 2, 5, 3), (9, 1, 4, 9, 9)])
def test_conv_forward_matches_naive_loop(rng, T, cin, cout, W, S):
    layer = random_conv(rng, cin, cout, W, S)
    X = rng.standard_normal((T, cin))
    np.testing.assert_allclose(conv1d_forward(X, layer), naive_conv(X, layer.weights, layer.bias, S),
                               rtol=1e-12, atol=1e-12)


def test_output_length_formula():
    assert conv_output_length(2_000_000, 512, 512) == 3906
    assert conv_output_length(512, 512, 512) == 1
    assert conv_output_length(1023, 512, 512) == 1
    assert conv_output_length(1024, 512, 512) == 2
    with pytest.raises(InputError):
        conv_output_length(511, 512, 512)


def test_stride_must_not_exceed_width(rng):
    with pytest.raises(InputError):
        random_conv(rng, 1, 1, 4, 5)
    with pytest.raises(InputError):
        random_conv(rng, 1, 1, 4, 0)


def test_windows_path_equals_full_path(rng):
    layer = random_conv(rng, 3, 4, 6, 2, np.float32)
    X = rng.standard_normal((40, 3)).astype(np.float32)
    from numpy.lib.stride_tricks import sliding_window_view
    win = sliding_window_view(X, 6, axis=0)[::2].transpose(0, 2, 1)
    np.testing.assert_array_equal(conv1d_windows(win, layer), conv1d_forward(X, layer))


def test_float32_rows_do_not_depend_on_batch(rng):
    layer = random_conv(rng, 8, 16, 32, 8, np.float32)
    win = rng.standard_normal((300, 32, 8)).astype(np.float32)
    full = conv1d_windows(win, layer)
    for i in (0, 17, 299):
        np.testing.assert_array_equal(conv1d_windows(win[i:i + 1], layer)[0], full[i])


def _conv_shapes(n):
    rng = np.random.default_rng(99)
    for _ in range(n):
        W = int(rng.integers(1, 7))
        S = int(rng.integers(1, W + 1))
        T = W + int(rng.integers(0, 12))
        yield T, int(rng.integers(1, 4)), int(rng.integers(1, 4)), W, S


@pytest.mark.parametrize("T,cin,cout,W,S", list(_conv_shapes(8)))
def test_conv_backward_finite_difference(T, cin, cout, W, S):
    rng = np.random.default_rng(T * 31 + W)
    layer = random_conv(rng, cin, cout, W, S)
    X = rng.standard_normal((T, cin))
    R = rng.standard_normal((conv_output_length(T, W, S), cout))
    f = lambda: float(np.sum(R * conv1d_forward(X, layer)))
    dX, dW, db = conv1d_backward(R, X, layer)
    assert rel_err(dX, numeric_grad(f, X)) < 1e-6
    assert rel_err(dW, numeric_grad(f, layer.weights)) < 1e-6
    assert rel_err(db, numeric_grad(f, layer.bias)) < 1e-6


def test_conv_windows_backward_finite_difference(rng):
    layer = random_conv(rng, 2, 3, 5, 2)
    win = rng.standard_normal((4, 5, 2))
    R = rng.standard_normal((4, 3))
    f = lambda: float(np.sum(R * conv1d_windows(win, layer)))
    dwin, dW, db = conv1d_windows_backward(R, win, layer)
    assert rel_err(dwin, numeric_grad(f, win)) < 1e-6
    assert rel_err(dW, numeric_grad(f, layer.weights)) < 1e-6
    assert rel_err(db, numeric_grad(f, layer.bias)) < 1e-6


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 9), st.integers(0, 40), st.integers(1, 3), st.data())
def test_conv_backward_is_adjoint(W, extra, cin, data):
    """<conv(X), R> == <X, dX> for the linear part, any shape."""
    S = data.draw(st.integers(1, W))
    rng = np.random.default_rng(W * 1000 + extra)
    layer = random_conv(rng, cin, 2, W, S)
    layer.bias[:] = 0
    X = rng.standard_normal((W + extra, cin))
    R = rng.standard_normal((conv_output_length(W + extra, W, S), 2))
    dX, _, _ = conv1d_backward(R, X, layer)
    assert np.isclose(np.sum(R * conv1d_forward(X, layer)), np.sum(X * dX), rtol=1e-10, atol=1e-10)


# --- GLU, pooling, head ------------------------------------------------------

def test_glu_matches_scalar_formula(rng):
    A, B = rng.standard_normal((2, 5, 3))
    out = glu_gate(A, B)
    for i in range(5):
        for j in range(3):
            assert np.isclose(out[i, j], A[i, j] / (1 + np.exp(-B[i, j])))


def test_glu_backward_finite_difference(rng):
    A, B = rng.standard_normal((2, 4, 3))
    R = rng.standard_normal((4, 3))
    dA, dB = glu_backward(R, A, B)
    f = lambda: float(np.sum(R * glu_gate(A, B)))
    assert rel_err(dA, numeric_grad(f, A)) < 1e-6
    assert rel_err(dB, numeric_grad(f, B)) < 1e-6


def test_max_pool_matches_loop_and_breaks_ties_low(rng):
    X = rng.integers(0, 3, (20, 6)).astype(np.float32)
    vals, idx = temporal_max_pool(X)
    for c in range(6):
        best = 0
        for t in range(20):
            if X[t, c] > X[best, c]:
                best = t
        assert idx[c] == best and vals[c] == X[best, c]


def test_max_pool_rejects_nan():
    X = np.zeros((3, 2))
    X[1, 1] = np.nan
    with pytest.raises(NumericError):
        temporal_max_pool(X)


def test_max_pool_backward_routes_to_winner(rng):
    X = rng.standard_normal((7, 3))
    R = rng.standard_normal(3)
    _, idx = temporal_max_pool(X)
    d = temporal_max_pool_backward(R, idx, 7)
    f = lambda: float(R @ temporal_max_pool(X)[0])
    assert rel_err(d, numeric_grad(f, X)) < 1e-6
    assert np.count_nonzero(d) == 3


def test_linear_and_relu_finite_difference(rng):
    layer = LinearLayer(rng.standard_normal((3, 5)), rng.standard_normal(3))
    x = rng.standard_normal(5)
    R = rng.standard_normal(3)
    f = lambda: float(R @ relu_forward(linear_forward(x, layer)))
    h = linear_forward(x, layer)
    dx, dW, db = linear_backward(relu_backward(R, h), x, layer)
    assert rel_err(dx, numeric_grad(f, x)) < 1e-6
    assert rel_err(dW, numeric_grad(f, layer.weights)) < 1e-6
    assert rel_err(db, numeric_grad(f, layer.bias)) < 1e-6


@pytest.mark.parametrize("logit", [-30.0, -2.5, 0.0, 0.7, 12.0])
@pytest.mark.parametrize("label", [0, 1])
def test_bce_value_and_gradient(logit, label):
    p = 1 / (1 + np.exp(-logit))
    loss, d = bce_with_logits(logit, label)
    expect = -np.log(p) if label else -np.log1p(-p)
    assert np.isclose(loss, expect, rtol=1e-9)
    h = 1e-5
    num = (bce_with_logits(logit + h, label)[0] - bce_with_logits(logit - h, label)[0]) / (2 * h)
    assert np.isclose(d, num, rtol=1e-5, atol=1e-9)


def test_bce_is_stable_for_huge_logits():
    assert bce_with_logits(1000.0, 1)[0] == 0.0
    assert np.isclose(bce_with_logits(1000.0, 0)[0], 1000.0)
    with pytest.raises(NumericError):
        bce_with_logits(float("nan"), 1)
    with pytest.raises(InputError):
        bce_with_logits(0.0, 2)
