"""Layer primitives with hand-written backward passes.

Tensors are plain numpy arrays. Storage is float32; every matrix product is
accumulated in float64 and rounded back, which makes the value computed for a
convolution window depend only on that window's contents (BLAS float32 kernels
do not guarantee that across different batch sizes). Passing float64 inputs
keeps everything in float64, which the gradient checks rely on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

N_BYTES = 256
EOF_ID = 256
PAD_ID = 257
VOCAB_SIZE = 258

# rows per matmul when a full-length sequence is convolved
_BLOCK_ROWS = 2048


class InputError(ValueError):
    """Bad shapes, token ids or lengths."""


class NumericError(FloatingPointError):
    """NaN or Inf showed up in a forward or backward computation."""


def _dtype(*arrays) -> np.dtype:
    if any(np.asarray(a).dtype == np.float64 for a in arrays):
        return np.dtype(np.float64)
    return np.dtype(np.float32)


def check_finite(x: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values in {what}")
    return x


def sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


# --------------------------------------------------------------------------
# embedding


@dataclass
class EmbeddingTable:
    weights: np.ndarray
    frozen_zero_rows: tuple[int, ...] = (PAD_ID,)

    def __post_init__(self):
        if self.weights.ndim != 2:
            raise InputError("embedding weights must be 2-D")
        if self.vocab_size < EOF_ID + 1:
            raise InputError(f"vocab_size must be >= {EOF_ID + 1}, got {self.vocab_size}")
        for r in self.frozen_zero_rows:
            self.weights[r] = 0.0

    @property
    def vocab_size(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    @classmethod
    def init(cls, rng: np.random.Generator, dim: int, vocab_size: int = VOCAB_SIZE) -> "EmbeddingTable":
        w = rng.standard_normal((vocab_size, dim)).astype(np.float32)
        return cls(w)


def _as_table(table) -> tuple[np.ndarray, tuple[int, ...]]:
    if isinstance(table, EmbeddingTable):
        return table.weights, table.frozen_zero_rows
    return table, (PAD_ID,)


def embed(tokens: np.ndarray, table) -> np.ndarray:
    """Look up rows of the embedding table; works for any token array shape."""
    weights, _ = _as_table(table)
    tokens = np.asarray(tokens)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= weights.shape[0]):
        raise InputError(f"token id out of range [0, {weights.shape[0]})")
    return weights[tokens]


def embed_backward(tokens: np.ndarray, d_out: np.ndarray, table) -> np.ndarray:
    """Scatter-add output gradients into table rows. Frozen rows get zero."""
    weights, frozen = _as_table(table)
    vocab, dim = weights.shape
    flat = np.asarray(tokens).reshape(-1).astype(np.intp)
    d = d_out.reshape(-1, dim)
    grad = np.empty((vocab, dim), dtype=np.float64)
    for c in range(dim):
        grad[:, c] = np.bincount(flat, weights=d[:, c], minlength=vocab)
    for r in frozen:
        grad[r] = 0.0
    return grad.astype(_dtype(d_out, weights))


# --------------------------------------------------------------------------
# strided 1-D convolution


@dataclass
class Conv1dLayer:
    """Weights are laid out [out_channels, in_channels, width]."""

    weights: np.ndarray
    bias: np.ndarray
    stride: int

    def __post_init__(self):
        if self.weights.ndim != 3:
            raise InputError("conv weights must be [out, in, width]")
        if self.bias.shape != (self.out_channels,):
            raise InputError("conv bias must be [out]")
        if not 1 <= self.stride <= self.width:
            raise InputError(f"stride must satisfy 1 <= S <= W, got S={self.stride}, W={self.width}")

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def width(self) -> int:
        return self.weights.shape[2]

    def matrix(self) -> np.ndarray:
        """[width*in, out] float64 matrix matching row-major window flattening."""
        w = self.weights
        return np.ascontiguousarray(w.transpose(2, 1, 0).reshape(-1, w.shape[0]), dtype=np.float64)

    @classmethod
    def init(cls, rng: np.random.Generator, in_channels: int, out_channels: int,
             width: int, stride: int) -> "Conv1dLayer":
        bound = 1.0 / np.sqrt(in_channels * width)
        w = rng.uniform(-bound, bound, (out_channels, in_channels, width)).astype(np.float32)
        b = rng.uniform(-bound, bound, out_channels).astype(np.float32)
        return cls(w, b, stride)


def conv_output_length(T: int, width: int, stride: int) -> int:
    if T < width:
        raise InputError(f"input length {T} shorter than receptive field {width}; pad it first")
    return (T - width) // stride + 1


def conv1d_windows(windows: np.ndarray, layer: Conv1dLayer, matrix: np.ndarray | None = None) -> np.ndarray:
    """Apply the convolution to stacked windows [n, W, C_in] -> [n, C_out]."""
    n, W, cin = windows.shape
    if W != layer.width or cin != layer.in_channels:
        raise InputError(f"window shape {windows.shape[1:]} does not match layer ({layer.width}, {layer.in_channels})")
    if matrix is None:
        matrix = layer.matrix()
    out = windows.reshape(n, W * cin).astype(np.float64) @ matrix
    out += layer.bias
    return out.astype(_dtype(windows, layer.weights))


def conv1d_forward(X: np.ndarray, layer: Conv1dLayer) -> np.ndarray:
    """[T, C_in] -> [L, C_out] with L = floor((T - W) / S) + 1, no padding."""
    if X.ndim != 2 or X.shape[1] != layer.in_channels:
        raise InputError(f"expected [T, {layer.in_channels}] input, got {X.shape}")
    L = conv_output_length(X.shape[0], layer.width, layer.stride)
    windows = sliding_window_view(X, layer.width, axis=0)[:: layer.stride]  # [L, C_in, W]
    matrix = layer.matrix()
    out = np.empty((L, layer.out_channels), dtype=_dtype(X, layer.weights))
    for lo in range(0, L, _BLOCK_ROWS):
        hi = min(L, lo + _BLOCK_ROWS)
        out[lo:hi] = conv1d_windows(windows[lo:hi].transpose(0, 2, 1), layer, matrix)
    return out


def conv1d_windows_backward(dY: np.ndarray, windows: np.ndarray, layer: Conv1dLayer,
                            matrix: np.ndarray | None = None):
    """Adjoint of conv1d_windows: returns (d_windows, d_weights, d_bias)."""
    n, W, cin = windows.shape
    if dY.shape != (n, layer.out_channels):
        raise InputError(f"dY shape {dY.shape} != ({n}, {layer.out_channels})")
    dt = _dtype(dY, windows, layer.weights)
    if matrix is None:
        matrix = layer.matrix()
    dY64 = dY.astype(np.float64)
    cols = windows.reshape(n, W * cin).astype(np.float64)
    d_matrix = cols.T @ dY64
    d_windows = (dY64 @ matrix.T).reshape(n, W, cin)
    d_weights = d_matrix.reshape(W, cin, -1).transpose(2, 1, 0)
    return d_windows.astype(dt), d_weights.astype(dt), dY64.sum(axis=0).astype(dt)


def conv1d_backward(dY: np.ndarray, X: np.ndarray, layer: Conv1dLayer):
    """Adjoint of conv1d_forward: returns (dX, d_weights, d_bias)."""
    T = X.shape[0]
    W, S = layer.width, layer.stride
    L = conv_output_length(T, W, S)
    if dY.shape != (L, layer.out_channels):
        raise InputError(f"dY shape {dY.shape} != ({L}, {layer.out_channels})")
    dt = _dtype(dY, X, layer.weights)
    cin = layer.in_channels
    matrix = layer.matrix()
    windows = sliding_window_view(X, W, axis=0)[::S]

    # dX is accumulated on a grid of S-row blocks: tap k = q*S + r of window l
    # lands in block l + q, row r.
    n_blocks = L + -(-W // S)
    dX_blocks = np.zeros((n_blocks, S, cin), dtype=np.float64)
    d_matrix = np.zeros((W * cin, layer.out_channels), dtype=np.float64)
    for lo in range(0, L, _BLOCK_ROWS):
        hi = min(L, lo + _BLOCK_ROWS)
        dY64 = dY[lo:hi].astype(np.float64)
        cols = windows[lo:hi].transpose(0, 2, 1).reshape(hi - lo, W * cin).astype(np.float64)
        d_matrix += cols.T @ dY64
        d_cols = (dY64 @ matrix.T).reshape(hi - lo, W, cin)
        for q in range(-(-W // S)):
            k0 = q * S
            k1 = min(W, k0 + S)
            dX_blocks[lo + q: hi + q, : k1 - k0] += d_cols[:, k0:k1]
    dX = dX_blocks.reshape(-1, cin)[:T]
    d_weights = d_matrix.reshape(W, cin, -1).transpose(2, 1, 0)
    d_bias = dY.astype(np.float64).sum(axis=0)
    return dX.astype(dt), d_weights.astype(dt), d_bias.astype(dt)


# --------------------------------------------------------------------------
# gating, pooling, head


def glu_gate(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    if A.shape != B.shape:
        raise InputError(f"GLU halves differ in shape: {A.shape} vs {B.shape}")
    return A * sigmoid(B)


def glu_backward(d_out: np.ndarray, A: np.ndarray, B: np.ndarray):
    s = sigmoid(B)
    return d_out * s, d_out * A * s * (1 - s)


def temporal_max_pool(X: np.ndarray):
    """Max over time per channel. Ties go to the lowest time index."""
    if X.ndim != 2 or X.shape[0] == 0:
        raise InputError("temporal_max_pool needs a non-empty [L, C] input")
    if np.isnan(X).any():
        raise NumericError("NaN entering temporal max pool")
    idx = np.argmax(X, axis=0)
    return X[idx, np.arange(X.shape[1])], idx


def temporal_max_pool_backward(d_values: np.ndarray, indices: np.ndarray, length: int) -> np.ndarray:
    dX = np.zeros((length, d_values.shape[0]), dtype=d_values.dtype)
    dX[indices, np.arange(d_values.shape[0])] = d_values
    return dX


@dataclass
class LinearLayer:
    """weights [out, in], bias [out]."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise InputError("linear layer wants weights [out, in] and bias [out]")

    @classmethod
    def init(cls, rng: np.random.Generator, in_dim: int, out_dim: int) -> "LinearLayer":
        bound = 1.0 / np.sqrt(in_dim)
        w = rng.uniform(-bound, bound, (out_dim, in_dim)).astype(np.float32)
        b = rng.uniform(-bound, bound, out_dim).astype(np.float32)
        return cls(w, b)


def linear_forward(x: np.ndarray, layer: LinearLayer) -> np.ndarray:
    if x.shape[-1] != layer.weights.shape[1]:
        raise InputError(f"linear input width {x.shape[-1]} != {layer.weights.shape[1]}")
    out = x.astype(np.float64) @ layer.weights.T.astype(np.float64) + layer.bias
    return out.astype(_dtype(x, layer.weights))


def linear_backward(dy: np.ndarray, x: np.ndarray, layer: LinearLayer):
    """Returns (dx, d_weights, d_bias); x may be [in] or [n, in]."""
    if dy.shape[-1] != layer.weights.shape[0]:
        raise InputError("linear dy width does not match out_dim")
    dt = _dtype(dy, x, layer.weights)
    dy64 = np.atleast_2d(dy).astype(np.float64)
    x64 = np.atleast_2d(x).astype(np.float64)
    dx = dy64 @ layer.weights.astype(np.float64)
    dW = dy64.T @ x64
    db = dy64.sum(axis=0)
    return dx.reshape(x.shape).astype(dt), dW.astype(dt), db.astype(dt)


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(dy: np.ndarray, x: np.ndarray) -> np.ndarray:
    return dy * (x > 0)


def bce_with_logits(logit: float, label: int):
    """Binary cross-entropy on one logit. Returns (loss, d_loss/d_logit)."""
    if label not in (0, 1):
        raise InputError(f"label must be 0 or 1, got {label}")
    logit = float(logit)
    if not np.isfinite(logit):
        raise NumericError("non-finite logit")
    # log(1 + exp(-|x|)) + max(x, 0) - x * y
    loss = np.log1p(np.exp(-abs(logit))) + max(logit, 0.0) - logit * label
    return float(loss), float(expit(logit) - label)
