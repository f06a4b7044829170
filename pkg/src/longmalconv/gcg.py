"""Global channel gating.

Every time step x_t of a [T, C] sequence is scaled by the scalar gate
s_t = sigmoid(x_t . z) where z = tanh(W^T g) is computed once from a global
context vector g. The per-step dot products are a single matrix-vector
product, so the cost is O(T*C) plus O(C^2) for z.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import InputError, _dtype, sigmoid


@dataclass
class GcgParams:
    W: np.ndarray  # [C, C]

    def __post_init__(self):
        if self.W.ndim != 2 or self.W.shape[0] != self.W.shape[1]:
            raise InputError(f"GCG projection must be square, got {self.W.shape}")
        if not np.all(np.isfinite(self.W)):
            raise InputError("GCG projection has non-finite entries")

    @property
    def channels(self) -> int:
        return self.W.shape[0]

    @classmethod
    def init(cls, rng: np.random.Generator, channels: int) -> "GcgParams":
        bound = 1.0 / np.sqrt(channels)
        return cls(rng.uniform(-bound, bound, (channels, channels)).astype(np.float32))


@dataclass
class GcgCache:
    z: np.ndarray  # [C]
    s: np.ndarray  # [T]


def gcg_context(g: np.ndarray, params: GcgParams) -> np.ndarray:
    """z = tanh(W^T g). Computed once per sample and reused everywhere."""
    if g.shape != (params.channels,):
        raise InputError(f"context has shape {g.shape}, expected ({params.channels},)")
    z = np.tanh(params.W.T.astype(np.float64) @ g.astype(np.float64))
    return z.astype(_dtype(g, params.W))


def gcg_gates(X: np.ndarray, z: np.ndarray) -> np.ndarray:
    if X.ndim != 2 or X.shape[1] != z.shape[0]:
        raise InputError(f"sequence {X.shape} does not match context width {z.shape[0]}")
    scores = X.astype(np.float64) @ z.astype(np.float64)
    return sigmoid(scores.astype(_dtype(X, z)))


def gcg_apply(X: np.ndarray, z: np.ndarray):
    """Gate a [T, C] sequence with a precomputed z. Returns (Y, s)."""
    s = gcg_gates(X, z)
    return X * s[:, None], s


def gcg_forward(X: np.ndarray, g: np.ndarray, params: GcgParams):
    z = gcg_context(g, params)
    Y, s = gcg_apply(X, z)
    return Y, GcgCache(z, s)


def gcg_backward(dY: np.ndarray, X: np.ndarray, g: np.ndarray, params: GcgParams, cache: GcgCache):
    """Returns (dX, dg, dW)."""
    if dY.shape != X.shape:
        raise InputError(f"dY shape {dY.shape} != X shape {X.shape}")
    dX, dz = gcg_apply_backward(dY, X, cache.z, cache.s)
    dg, dW = gcg_context_backward(dz, g, params, cache.z)
    return dX, dg, dW


def gcg_apply_backward(dY: np.ndarray, X: np.ndarray, z: np.ndarray, s: np.ndarray):
    """Adjoint of gcg_apply. Returns (dX, dz)."""
    dt = _dtype(dY, X, z)
    dY64 = dY.astype(np.float64)
    X64 = X.astype(np.float64)
    s64 = s.astype(np.float64)
    a = np.einsum("tc,tc->t", dY64, X64) * s64 * (1 - s64)
    dX = s64[:, None] * dY64 + a[:, None] * z.astype(np.float64)
    dz = a @ X64
    return dX.astype(dt), dz


def gcg_context_backward(dz: np.ndarray, g: np.ndarray, params: GcgParams, z: np.ndarray):
    """Adjoint of gcg_context. Returns (dg, dW)."""
    dt = _dtype(g, params.W, z)
    du = (1 - z.astype(np.float64) ** 2) * dz
    dg = params.W.astype(np.float64) @ du
    dW = np.outer(g.astype(np.float64), du)
    return dg.astype(dt), dW.astype(dt)
