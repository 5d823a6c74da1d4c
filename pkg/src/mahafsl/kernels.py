"""Hot numeric kernels.

Every kernel exists twice: a loop version compiled with numba (``*_nb``) and a
vectorised numpy version (``*_np``). The public names are bound at import time
according to :data:`mahafsl._accel.USE_NUMBA`; both variants stay importable so
tests and the benchmark can compare them directly.

One exception: the conv2d forward pass always uses the numpy version, which
hands the contraction to BLAS and beats the numba loop several times over
(see ``benchmarks/bench_kernels.py``). The loop stays as a reference.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._accel import USE_NUMBA, njit
from .errors import DimensionError, NotPositiveDefiniteError

# --------------------------------------------------------------------------
# Cholesky factorisation and solve
# --------------------------------------------------------------------------


@njit
def _cholesky_nb(a):
    n = a.shape[0]
    L = np.zeros((n, n))
    for j in range(n):
        s = a[j, j]
        for k in range(j):
            s -= L[j, k] * L[j, k]
        if not (s > 0.0) or not np.isfinite(s):
            return L, False
        d = np.sqrt(s)
        L[j, j] = d
        for i in range(j + 1, n):
            t = a[i, j]
            for k in range(j):
                t -= L[i, k] * L[j, k]
            L[i, j] = t / d
    return L, True


@njit
def _cho_solve_nb(L, b):
    n, m = b.shape
    y = np.empty((n, m))
    for c in range(m):
        for i in range(n):
            t = b[i, c]
            for k in range(i):
                t -= L[i, k] * y[k, c]
            y[i, c] = t / L[i, i]
        for i in range(n - 1, -1, -1):
            t = y[i, c]
            for k in range(i + 1, n):
                t -= L[k, i] * y[k, c]
            y[i, c] = t / L[i, i]
    return y


def _cholesky_np(a):
    try:
        L = np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        return np.zeros_like(a), False
    if not np.all(np.isfinite(L)) or np.any(np.diag(L) <= 0):
        return np.zeros_like(a), False
    return L, True


def _cho_solve_np(L, b):
    n = L.shape[0]
    y = np.empty_like(b)
    for i in range(n):
        y[i] = (b[i] - L[i, :i] @ y[:i]) / L[i, i]
    x = np.empty_like(b)
    for i in range(n - 1, -1, -1):
        x[i] = (y[i] - L[i + 1:, i] @ x[i + 1:]) / L[i, i]
    return x


def cholesky(a: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor of a symmetric positive definite matrix.

    Only the lower triangle of ``a`` is read. Raises
    :class:`NotPositiveDefiniteError` when a pivot is not strictly positive.
    """
    a = np.ascontiguousarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"cholesky needs a square matrix, got {a.shape}")
    L, ok = _cholesky(a)
    if not ok:
        raise NotPositiveDefiniteError("matrix is not positive definite")
    return L


def cho_solve(L: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve ``(L Lᵀ) x = b`` given the lower factor ``L``."""
    b = np.asarray(b, dtype=np.float64)
    vec = b.ndim == 1
    b2 = np.ascontiguousarray(b.reshape(-1, 1) if vec else b)
    if b2.shape[0] != L.shape[0]:
        raise DimensionError(f"rhs has {b2.shape[0]} rows, factor is {L.shape[0]}x{L.shape[0]}")
    x = _cho_solve(np.ascontiguousarray(L), b2)
    return x.ravel() if vec else x


# --------------------------------------------------------------------------
# 2-D convolution (stride 1, symmetric zero padding)
# --------------------------------------------------------------------------


@njit
def _conv2d_nb(x, w, b, pad):
    # innermost loop runs along contiguous output columns so LLVM can vectorise it
    B, C, H, W = x.shape
    F, _, KH, KW = w.shape
    Ho = H + 2 * pad - KH + 1
    Wo = W + 2 * pad - KW + 1
    out = np.empty((B, F, Ho, Wo))
    for n in range(B):
        for f in range(F):
            out[n, f] = b[f]
            for c in range(C):
                for ki in range(KH):
                    i_lo, i_hi = max(0, pad - ki), min(Ho, H + pad - ki)
                    for kj in range(KW):
                        j_lo, j_hi = max(0, pad - kj), min(Wo, W + pad - kj)
                        wv = w[f, c, ki, kj]
                        off = kj - pad
                        for i in range(i_lo, i_hi):
                            orow = out[n, f, i]
                            xrow = x[n, c, i + ki - pad]
                            for j in range(j_lo, j_hi):
                                orow[j] += wv * xrow[j + off]
    return out


@njit
def _conv2d_backward_nb(x, w, g, pad):
    B, C, H, W = x.shape
    F, _, KH, KW = w.shape
    Ho, Wo = g.shape[2], g.shape[3]
    dx = np.zeros_like(x)
    dw = np.zeros_like(w)
    db = np.zeros(F)
    for n in range(B):
        for f in range(F):
            for i in range(Ho):
                for j in range(Wo):
                    db[f] += g[n, f, i, j]
            for c in range(C):
                for ki in range(KH):
                    i_lo, i_hi = max(0, pad - ki), min(Ho, H + pad - ki)
                    for kj in range(KW):
                        j_lo, j_hi = max(0, pad - kj), min(Wo, W + pad - kj)
                        wv = w[f, c, ki, kj]
                        off = kj - pad
                        acc = 0.0
                        for i in range(i_lo, i_hi):
                            grow = g[n, f, i]
                            xrow = x[n, c, i + ki - pad]
                            dxrow = dx[n, c, i + ki - pad]
                            for j in range(j_lo, j_hi):
                                acc += grow[j] * xrow[j + off]
                                dxrow[j + off] += grow[j] * wv
                        dw[f, c, ki, kj] += acc
    return dx, dw, db


def _pad(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _conv2d_np(x, w, b, pad):
    KH, KW = w.shape[2:]
    win = sliding_window_view(_pad(x, pad), (KH, KW), axis=(2, 3))  # B,C,Ho,Wo,KH,KW
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # B,Ho,Wo,F
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2)) + b[None, :, None, None]


def _conv2d_backward_np(x, w, g, pad):
    KH, KW = w.shape[2:]
    H, W = x.shape[2:]
    Ho, Wo = g.shape[2:]
    win = sliding_window_view(_pad(x, pad), (KH, KW), axis=(2, 3))
    dw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
    db = g.sum(axis=(0, 2, 3))
    dxp = np.zeros((x.shape[0], x.shape[1], H + 2 * pad, W + 2 * pad))
    for ki in range(KH):
        for kj in range(KW):
            dxp[:, :, ki:ki + Ho, kj:kj + Wo] += np.einsum("bfhw,fc->bchw", g, w[:, :, ki, kj])
    dx = dxp[:, :, pad:pad + H, pad:pad + W]
    return np.ascontiguousarray(dx), dw, db


def conv2d(x, w, b, pad=1):
    x = np.ascontiguousarray(x, dtype=np.float64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv2d shape mismatch: input {x.shape}, weight {w.shape}")
    return _conv2d(x, w, b, pad)


def conv2d_backward(x, w, g, pad=1):
    """Returns ``(dx, dw, db)`` for an upstream gradient ``g``."""
    return _conv2d_backward(
        np.ascontiguousarray(x, dtype=np.float64),
        np.ascontiguousarray(w, dtype=np.float64),
        np.ascontiguousarray(g, dtype=np.float64),
        pad,
    )


# --------------------------------------------------------------------------
# 2x2 max pooling, stride 2, floor semantics
# --------------------------------------------------------------------------


@njit
def _maxpool_nb(x):
    B, C, H, W = x.shape
    Ho, Wo = H // 2, W // 2
    out = np.empty((B, C, Ho, Wo))
    arg = np.empty((B, C, Ho, Wo), dtype=np.int64)
    for n in range(B):
        for c in range(C):
            for i in range(Ho):
                for j in range(Wo):
                    best = x[n, c, 2 * i, 2 * j]
                    k = 0
                    for di in range(2):
                        for dj in range(2):
                            v = x[n, c, 2 * i + di, 2 * j + dj]
                            if v > best:
                                best = v
                                k = 2 * di + dj
                    out[n, c, i, j] = best
                    arg[n, c, i, j] = k
    return out, arg


@njit
def _maxpool_backward_nb(g, arg, H, W):
    B, C, Ho, Wo = g.shape
    dx = np.zeros((B, C, H, W))
    for n in range(B):
        for c in range(C):
            for i in range(Ho):
                for j in range(Wo):
                    k = arg[n, c, i, j]
                    dx[n, c, 2 * i + k // 2, 2 * j + k % 2] += g[n, c, i, j]
    return dx


def _maxpool_np(x):
    B, C, H, W = x.shape
    Ho, Wo = H // 2, W // 2
    blocks = x[:, :, :2 * Ho, :2 * Wo].reshape(B, C, Ho, 2, Wo, 2)
    blocks = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Ho, Wo, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    return out, arg.astype(np.int64)


def _maxpool_backward_np(g, arg, H, W):
    B, C, Ho, Wo = g.shape
    onehot = (arg[..., None] == np.arange(4)) * g[..., None]  # B,C,Ho,Wo,4
    blocks = onehot.reshape(B, C, Ho, Wo, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    dx = np.zeros((B, C, H, W))
    dx[:, :, :2 * Ho, :2 * Wo] = blocks.reshape(B, C, 2 * Ho, 2 * Wo)
    return dx


def maxpool2x2(x):
    """Returns ``(out, argmax)``; argmax indexes the 2x2 window row-major."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.shape[2] < 2 or x.shape[3] < 2:
        raise DimensionError(f"maxpool2x2 needs spatial extent >= 2, got {x.shape}")
    return _maxpool(x)


def maxpool2x2_backward(g, arg, in_shape):
    return _maxpool_backward(
        np.ascontiguousarray(g, dtype=np.float64), arg, in_shape[2], in_shape[3]
    )


_conv2d = _conv2d_np
if USE_NUMBA:
    _cholesky, _cho_solve = _cholesky_nb, _cho_solve_nb
    _conv2d_backward = _conv2d_backward_nb
    _maxpool, _maxpool_backward = _maxpool_nb, _maxpool_backward_nb
else:
    _cholesky, _cho_solve = _cholesky_np, _cho_solve_np
    _conv2d_backward = _conv2d_backward_np
    _maxpool, _maxpool_backward = _maxpool_np, _maxpool_backward_np
