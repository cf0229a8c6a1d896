"""NHWC building blocks with explicit backward passes.

Convolutions are "same"-padded cross-correlations computed as a sum of
shifted matrix products, one per kernel tap. That keeps memory at the size of
the activations instead of a full im2col buffer.
"""

from __future__ import annotations

import numpy as np


def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """x (N, H, W, C), w (k, k, C, F), b (F,) -> (N, H, W, F)."""
    k = w.shape[0]
    n, h, wd, _ = x.shape
    if k == 1:
        return x @ w[0, 0] + b
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    y = np.empty((n, h, wd, w.shape[3]), dtype=np.result_type(x, w))
    y[...] = b
    for i in range(k):
        for j in range(k):
            y += xp[:, i : i + h, j : j + wd, :] @ w[i, j]
    return y


def conv2d_backward(dy: np.ndarray, x: np.ndarray, w: np.ndarray):
    """Gradients (dx, dw, db) of :func:`conv2d`."""
    k = w.shape[0]
    n, h, wd, c = x.shape
    f = w.shape[3]
    db = dy.sum(axis=(0, 1, 2))
    dy2 = dy.reshape(-1, f)
    dw = np.empty_like(w)
    if k == 1:
        dw[0, 0] = x.reshape(-1, c).T @ dy2
        return dy @ w[0, 0].T, dw, db
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    dxp = np.zeros_like(xp)
    for i in range(k):
        for j in range(k):
            window = xp[:, i : i + h, j : j + wd, :]
            dw[i, j] = window.reshape(-1, c).T @ dy2
            dxp[:, i : i + h, j : j + wd, :] += dy @ w[i, j].T
    return dxp[:, p:-p, p:-p, :], dw, db


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def maxpool2(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """2x2 max-pool; returns pooled values and the winning tap (0..3) per output."""
    n, h, w, c = x.shape
    win = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4)
    win = win.reshape(n, h // 2, w // 2, c, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return out, arg


def maxpool2_backward(dy: np.ndarray, arg: np.ndarray) -> np.ndarray:
    n, h2, w2, c = dy.shape
    onehot = arg[..., None] == np.arange(4)
    dwin = onehot * dy[..., None]
    dwin = dwin.reshape(n, h2, w2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
    return dwin.reshape(n, h2 * 2, w2 * 2, c)


def upsample2(x: np.ndarray) -> np.ndarray:
    return x.repeat(2, axis=1).repeat(2, axis=2)


def upsample2_backward(dy: np.ndarray) -> np.ndarray:
    n, h, w, c = dy.shape
    return dy.reshape(n, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4))


def sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so large |z| never overflows exp
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out
