"""Vectorized numpy twins of the numba kernels.

Same signatures and float64 outputs. Reductions follow numpy's own order
(pairwise / BLAS), so results agree with the loop kernels to rounding, not
bit for bit.
"""
import numpy as np


def dot(a, b):
    return float(np.dot(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)))


def softmax(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(x - x.max())
    return e / e.sum()


def row_scores(q, K, idx, scale):
    return (np.asarray(K[idx], dtype=np.float64) @ np.asarray(q, dtype=np.float64)) * scale


def attend(q, K, V, idx, scale):
    w = softmax(row_scores(q, K, idx, scale))
    return w @ np.asarray(V[idx], dtype=np.float64), w


def attend_backward(q, K, V, idx, scale, w, g):
    Ks = np.asarray(K[idx], dtype=np.float64)
    Vs = np.asarray(V[idx], dtype=np.float64)
    dp = Vs @ g
    ds = w * (dp - w @ dp) * scale
    dq = ds @ Ks
    dK = np.outer(ds, np.asarray(q, dtype=np.float64))
    dV = np.outer(w, g)
    return dq, dK, dV


def segment_means(K, flat_idx, offsets):
    rows = np.asarray(K[flat_idx], dtype=np.float64)
    sums = np.add.reduceat(rows, offsets[:-1], axis=0)
    return sums / np.diff(offsets)[:, None]


def matmul(A, B):
    return np.asarray(A, dtype=np.float64) @ np.asarray(B, dtype=np.float64)


def _prefix_mask(C, n, n0):
    return np.arange(n)[None, :] <= (n0 + np.arange(C))[:, None]


def prefix_attend(Q, S, SV, n0, scale):
    Q = np.asarray(Q, dtype=np.float64)
    mask = _prefix_mask(Q.shape[0], S.shape[0], n0)
    s = np.where(mask, (Q @ np.asarray(S, dtype=np.float64).T) * scale, -np.inf)
    e = np.exp(s - s.max(axis=1, keepdims=True))
    W = e / e.sum(axis=1, keepdims=True)
    return W @ np.asarray(SV, dtype=np.float64), W


def prefix_attend_backward(Q, S, SV, n0, scale, W, G):
    Q = np.asarray(Q, dtype=np.float64)
    S = np.asarray(S, dtype=np.float64)
    SV = np.asarray(SV, dtype=np.float64)
    dp = G @ SV.T
    dsc = W * (dp - (W * dp).sum(axis=1, keepdims=True)) * scale
    return dsc @ S, dsc.T @ Q, W.T @ G


def tile_csr(T, H, W, offset, frame_stride, rt, rh, rw):
    nt, nh, nw = -(-T // rt), -(-H // rh), -(-W // rw)
    pos = np.full((nt * rt, nh * rh, nw * rw), -1, dtype=np.int64)
    pos[:T, :H, :W] = offset + np.arange(T)[:, None, None] * frame_stride + np.arange(H * W).reshape(H, W)
    # block axes outermost, then positions inside each block; padding dropped
    blocks = pos.reshape(nt, rt, nh, rh, nw, rw).transpose(0, 2, 4, 1, 3, 5).reshape(-1)
    flat = blocks[blocks >= 0]
    st = np.minimum(rt, T - np.arange(0, T, rt))
    sh = np.minimum(rh, H - np.arange(0, H, rh))
    sw = np.minimum(rw, W - np.arange(0, W, rw))
    offsets = np.zeros(nt * nh * nw + 1, dtype=np.int64)
    np.cumsum((st[:, None, None] * sh[None, :, None] * sw[None, None, :]).reshape(-1), out=offsets[1:])
    return flat, offsets
