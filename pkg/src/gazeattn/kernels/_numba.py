"""Loop kernels compiled with numba.

Every reduction runs left to right in float64 whatever the storage dtype,
so results are identical run to run and independent of thread count.
"""
import numba
import numpy as np

_jit = numba.njit(cache=True, nogil=True)


@_jit
def dot(a, b):
    acc = 0.0
    for i in range(a.shape[0]):
        acc += np.float64(a[i]) * np.float64(b[i])
    return acc


@_jit
def softmax(x):
    n = x.shape[0]
    out = np.empty(n, dtype=np.float64)
    m = np.float64(x[0])
    for i in range(1, n):
        if x[i] > m:
            m = np.float64(x[i])
    total = 0.0
    for i in range(n):
        e = np.exp(np.float64(x[i]) - m)
        out[i] = e
        total += e
    for i in range(n):
        out[i] /= total
    return out


@_jit
def row_scores(q, K, idx, scale):
    n = idx.shape[0]
    d = K.shape[1]
    s = np.empty(n, dtype=np.float64)
    for j in range(n):
        r = idx[j]
        acc = 0.0
        for c in range(d):
            acc += np.float64(q[c]) * np.float64(K[r, c])
        s[j] = acc * scale
    return s


@_jit
def attend(q, K, V, idx, scale):
    w = softmax(row_scores(q, K, idx, scale))
    dv = V.shape[1]
    out = np.zeros(dv, dtype=np.float64)
    for j in range(idx.shape[0]):
        r = idx[j]
        wj = w[j]
        for c in range(dv):
            out[c] += wj * np.float64(V[r, c])
    return out, w


@_jit
def attend_backward(q, K, V, idx, scale, w, g):
    n = idx.shape[0]
    d = K.shape[1]
    dv = V.shape[1]
    dp = np.empty(n, dtype=np.float64)
    for j in range(n):
        r = idx[j]
        acc = 0.0
        for c in range(dv):
            acc += g[c] * np.float64(V[r, c])
        dp[j] = acc
    mean_dp = 0.0
    for j in range(n):
        mean_dp += w[j] * dp[j]
    dq = np.zeros(d, dtype=np.float64)
    dK = np.empty((n, d), dtype=np.float64)
    dV = np.empty((n, dv), dtype=np.float64)
    for j in range(n):
        r = idx[j]
        ds = w[j] * (dp[j] - mean_dp) * scale
        for c in range(d):
            dq[c] += ds * np.float64(K[r, c])
            dK[j, c] = ds * np.float64(q[c])
        for c in range(dv):
            dV[j, c] = w[j] * g[c]
    return dq, dK, dV


@_jit
def segment_means(K, flat_idx, offsets):
    G = offsets.shape[0] - 1
    d = K.shape[1]
    out = np.zeros((G, d), dtype=np.float64)
    for g in range(G):
        lo = offsets[g]
        hi = offsets[g + 1]
        for j in range(lo, hi):
            r = flat_idx[j]
            for c in range(d):
                out[g, c] += np.float64(K[r, c])
        cnt = np.float64(hi - lo)
        for c in range(d):
            out[g, c] /= cnt
    return out


@_jit
def matmul(A, B):
    n, k = A.shape
    m = B.shape[1]
    out = np.zeros((n, m), dtype=np.float64)
    for i in range(n):
        for p in range(k):
            a = np.float64(A[i, p])
            for j in range(m):
                out[i, j] += a * np.float64(B[p, j])
    return out


@_jit
def prefix_attend(Q, S, SV, n0, scale):
    """Row c of Q attends to rows 0..n0+c of S (keys) / SV (values)."""
    C, d = Q.shape
    n = S.shape[0]
    dv = SV.shape[1]
    W = np.zeros((C, n), dtype=np.float64)
    out = np.zeros((C, dv), dtype=np.float64)
    for c in range(C):
        m = n0 + c + 1
        best = -np.inf
        for j in range(m):
            acc = 0.0
            for t in range(d):
                acc += np.float64(Q[c, t]) * np.float64(S[j, t])
            acc *= scale
            W[c, j] = acc
            if acc > best:
                best = acc
        total = 0.0
        for j in range(m):
            e = np.exp(W[c, j] - best)
            W[c, j] = e
            total += e
        for j in range(m):
            W[c, j] /= total
            wj = W[c, j]
            for t in range(dv):
                out[c, t] += wj * np.float64(SV[j, t])
    return out, W


@_jit
def prefix_attend_backward(Q, S, SV, n0, scale, W, G):
    C, d = Q.shape
    n = S.shape[0]
    dv = SV.shape[1]
    dQ = np.zeros((C, d), dtype=np.float64)
    dS = np.zeros((n, d), dtype=np.float64)
    dSV = np.zeros((n, dv), dtype=np.float64)
    dp = np.empty(n, dtype=np.float64)
    for c in range(C):
        m = n0 + c + 1
        mean_dp = 0.0
        for j in range(m):
            acc = 0.0
            for t in range(dv):
                acc += G[c, t] * np.float64(SV[j, t])
            dp[j] = acc
            mean_dp += W[c, j] * acc
        for j in range(m):
            wj = W[c, j]
            ds = wj * (dp[j] - mean_dp) * scale
            for t in range(d):
                dQ[c, t] += ds * np.float64(S[j, t])
                dS[j, t] += ds * np.float64(Q[c, t])
            for t in range(dv):
                dSV[j, t] += wj * G[c, t]
    return dQ, dS, dSV


@_jit
def tile_csr(T, H, W, offset, frame_stride, rt, rh, rw):
    nt = (T + rt - 1) // rt
    nh = (H + rh - 1) // rh
    nw = (W + rw - 1) // rw
    flat = np.empty(T * H * W, dtype=np.int64)
    offsets = np.zeros(nt * nh * nw + 1, dtype=np.int64)
    n = 0
    g = 0
    for t0 in range(0, T, rt):
        for h0 in range(0, H, rh):
            for w0 in range(0, W, rw):
                for t in range(t0, min(t0 + rt, T)):
                    for h in range(h0, min(h0 + rh, H)):
                        for w in range(w0, min(w0 + rw, W)):
                            flat[n] = offset + t * frame_stride + h * W + w
                            n += 1
                g += 1
                offsets[g] = n
    return flat, offsets
