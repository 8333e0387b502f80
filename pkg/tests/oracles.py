"""Slow, loop-based reference implementations used only by the tests.

Nothing here imports the package's kernels.
"""

import math
import struct

import numpy as np


def conv2d_loops(x, w, b, stride=1, pad=0):
    c_in, h, wd = x.shape
    c_out, _, kh, kw = w.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((c_out, oh, ow), dtype=np.float64)
    for o in range(c_out):
        for i in range(oh):
            for j in range(ow):
                acc = float(b[o]) if b is not None else 0.0
                for c in range(c_in):
                    for di in range(kh):
                        for dj in range(kw):
                            y = i * stride + di - pad
                            xx = j * stride + dj - pad
                            if 0 <= y < h and 0 <= xx < wd:
                                acc += float(x[c, y, xx]) * float(w[o, c, di, dj])
                out[o, i, j] = acc
    return out


def mean_loops(t):
    out = []
    for ch in t:
        acc = 0.0
        for row in ch:
            for v in row:
                acc += float(v)
        out.append(acc / (ch.shape[0] * ch.shape[1]))
    return np.array(out)


def cosine(a, b):
    a = [float(v) for v in np.ravel(a)]
    b = [float(v) for v in np.ravel(b)]
    na = math.sqrt(sum(v * v for v in a))
    nb = math.sqrt(sum(v * v for v in b))
    if na == 0 or nb == 0:
        return 0.0
    return sum(x * y for x, y in zip(a, b)) / (na * nb)


def upsample_align_corners(t, H, W):
    S, h, w = t.shape
    out = np.zeros((S, H, W))
    for s in range(S):
        for i in range(H):
            y = i * (h - 1) / (H - 1) if H > 1 else 0.0
            y0 = min(int(math.floor(y)), max(h - 2, 0))
            fy = y - y0
            for j in range(W):
                x = j * (w - 1) / (W - 1) if W > 1 else 0.0
                x0 = min(int(math.floor(x)), max(w - 2, 0))
                fx = x - x0
                y1 = min(y0 + 1, h - 1)
                x1 = min(x0 + 1, w - 1)
                out[s, i, j] = ((1 - fy) * (1 - fx) * t[s, y0, x0] + (1 - fy) * fx * t[s, y0, x1]
                                + fy * (1 - fx) * t[s, y1, x0] + fy * fx * t[s, y1, x1])
    return out


def argmax_scan(t):
    S, h, w = t.shape
    out = np.zeros((h, w), dtype=np.int64)
    for i in range(h):
        for j in range(w):
            best = 0
            for s in range(1, S):
                if t[s, i, j] > t[best, i, j]:
                    best = s
            out[i, j] = best
    return out


def minmax(m):
    lo = min(float(v) for v in np.ravel(m))
    hi = max(float(v) for v in np.ravel(m))
    if hi == lo:
        return np.zeros(np.shape(m))
    return (np.asarray(m, dtype=np.float64) - lo) / (hi - lo)


def pcm_loops(K, A):
    """P[s,q] = sum_r cos(K_q, K_r) * A[s,r] by explicit quadruple loop."""
    C, h, w = K.shape
    S = A.shape[0]
    P = np.zeros((S, h, w))
    for s in range(S):
        for qi in range(h):
            for qj in range(w):
                acc = 0.0
                for ri in range(h):
                    for rj in range(w):
                        acc += cosine(K[:, qi, qj], K[:, ri, rj]) * float(A[s, ri, rj])
                P[s, qi, qj] = acc
    return P


def sem_exhaustive(F):
    """Pixelwise max of the cosine maps seeded at every position."""
    C, h, w = F.shape
    out = np.full((h, w), -np.inf)
    for si in range(h):
        for sj in range(w):
            for i in range(h):
                for j in range(w):
                    out[i, j] = max(out[i, j], cosine(F[:, si, sj], F[:, i, j]))
    return out


def sort_seeds(A_s, E):
    h, w = A_s.shape
    items = sorted(((-float(A_s[i, j]), i * w + j) for i in range(h) for j in range(w)))
    return [(k // w, k % w) for _, k in items[:E]]


def confusion_counts(pred, ref, S):
    tp = [0] * S
    fp = [0] * S
    fn = [0] * S
    for p, r in zip(np.ravel(pred).tolist(), np.ravel(ref).tolist()):
        if p == r:
            tp[p] += 1
        else:
            fp[p] += 1
            fn[r] += 1
    return tp, fp, fn


def f1_from_counts(tp, fp, fn):
    per = []
    seen = []
    for a, b, c in zip(tp, fp, fn):
        d = 2 * a + b + c
        per.append(1.0 if d == 0 else 2 * a / d)
        seen.append(d > 0)
    vals = [f for f, s in zip(per, seen) if s]
    return per, (sum(vals) / len(vals) if vals else 1.0)


def read_wsst_u8(path):
    """Independent WSST parser for uint8 label maps."""
    buf = open(path, "rb").read()
    assert buf[:4] == b"WSST" and buf[4] == 1 and buf[5] == 2
    ndim = buf[6]
    dims = struct.unpack("<" + "I" * ndim, buf[7:7 + 4 * ndim])
    return np.frombuffer(buf[7 + 4 * ndim:], dtype=np.uint8).reshape(dims)


def central_difference(f, x, index, eps=1e-6):
    old = x[index]
    x[index] = old + eps
    fp = f()
    x[index] = old - eps
    fm = f()
    x[index] = old
    return (fp - fm) / (2 * eps)


def rel_error(a, b, floor=1e-6):
    return abs(a - b) / max(abs(a), abs(b), floor)
