"""Pure-Python reference kernels.

Same loop structure as the compiled versions in ``_ckernels.pyx``; used as
the fallback backend when the extension is unavailable (or when
``FLOWAD_PURE_PYTHON=1``) and as the ground truth in backend parity tests.
Orders of magnitude slower than the compiled kernels -- see
``benchmarks/bench_kernels.py``.
"""

import numpy as np


def matmul(a, b):
    """Naive triple-loop matrix product of two 2-d float64 arrays."""
    m, k = a.shape
    k2, n = b.shape
    out = np.zeros((m, n), dtype=np.float64)
    for i in range(m):
        ai = a[i]
        oi = out[i]
        for j in range(n):
            acc = 0.0
            for p in range(k):
                acc += ai[p] * b[p, j]
            oi[j] = acc
    return out


def conv2d(x, w):
    """Same-padded cross-correlation.

    x: (N, C, H, W), w: (O, C, kh, kw) with odd kh, kw -> (N, O, H, W).
    """
    nb, c, h, wd = x.shape
    o, c2, kh, kw = w.shape
    ph, pw = kh // 2, kw // 2
    out = np.zeros((nb, o, h, wd), dtype=np.float64)
    for n in range(nb):
        for oo in range(o):
            for i in range(h):
                for j in range(wd):
                    acc = 0.0
                    for cc in range(c):
                        for u in range(kh):
                            ii = i + u - ph
                            if ii < 0 or ii >= h:
                                continue
                            for v in range(kw):
                                jj = j + v - pw
                                if 0 <= jj < wd:
                                    acc += x[n, cc, ii, jj] * w[oo, cc, u, v]
                    out[n, oo, i, j] = acc
    return out


def conv2d_grad_input(gy, w):
    """Gradient of conv2d w.r.t. its input. gy: (N, O, H, W) -> (N, C, H, W)."""
    nb, o, h, wd = gy.shape
    o2, c, kh, kw = w.shape
    ph, pw = kh // 2, kw // 2
    gx = np.zeros((nb, c, h, wd), dtype=np.float64)
    for n in range(nb):
        for cc in range(c):
            for i in range(h):
                for j in range(wd):
                    acc = 0.0
                    for oo in range(o):
                        for u in range(kh):
                            ii = i - u + ph
                            if ii < 0 or ii >= h:
                                continue
                            for v in range(kw):
                                jj = j - v + pw
                                if 0 <= jj < wd:
                                    acc += gy[n, oo, ii, jj] * w[oo, cc, u, v]
                    gx[n, cc, i, j] = acc
    return gx


def conv2d_grad_weight(gy, x, kh, kw):
    """Gradient of conv2d w.r.t. its kernel. -> (O, C, kh, kw)."""
    nb, o, h, wd = gy.shape
    nb2, c, h2, wd2 = x.shape
    ph, pw = kh // 2, kw // 2
    gw = np.zeros((o, c, kh, kw), dtype=np.float64)
    for oo in range(o):
        for cc in range(c):
            for u in range(kh):
                for v in range(kw):
                    acc = 0.0
                    for n in range(nb):
                        for i in range(h):
                            ii = i + u - ph
                            if ii < 0 or ii >= h:
                                continue
                            for j in range(wd):
                                jj = j + v - pw
                                if 0 <= jj < wd:
                                    acc += gy[n, oo, i, j] * x[n, cc, ii, jj]
                    gw[oo, cc, u, v] = acc
    return gw
