"""Independent reference implementations used to check the fast paths.

Everything here is written the slow, obvious way (explicit nested loops,
float64) on purpose. None of it imports from ernet's operator code, so a
bug there cannot hide in here.
"""

import numpy as np


def same_pad_amounts(k):
    lo = (k - 1) // 2
    return lo, k - 1 - lo


def naive_conv2d(x, w, b=None, padding="same"):
    """Cross-correlation, stride 1, six explicit loops."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    bsz, h, wid, cin = x.shape
    kh, kw, _, cout = w.shape
    if padding == "same":
        t, bt = same_pad_amounts(kh)
        l, r = same_pad_amounts(kw)
        xp = np.zeros((bsz, h + kh - 1, wid + kw - 1, cin))
        xp[:, t:t + h, l:l + wid, :] = x
    else:
        xp = x
    ho = xp.shape[1] - kh + 1
    wo = xp.shape[2] - kw + 1
    y = np.zeros((bsz, ho, wo, cout))
    for n in range(bsz):
        for i in range(ho):
            for j in range(wo):
                for co in range(cout):
                    acc = 0.0
                    for di in range(kh):
                        for dj in range(kw):
                            for ci in range(cin):
                                acc += xp[n, i + di, j + dj, ci] * w[di, dj, ci, co]
                    y[n, i, j, co] = acc
    if b is not None:
        y += np.asarray(b, dtype=np.float64)
    return y


def naive_depthwise(x, w, b=None, padding="same"):
    """Per-channel cross-correlation, stride 1."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    bsz, h, wid, ch = x.shape
    kh, kw, _ = w.shape
    if padding == "same":
        t, _bt = same_pad_amounts(kh)
        l, _r = same_pad_amounts(kw)
        xp = np.zeros((bsz, h + kh - 1, wid + kw - 1, ch))
        xp[:, t:t + h, l:l + wid, :] = x
    else:
        xp = x
    ho = xp.shape[1] - kh + 1
    wo = xp.shape[2] - kw + 1
    y = np.zeros((bsz, ho, wo, ch))
    for n in range(bsz):
        for i in range(ho):
            for j in range(wo):
                for c in range(ch):
                    acc = 0.0
                    for di in range(kh):
                        for dj in range(kw):
                            acc += xp[n, i + di, j + dj, c] * w[di, dj, c]
                    y[n, i, j, c] = acc
    if b is not None:
        y += np.asarray(b, dtype=np.float64)
    return y


def naive_maxpool2(x):
    """2x2/stride-2 max pool, floor semantics, first max wins ties."""
    x = np.asarray(x, dtype=np.float64)
    bsz, h, w, c = x.shape
    ho, wo = h // 2, w // 2
    y = np.zeros((bsz, ho, wo, c))
    arg = np.zeros((bsz, ho, wo, c), dtype=np.int64)
    for n in range(bsz):
        for i in range(ho):
            for j in range(wo):
                for ch in range(c):
                    best = -np.inf
                    pick = 0
                    for t, (di, dj) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
                        v = x[n, 2 * i + di, 2 * j + dj, ch]
                        if v > best:
                            best = v
                            pick = t
                    y[n, i, j, ch] = best
                    arg[n, i, j, ch] = pick
    return y, arg


def numeric_gradient(f, x, h=1e-5):
    """Central-difference gradient of scalar-valued f at x (float64)."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        step = h * max(1.0, abs(x[idx]))
        xp = x.copy()
        xp[idx] = x[idx] + step
        xm = x.copy()
        xm[idx] = x[idx] - step
        g[idx] = (f(xp) - f(xm)) / (2.0 * step)
        it.iternext()
    return g


def assert_grads_close(analytic, numeric, rtol=1e-4, atol=1e-6, label=""):
    analytic = np.asarray(analytic, dtype=np.float64)
    err = np.abs(analytic - numeric)
    tol = atol + rtol * np.maximum(np.abs(analytic), np.abs(numeric))
    worst = float(np.max(err - tol))
    assert np.all(err <= tol), (
        f"{label} gradient mismatch: worst excess {worst:.3e}, "
        f"max abs err {float(err.max()):.3e}"
    )
