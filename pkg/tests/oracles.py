"""Slow, independent reference implementations used only by the tests.

Nothing here imports the package's executors: these are the plain loops the
optimized code is checked against.
"""

from __future__ import annotations

import math

import numpy as np


def conv_loops(x, w, b, stride, pad):
    """Quadruple-loop zero-padded cross-correlation in float64."""
    c, h, wd = x.shape
    n, _, k, _ = w.shape
    oh = (h + 2 * pad - k) // stride + 1
    ow = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, oh, ow))
    for f in range(n):
        for oy in range(oh):
            for ox in range(ow):
                acc = 0.0 if b is None else float(b[f])
                for ch in range(c):
                    for ky in range(k):
                        iy = oy * stride + ky - pad
                        if not 0 <= iy < h:
                            continue
                        for kx in range(k):
                            ix = ox * stride + kx - pad
                            if 0 <= ix < wd:
                                acc += float(x[ch, iy, ix]) * float(w[f, ch, ky, kx])
                out[f, oy, ox] = acc
    return out


def fc_loops(x, w, b):
    out = []
    for i in range(w.shape[0]):
        acc = 0.0 if b is None else float(b[i])
        for j in range(w.shape[1]):
            acc += float(w[i, j]) * float(x[j])
        out.append(acc)
    return np.array(out)


def maxpool_loops(x, size, stride):
    c, h, w = x.shape
    oh, ow = (h - size) // stride + 1, (w - size) // stride + 1
    out = np.empty((c, oh, ow), dtype=x.dtype)
    for ch in range(c):
        for oy in range(oh):
            for ox in range(ow):
                out[ch, oy, ox] = max(x[ch, oy * stride + dy, ox * stride + dx]
                                      for dy in range(size) for dx in range(size))
    return out


def patches(x, k, stride, pad):
    """Yield flattened (c, ky, kx) patches in output raster order."""
    c, h, w = x.shape
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1
    for oy in range(oh):
        for ox in range(ow):
            vals = []
            for ch in range(c):
                for ky in range(k):
                    for kx in range(k):
                        iy, ix = oy * stride + ky - pad, ox * stride + kx - pad
                        vals.append(x[ch, iy, ix] if 0 <= iy < h and 0 <= ix < w else 0.0)
            yield np.array(vals)


def matmul_loops(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            out[i, j] = sum(float(a[i, t]) * float(b[t, j]) for t in range(k))
    return out


def lru_replay(trace, capacity):
    """List-based LRU: returns (faults, evictions, dirty_evictions)."""
    stack: list[int] = []          # least recent first
    dirty: dict[int, bool] = {}
    faults = evictions = dirty_ev = 0
    for kind, page in trace:
        write = kind == "W"
        if page in stack:
            stack.remove(page)
            stack.append(page)
            dirty[page] = dirty[page] or write
            continue
        faults += 1
        if len(stack) == capacity:
            victim = stack.pop(0)
            evictions += 1
            dirty_ev += dirty.pop(victim)
        stack.append(page)
        dirty[page] = write
    return faults, evictions, dirty_ev


def input_rows_touched(spec_k, stride, pad, height, y_lo, y_hi):
    """Rows of the unpadded input read while computing output rows [y_lo, y_hi)."""
    rows = {oy * stride + ky - pad for oy in range(y_lo, y_hi) for ky in range(spec_k)}
    return {r for r in rows if 0 <= r < height}


def pages(nbytes, page):
    return math.ceil(nbytes / page)


def assert_close(actual, expected, rtol=1e-5):
    """Element-wise match relative to the magnitude of the expected tensor."""
    expected = np.asarray(expected, dtype=np.float64)
    scale = float(np.max(np.abs(expected))) if expected.size else 0.0
    np.testing.assert_allclose(np.asarray(actual, dtype=np.float64), expected, rtol=rtol,
                               atol=rtol * max(scale, 1e-30))
