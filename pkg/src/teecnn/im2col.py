"""im2col lowering, blocked GEMM and the Darknet-style convolution baseline.

The im2col matrix has one row per (channel, ky, kx) tap -- row index
``c*K*K + ky*K + kx`` -- and one column per output position ``oy*outW + ox``.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .enclave import BufferHandle, Enclave, LayerBuffers
from .errors import ShapeError
from .tensor import FLOAT, ConvLayerSpec, _bias_vector, _check_conv_args, as_tensor3d

F32 = 4
GEMM_BLOCK = 64


@dataclass(frozen=True)
class Im2colLayout:
    spec: ConvLayerSpec
    height: int
    width: int

    @property
    def out_hw(self) -> tuple[int, int]:
        return self.spec.output_hw(self.height, self.width)

    @property
    def rows(self) -> int:
        return self.spec.patch_size

    @property
    def cols(self) -> int:
        oh, ow = self.out_hw
        return oh * ow

    @property
    def expansion_factor(self) -> float:
        return self.rows * self.cols / (self.spec.in_channels * self.height * self.width)

    def source(self, row: int, col: int) -> tuple[int, int, int] | None:
        """Input coordinate (c, y, x) feeding matrix cell (row, col); None for padding."""
        if not (0 <= row < self.rows and 0 <= col < self.cols):
            raise ShapeError(f"cell ({row}, {col}) outside {self.rows}x{self.cols} im2col matrix")
        k, s, p = self.spec.kernel, self.spec.stride, self.spec.padding
        c, tap = divmod(row, k * k)
        ky, kx = divmod(tap, k)
        oy, ox = divmod(col, self.out_hw[1])
        y, x = oy * s + ky - p, ox * s + kx - p
        if 0 <= y < self.height and 0 <= x < self.width:
            return (c, y, x)
        return None


def im2col(x, spec: ConvLayerSpec, y_lo: int = 0, y_hi: int | None = None,
           height: int | None = None, row_offset: int = 0) -> np.ndarray:
    """Lower output rows ``[y_lo, y_hi)`` of a convolution to a (C*K*K, rows*outW)
    matrix.

    ``x`` may hold only input rows ``[row_offset, row_offset + x.shape[1])`` of
    a ``height``-row tensor; the rows the requested outputs depend on must be
    among them.
    """
    x = as_tensor3d(x)
    c, _, w = x.shape
    h = x.shape[1] if height is None else height
    if c != spec.in_channels:
        raise ShapeError(f"input shape {x.shape} does not match {spec.in_channels} input channels")
    oh, ow = spec.output_hw(h, w)
    if y_hi is None:
        y_hi = oh
    if not 0 <= y_lo < y_hi <= oh:
        raise ShapeError(f"output rows [{y_lo}, {y_hi}) outside [0, {oh})")
    k, s, p = spec.kernel, spec.stride, spec.padding
    rows = y_hi - y_lo
    top = y_lo * s - p
    bottom = (y_hi - 1) * s - p + k
    lo, hi = max(0, top), min(h, bottom)
    win = np.zeros((c, bottom - top, w + 2 * p), dtype=FLOAT)
    if hi > lo:
        if lo < row_offset or hi > row_offset + x.shape[1]:
            raise ShapeError(
                f"rows [{lo}, {hi}) needed but only [{row_offset}, "
                f"{row_offset + x.shape[1]}) supplied")
        win[:, lo - top:hi - top, p:p + w] = x[:, lo - row_offset:hi - row_offset]
    cols = np.empty((c, k, k, rows, ow), dtype=FLOAT)
    for ky in range(k):
        for kx in range(k):
            cols[:, ky, kx] = win[:, ky:ky + s * (rows - 1) + 1:s, kx:kx + s * (ow - 1) + 1:s]
    return cols.reshape(c * k * k, rows * ow)


def gemm(a, b, c, alpha: float = 1.0, beta: float = 0.0, block: int = GEMM_BLOCK,
         workers: int = 1) -> np.ndarray:
    """``c <- alpha * a @ b + beta * c`` over blocks of output rows, in place.

    Each row block is computed the same way no matter how many workers run,
    so results do not depend on ``workers``.
    """
    if a.ndim != 2 or b.ndim != 2 or c.ndim != 2:
        raise ShapeError("gemm operands must be matrices")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    if c.shape != (a.shape[0], b.shape[1]):
        raise ShapeError(f"output {c.shape} does not match {a.shape[0]}x{b.shape[1]}")
    alpha, beta = FLOAT(alpha), FLOAT(beta)

    def run(i0):
        blk = slice(i0, min(i0 + block, a.shape[0]))
        prod = a[blk] @ b
        if alpha != 1:
            prod *= alpha
        if beta == 0:
            c[blk] = prod
        else:
            c[blk] = prod + beta * c[blk] if beta != 1 else c[blk] + prod

    starts = range(0, a.shape[0], block)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            list(pool.map(run, starts))
    else:
        for i0 in starts:
            run(i0)
    return c


# -- tracing helpers ------------------------------------------------------

def trace_row_order_gemm(enclave: Enclave, m: int, a_row, b_region, c_row,
                         accumulate: bool, bias: BufferHandle | None = None) -> None:
    """Issue Darknet's row-by-row GEMM access order to ``enclave``.

    For every output row ``i``: read the ``i``-th row of A (``a_row(i)`` yields
    ``(handle, offset, length)`` chunks), sweep the whole of B, then write
    (or read-modify-write) output row ``c_row(i)``.
    """
    hb, boff, blen = b_region
    for i in range(m):
        for h, off, ln in a_row(i):
            enclave.access(h, off, ln, "r")
        enclave.access(hb, boff, blen, "r")
        if bias is not None:
            enclave.access(bias, i * F32, F32, "r")
        hc, coff, clen = c_row(i)
        enclave.access(hc, coff, clen, "rw" if accumulate else "w")


def trace_im2col(enclave: Enclave, src: BufferHandle, plane_bytes: int, channels: range,
                 row_off: int, row_len: int, dst: BufferHandle, dst_rows_bytes: int) -> None:
    """Channel by channel: read the needed input rows, write that channel's
    K*K im2col rows into the workspace."""
    for j, ch in enumerate(channels):
        enclave.access(src, ch * plane_bytes + row_off, row_len, "r")
        enclave.access(dst, j * dst_rows_bytes, dst_rows_bytes, "w")


def register_conv_buffers(enclave: Enclave, x: np.ndarray, spec: ConvLayerSpec,
                          label: str = "conv") -> LayerBuffers:
    oh, ow = spec.output_hw(x.shape[1], x.shape[2])
    return LayerBuffers(
        input=enclave.alloc(x.size * F32, f"{label}.input"),
        weights=enclave.alloc(spec.weight_count * F32, f"{label}.weights"),
        bias=enclave.alloc(spec.out_channels * F32, f"{label}.bias"),
        output=enclave.alloc(spec.out_channels * oh * ow * F32, f"{label}.output"),
    )


def gemm_row_order_traced(a, b, c, enclave: Enclave, alpha: float = 1.0, beta: float = 0.0,
                          handles: tuple[BufferHandle, BufferHandle, BufferHandle] | None = None):
    """Same result as :func:`gemm`; the enclave sees one full sweep of ``b``
    per output row."""
    m, k = a.shape
    n = b.shape[1]
    out = gemm(a, b, c, alpha, beta)
    if handles is None:
        handles = (enclave.alloc(a.size * F32, "A"), enclave.alloc(b.size * F32, "B"),
                   enclave.alloc(c.size * F32, "C"))
    ha, hb, hc = handles
    trace_row_order_gemm(
        enclave, m,
        a_row=lambda i: ((ha, i * k * F32, k * F32),),
        b_region=(hb, 0, k * n * F32),
        c_row=lambda i: (hc, i * n * F32, n * F32),
        accumulate=beta != 0)
    return out


def conv2d_im2col(x, weights, bias, spec: ConvLayerSpec) -> np.ndarray:
    x = as_tensor3d(x)
    weights = np.asarray(weights, dtype=FLOAT)
    _check_conv_args(x, weights, spec)
    oh, ow = spec.output_hw(x.shape[1], x.shape[2])
    cols = im2col(x, spec)
    out = np.empty((spec.out_channels, oh * ow), dtype=FLOAT)
    gemm(weights.reshape(spec.out_channels, -1), cols, out)
    out += _bias_vector(bias, spec.out_channels)[:, None]
    return out.reshape(spec.out_channels, oh, ow)


def conv2d_unmodified(x, weights, bias, spec: ConvLayerSpec, enclave: Enclave | None = None,
                      buffers: LayerBuffers | None = None) -> np.ndarray:
    """Unpartitioned im2col + GEMM as Darknet runs it.  With an enclave, the
    whole input is lowered into one workspace and multiplied row by row."""
    out = conv2d_im2col(x, weights, bias, spec)
    if enclave is None:
        return out
    if buffers is None:
        buffers = register_conv_buffers(enclave, x, spec)
    c, h, w = x.shape
    n = spec.out_channels
    oh, ow = out.shape[1:]
    kk = spec.kernel * spec.kernel
    cols = oh * ow
    ws = enclave.alloc(spec.patch_size * cols * F32, "im2col")
    trace_im2col(enclave, buffers.input, h * w * F32, range(c), 0, h * w * F32,
                 ws, kk * cols * F32)
    patch = spec.patch_size
    trace_row_order_gemm(
        enclave, n,
        a_row=lambda i: ((buffers.weights, i * patch * F32, patch * F32),),
        b_region=(ws, 0, patch * cols * F32),
        c_row=lambda i: (buffers.output, i * cols * F32, cols * F32),
        accumulate=False, bias=buffers.bias)
    enclave.free(ws)
    return out


def channel_slice_spec(spec: ConvLayerSpec, channels: int) -> ConvLayerSpec:
    return replace(spec, in_channels=channels)


def im2col_bytes(spec: ConvLayerSpec, height: int, width: int) -> int:
    oh, ow = spec.output_hw(height, width)
    return spec.patch_size * oh * ow * F32
