"""Y-plane and channel partitioning of convolution layers.

A y-plane partition is a run of contiguous output rows taken across every
channel; each round lowers only the input rows those outputs need, multiplies
by the *whole* weight matrix and writes its slice of the output.  Channel
partitioning instead lowers a group of input channels per round, multiplies
by the matching weight slice and accumulates into the *whole* output.

Footprints are counted in whole pages.  Every buffer region a round touches is
bounded by ``ceil(bytes / page) + 1`` pages per contiguous chunk (the +1
covers an unaligned start), which keeps the bound monotone in partition size.
Fixed overhead is the bias buffer plus one page of loop state.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .enclave import Enclave, LayerBuffers
from .errors import InfeasibleBudget, ShapeError
from .im2col import (F32, channel_slice_spec, gemm, im2col, register_conv_buffers,
                     trace_im2col, trace_row_order_gemm)
from .tensor import (FLOAT, Conv, ConvLayerSpec, Model, _bias_vector, _check_conv_args,
                     as_tensor3d, conv_out_size)

PAGE = 4096


def _pages(nbytes: int, page: int) -> int:
    return -(-nbytes // page)


def _span(nbytes: int, page: int) -> int:
    """Pages a contiguous chunk can touch at any alignment."""
    return 0 if nbytes <= 0 else _pages(nbytes, page) + 1


def _strided(chunks: int, chunk_bytes: int, stride_bytes: int, page: int, cap: int) -> int:
    each = chunks * _span(chunk_bytes, page)
    whole = _span(stride_bytes * (chunks - 1) + chunk_bytes, page)
    return min(each, whole, cap)


def _overhead(spec: ConvLayerSpec, page: int) -> int:
    return _pages(spec.out_channels * F32, page) + 1


def yplane_input_range(y_lo: int, y_hi: int, spec: ConvLayerSpec, height: int) -> tuple[int, int]:
    """Input rows ``[in_lo, in_hi)`` needed for output rows ``[y_lo, y_hi)``."""
    oh = conv_out_size(height, spec.kernel, spec.stride, spec.padding)
    if not 0 <= y_lo < y_hi <= oh:
        raise ShapeError(f"output rows [{y_lo}, {y_hi}) outside [0, {oh})")
    s, p, k = spec.stride, spec.padding, spec.kernel
    in_lo = min(max(0, y_lo * s - p), height)
    in_hi = max(in_lo, min(height, (y_hi - 1) * s - p + k))
    return in_lo, in_hi


def unpartitioned_footprint(spec: ConvLayerSpec, height: int, width: int, page: int = PAGE) -> int:
    oh, ow = spec.output_hw(height, width)
    pages = (_pages(spec.in_channels * height * width * F32, page)
             + _pages(spec.patch_size * oh * ow * F32, page)
             + _pages(spec.weight_count * F32, page)
             + _pages(spec.out_channels * oh * ow * F32, page)
             + _overhead(spec, page))
    return pages * page


def yplane_footprint(spec: ConvLayerSpec, height: int, width: int, rows: int,
                     page: int = PAGE) -> int:
    """Bytes resident during a round that produces ``rows`` output rows."""
    oh, ow = spec.output_hw(height, width)
    rows = min(rows, oh)
    in_rows = min(height, (rows - 1) * spec.stride + spec.kernel)
    c, n = spec.in_channels, spec.out_channels
    pages = (_pages(spec.weight_count * F32, page)
             + _strided(c, in_rows * width * F32, height * width * F32, page,
                        _pages(c * height * width * F32, page))
             + _pages(spec.patch_size * rows * ow * F32, page)
             + _strided(n, rows * ow * F32, oh * ow * F32, page, _pages(n * oh * ow * F32, page))
             + _overhead(spec, page))
    return pages * page


def channel_footprint(spec: ConvLayerSpec, height: int, width: int, group: int,
                      page: int = PAGE) -> int:
    """Bytes resident during a round that consumes ``group`` input channels."""
    oh, ow = spec.output_hw(height, width)
    group = min(group, spec.in_channels)
    kk = spec.kernel * spec.kernel
    n = spec.out_channels
    pages = (_pages(n * oh * ow * F32, page)
             + min(_span(group * height * width * F32, page),
                   _pages(spec.in_channels * height * width * F32, page))
             + _pages(group * kk * oh * ow * F32, page)
             + min(_span(group * n * kk * F32, page), _pages(spec.weight_count * F32, page))
             + _overhead(spec, page))
    return pages * page


def _largest_fitting(fp, hi: int, budget: int) -> int:
    """Largest ``r`` in [1, hi] with ``fp(r) <= budget``; 0 if none."""
    if fp(1) > budget:
        return 0
    lo = 1
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if fp(mid) <= budget:
            lo = mid
        else:
            hi = mid - 1
    return lo


def _split(total: int, size: int) -> list[tuple[int, int]]:
    return [(i, min(i + size, total)) for i in range(0, total, size)]


@dataclass
class YPlanePlan:
    spec: ConvLayerSpec
    height: int
    width: int
    rows_per_partition: int
    ranges: list[tuple[int, int]]
    input_ranges: list[tuple[int, int]]
    footprint_bytes: int
    page_bytes: int = PAGE

    scheme = "yplane"

    @classmethod
    def with_rows(cls, spec: ConvLayerSpec, height: int, width: int, rows: int,
                  page: int = PAGE) -> "YPlanePlan":
        oh, _ = spec.output_hw(height, width)
        rows = max(1, min(rows, oh))
        ranges = _split(oh, rows)
        return cls(spec, height, width, rows, ranges,
                   [yplane_input_range(lo, hi, spec, height) for lo, hi in ranges],
                   yplane_footprint(spec, height, width, rows, page), page)

    @property
    def partitions(self) -> int:
        return len(self.ranges)

    def to_dict(self) -> dict:
        return {"scheme": "yplane", "partitions": self.partitions,
                "rows_per_partition": self.rows_per_partition,
                "ranges": [list(r) for r in self.ranges],
                "input_ranges": [list(r) for r in self.input_ranges],
                "footprint_bytes": self.footprint_bytes}


@dataclass
class ChannelPlan:
    spec: ConvLayerSpec
    height: int
    width: int
    channels_per_group: int
    groups: list[tuple[int, int]]
    footprint_bytes: int
    page_bytes: int = PAGE

    scheme = "channel"

    @classmethod
    def with_group(cls, spec: ConvLayerSpec, height: int, width: int, group: int,
                   page: int = PAGE) -> "ChannelPlan":
        spec.output_hw(height, width)
        group = max(1, min(group, spec.in_channels))
        return cls(spec, height, width, group, _split(spec.in_channels, group),
                   channel_footprint(spec, height, width, group, page), page)

    @property
    def partitions(self) -> int:
        return len(self.groups)

    def to_dict(self) -> dict:
        return {"scheme": "channel", "partitions": self.partitions,
                "channels_per_group": self.channels_per_group,
                "groups": [list(g) for g in self.groups],
                "footprint_bytes": self.footprint_bytes}


def plan_yplane(spec: ConvLayerSpec, height: int, width: int, budget_bytes: int,
                page: int = PAGE) -> YPlanePlan:
    oh, _ = spec.output_hw(height, width)
    rows = _largest_fitting(lambda r: yplane_footprint(spec, height, width, r, page), oh,
                            budget_bytes)
    if rows == 0:
        need = yplane_footprint(spec, height, width, 1, page)
        raise InfeasibleBudget(
            f"y-plane partitioning needs {need} bytes for a single row "
            f"(weights alone are {spec.weight_count * F32}); budget is {budget_bytes}",
            need, budget_bytes)
    return YPlanePlan.with_rows(spec, height, width, rows, page)


def plan_channel(spec: ConvLayerSpec, height: int, width: int, budget_bytes: int,
                 page: int = PAGE) -> ChannelPlan:
    group = _largest_fitting(lambda g: channel_footprint(spec, height, width, g, page),
                             spec.in_channels, budget_bytes)
    if group == 0:
        need = channel_footprint(spec, height, width, 1, page)
        oh, ow = spec.output_hw(height, width)
        raise InfeasibleBudget(
            f"channel partitioning needs {need} bytes for a single channel "
            f"(the output alone is {spec.out_channels * oh * ow * F32}); budget is {budget_bytes}",
            need, budget_bytes)
    return ChannelPlan.with_group(spec, height, width, group, page)


@dataclass
class SchemeChoice:
    kind: str                      # "unpartitioned" | "yplane" | "channel"
    plan: YPlanePlan | ChannelPlan | None
    reason: dict = field(default_factory=dict)

    @property
    def partitions(self) -> int:
        return 1 if self.plan is None else self.plan.partitions

    def to_dict(self) -> dict:
        return {"kind": self.kind, "plan": None if self.plan is None else self.plan.to_dict(),
                "reason": self.reason}


def select_scheme(spec: ConvLayerSpec, height: int, width: int, budget_bytes: int,
                  page: int = PAGE) -> SchemeChoice:
    """Pick the cheaper feasible scheme for one layer; ties go to y-plane."""
    reason = {
        "budget_bytes": budget_bytes,
        "unpartitioned_bytes": unpartitioned_footprint(spec, height, width, page),
        "yplane_min_bytes": yplane_footprint(spec, height, width, 1, page),
        "channel_min_bytes": channel_footprint(spec, height, width, 1, page),
    }
    if reason["unpartitioned_bytes"] <= budget_bytes:
        return SchemeChoice("unpartitioned", None, reason)
    plans = {}
    for kind, planner in (("yplane", plan_yplane), ("channel", plan_channel)):
        try:
            plans[kind] = planner(spec, height, width, budget_bytes, page)
            reason[f"{kind}_bytes"] = plans[kind].footprint_bytes
        except InfeasibleBudget:
            reason[f"{kind}_bytes"] = None
    if not plans:
        need = min(reason["yplane_min_bytes"], reason["channel_min_bytes"])
        raise InfeasibleBudget(
            f"neither y-plane ({reason['yplane_min_bytes']} B) nor channel "
            f"({reason['channel_min_bytes']} B) partitioning fits {budget_bytes} B",
            need, budget_bytes)
    kind = min(plans, key=lambda k: (plans[k].footprint_bytes, k != "yplane"))
    return SchemeChoice(kind, plans[kind], reason)


def _conv_geometry(model: Model):
    for index, layer, shape in model.conv_layers():
        yield index, layer.spec, shape[1], shape[2]


def _feasible(model: Model, scheme: str, budget: int, page: int) -> bool:
    planner = {"yplane": plan_yplane, "channel": plan_channel, "hybrid": select_scheme}[scheme]
    try:
        for _, spec, h, w in _conv_geometry(model):
            planner(spec, h, w, budget, page)
    except InfeasibleBudget:
        return False
    return True


def min_feasible_budget(model: Model, scheme: str, page: int = PAGE) -> int:
    """Smallest page-multiple budget under which every conv layer has a plan.

    Found by bisection over page counts; feasibility is monotone in the budget.
    """
    if scheme not in ("yplane", "channel", "hybrid"):
        raise ValueError(f"unknown scheme {scheme!r}")
    geoms = list(_conv_geometry(model))
    if not geoms:
        return 0
    hi = max(max(yplane_footprint(s, h, w, h, page), channel_footprint(s, h, w, s.in_channels, page))
             for _, s, h, w in geoms) // page
    lo = 1
    while lo < hi:
        mid = (lo + hi) // 2
        if _feasible(model, scheme, mid * page, page):
            hi = mid
        else:
            lo = mid + 1
    return lo * page


# -- execution -------------------------------------------------------------

def _prepare(x, weights, plan):
    x = as_tensor3d(x)
    weights = np.asarray(weights, dtype=FLOAT)
    _check_conv_args(x, weights, plan.spec)
    if x.shape[1:] != (plan.height, plan.width):
        raise ShapeError(f"plan built for {plan.height}x{plan.width}, input is {x.shape}")
    return x, weights


def conv2d_yplane(x, weights, bias, plan: YPlanePlan, enclave: Enclave | None = None,
                  buffers: LayerBuffers | None = None, round_log: list | None = None) -> np.ndarray:
    x, weights = _prepare(x, weights, plan)
    spec = plan.spec
    c, h, w = x.shape
    n = spec.out_channels
    oh, ow = spec.output_hw(h, w)
    a = weights.reshape(n, -1)
    b = _bias_vector(bias, n)[:, None]
    out = np.empty((n, oh, ow), dtype=FLOAT)
    for (y_lo, y_hi), (in_lo, in_hi) in zip(plan.ranges, plan.input_ranges):
        cols = im2col(x[:, in_lo:in_hi], spec, y_lo, y_hi, height=h, row_offset=in_lo)
        part = np.empty((n, cols.shape[1]), dtype=FLOAT)
        gemm(a, cols, part)
        out[:, y_lo:y_hi, :] = (part + b).reshape(n, y_hi - y_lo, ow)
    if enclave is not None:
        _trace_yplane(plan, x.shape, enclave, buffers or register_conv_buffers(enclave, x, spec),
                      round_log)
    return out


def _trace_yplane(plan: YPlanePlan, shape, enclave: Enclave, buffers: LayerBuffers,
                  round_log: list | None) -> None:
    spec = plan.spec
    c, h, w = shape
    n, patch = spec.out_channels, spec.patch_size
    kk = spec.kernel * spec.kernel
    oh, ow = spec.output_hw(h, w)
    ws = enclave.alloc(patch * plan.rows_per_partition * ow * F32, "yplane.im2col")
    for (y_lo, y_hi), (in_lo, in_hi) in zip(plan.ranges, plan.input_ranges):
        if round_log is not None:
            enclave.begin_round()
        cols = (y_hi - y_lo) * ow
        trace_im2col(enclave, buffers.input, h * w * F32, range(c), in_lo * w * F32,
                     (in_hi - in_lo) * w * F32, ws, kk * cols * F32)
        trace_row_order_gemm(
            enclave, n,
            a_row=lambda i: ((buffers.weights, i * patch * F32, patch * F32),),
            b_region=(ws, 0, patch * cols * F32),
            c_row=lambda i, y_lo=y_lo, cols=cols: (buffers.output, (i * oh + y_lo) * ow * F32,
                                                   cols * F32),
            accumulate=False, bias=buffers.bias)
        if round_log is not None:
            round_log.append(enclave.end_round())
    enclave.free(ws)


def conv2d_channel(x, weights, bias, plan: ChannelPlan, enclave: Enclave | None = None,
                   buffers: LayerBuffers | None = None, round_log: list | None = None) -> np.ndarray:
    """Channel-partitioned convolution.

    When traced, the weights buffer is taken to be stored input-channel-major
    (``C x N x K x K``) so each group's weight slice is contiguous.
    """
    x, weights = _prepare(x, weights, plan)
    spec = plan.spec
    c, h, w = x.shape
    n = spec.out_channels
    oh, ow = spec.output_hw(h, w)
    acc = np.empty((n, oh * ow), dtype=FLOAT)
    for g, (c_lo, c_hi) in enumerate(plan.groups):
        sub = channel_slice_spec(spec, c_hi - c_lo)
        cols = im2col(x[c_lo:c_hi], sub)
        a = np.ascontiguousarray(weights[:, c_lo:c_hi]).reshape(n, -1)
        gemm(a, cols, acc, 1.0, 0.0 if g == 0 else 1.0)
    acc += _bias_vector(bias, n)[:, None]
    if enclave is not None:
        _trace_channel(plan, x.shape, enclave, buffers or register_conv_buffers(enclave, x, spec),
                       round_log)
    return acc.reshape(n, oh, ow)


def _trace_channel(plan: ChannelPlan, shape, enclave: Enclave, buffers: LayerBuffers,
                   round_log: list | None) -> None:
    spec = plan.spec
    c, h, w = shape
    n = spec.out_channels
    kk = spec.kernel * spec.kernel
    oh, ow = spec.output_hw(h, w)
    cols = oh * ow
    ws = enclave.alloc(plan.channels_per_group * kk * cols * F32, "channel.im2col")
    last = len(plan.groups) - 1
    for g, (c_lo, c_hi) in enumerate(plan.groups):
        if round_log is not None:
            enclave.begin_round()
        trace_im2col(enclave, buffers.input, h * w * F32, range(c_lo, c_hi), 0, h * w * F32,
                     ws, kk * cols * F32)
        chans = range(c_lo, c_hi)
        trace_row_order_gemm(
            enclave, n,
            a_row=lambda i, chans=chans: [(buffers.weights, (ch * n + i) * kk * F32, kk * F32)
                                          for ch in chans],
            b_region=(ws, 0, (c_hi - c_lo) * kk * cols * F32),
            c_row=lambda i: (buffers.output, i * cols * F32, cols * F32),
            accumulate=g > 0, bias=buffers.bias if g == last else None)
        if round_log is not None:
            round_log.append(enclave.end_round())
    enclave.free(ws)


def run_choice(layer: Conv, x, choice: SchemeChoice, enclave: Enclave | None = None,
               buffers: LayerBuffers | None = None, round_log: list | None = None):
    """Execute a conv layer (without its activation) under a scheme choice."""
    from .im2col import conv2d_unmodified

    if choice.kind == "yplane":
        return conv2d_yplane(x, layer.weights, layer.bias, choice.plan, enclave, buffers, round_log)
    if choice.kind == "channel":
        return conv2d_channel(x, layer.weights, layer.bias, choice.plan, enclave, buffers, round_log)
    return conv2d_unmodified(x, layer.weights, layer.bias, layer.spec, enclave, buffers)
