"""Layer specifications, the model container and reference (oracle) layer ops.

Tensors are plain ``numpy.float32`` arrays.  A 3D tensor has shape
``(channels, height, width)`` and is C-contiguous, so its flat index is
``c*H*W + y*W + x``.  Everything in this module is the slow-but-obvious
ground truth that the im2col, partitioned and traced executors are checked
against.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from .errors import ShapeError

FLOAT = np.float32
ACTIVATIONS = ("linear", "relu", "softmax")


def as_tensor3d(x) -> np.ndarray:
    x = np.ascontiguousarray(x, dtype=FLOAT)
    if x.ndim != 3:
        raise ShapeError(f"expected a CxHxW tensor, got shape {x.shape}")
    return x


def conv_out_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


@dataclass(frozen=True)
class ConvLayerSpec:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0
    has_bias: bool = True

    def __post_init__(self):
        if self.kernel < 1 or self.stride < 1 or self.padding < 0:
            raise ShapeError(
                f"invalid conv geometry K={self.kernel} S={self.stride} P={self.padding}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ShapeError("conv layer needs at least one input and output channel")

    def output_hw(self, height: int, width: int) -> tuple[int, int]:
        oh = conv_out_size(height, self.kernel, self.stride, self.padding)
        ow = conv_out_size(width, self.kernel, self.stride, self.padding)
        if oh < 1 or ow < 1:
            raise ShapeError(
                f"{height}x{width} input too small for K={self.kernel} "
                f"S={self.stride} P={self.padding}")
        return oh, ow

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels, self.kernel, self.kernel)

    @property
    def weight_count(self) -> int:
        return self.out_channels * self.in_channels * self.kernel * self.kernel

    @property
    def patch_size(self) -> int:
        """Rows of the im2col matrix (C*K*K)."""
        return self.in_channels * self.kernel * self.kernel


@dataclass(frozen=True)
class FcLayerSpec:
    in_features: int
    out_features: int
    has_bias: bool = True

    def __post_init__(self):
        if self.in_features < 1 or self.out_features < 1:
            raise ShapeError("fully-connected layer needs at least one input and output")


@dataclass(eq=False)
class Conv:
    spec: ConvLayerSpec
    weights: np.ndarray | None = None
    bias: np.ndarray | None = None
    activation: str = "linear"


@dataclass(eq=False)
class MaxPool:
    """Max pooling.  ``pad`` follows Darknet: the output grows by ``pad``
    virtual positions and windows start ``pad // 2`` cells before the edge;
    cells outside the input never win the max."""
    size: int
    stride: int
    pad: int = 0


@dataclass(eq=False)
class Fc:
    spec: FcLayerSpec
    weights: np.ndarray | None = None
    bias: np.ndarray | None = None
    activation: str = "linear"


@dataclass(eq=False)
class Activation:
    kind: str = "relu"


Layer = Union[Conv, MaxPool, Fc, Activation]
Shape = tuple


def layer_output_shape(layer: Layer, shape: Shape) -> Shape:
    if isinstance(layer, Conv):
        if len(shape) != 3 or shape[0] != layer.spec.in_channels:
            raise ShapeError(
                f"conv expects {layer.spec.in_channels} input channels, got shape {shape}")
        oh, ow = layer.spec.output_hw(shape[1], shape[2])
        return (layer.spec.out_channels, oh, ow)
    if isinstance(layer, MaxPool):
        if len(shape) != 3:
            raise ShapeError(f"maxpool expects a 3D input, got shape {shape}")
        return (shape[0],) + maxpool_output_hw(shape[1], shape[2], layer.size, layer.stride, layer.pad)
    if isinstance(layer, Fc):
        n = int(np.prod(shape))
        if n != layer.spec.in_features:
            raise ShapeError(
                f"fc expects {layer.spec.in_features} inputs, got shape {shape} ({n} values)")
        return (layer.spec.out_features,)
    if isinstance(layer, Activation):
        if layer.kind not in ACTIVATIONS:
            raise ShapeError(f"unknown activation {layer.kind!r}")
        return tuple(shape)
    raise TypeError(f"unknown layer type {type(layer).__name__}")


@dataclass(eq=False)
class Model:
    input_shape: tuple[int, int, int]
    layers: list = field(default_factory=list)
    name: str = "model"

    def shapes(self) -> list[tuple[Shape, Shape]]:
        """(input shape, output shape) for every layer, validating the chain."""
        out = []
        shape = tuple(self.input_shape)
        for i, layer in enumerate(self.layers, start=1):
            try:
                nxt = layer_output_shape(layer, shape)
            except ShapeError as exc:
                raise ShapeError(str(exc), layer_index=i) from None
            out.append((shape, nxt))
            shape = nxt
        return out

    def conv_layers(self) -> list[tuple[int, Conv, Shape]]:
        """(1-based index, layer, input shape) for each conv layer."""
        return [(i, layer, s_in)
                for i, (layer, (s_in, _)) in enumerate(zip(self.layers, self.shapes()), start=1)
                if isinstance(layer, Conv)]

    def weighted_layers(self) -> list:
        return [layer for layer in self.layers if isinstance(layer, (Conv, Fc))]


def _check_conv_args(x: np.ndarray, weights: np.ndarray, spec: ConvLayerSpec) -> None:
    if x.ndim != 3 or x.shape[0] != spec.in_channels:
        raise ShapeError(
            f"input shape {x.shape} does not match {spec.in_channels} input channels")
    if tuple(weights.shape) != spec.weight_shape:
        raise ShapeError(
            f"weight shape {tuple(weights.shape)} does not match expected {spec.weight_shape}")
    spec.output_hw(x.shape[1], x.shape[2])


def _bias_vector(bias, n: int) -> np.ndarray:
    if bias is None:
        return np.zeros(n, dtype=FLOAT)
    bias = np.asarray(bias, dtype=FLOAT).reshape(-1)
    if bias.size != n:
        raise ShapeError(f"bias has {bias.size} entries, expected {n}")
    return bias


def pad_input(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (padding, padding), (padding, padding)))


def conv2d_direct(x, weights, bias, spec: ConvLayerSpec) -> np.ndarray:
    """Zero-padded cross-correlation, accumulated one kernel tap at a time."""
    x = as_tensor3d(x)
    weights = np.asarray(weights, dtype=FLOAT)
    _check_conv_args(x, weights, spec)
    k, s = spec.kernel, spec.stride
    oh, ow = spec.output_hw(x.shape[1], x.shape[2])
    xp = pad_input(x, spec.padding)
    out = np.empty((spec.out_channels, oh, ow), dtype=FLOAT)
    out[...] = _bias_vector(bias, spec.out_channels)[:, None, None]
    for ky in range(k):
        for kx in range(k):
            patch = xp[:, ky:ky + s * (oh - 1) + 1:s, kx:kx + s * (ow - 1) + 1:s]
            out += np.tensordot(weights[:, :, ky, kx], patch, axes=(1, 0))
    return out


def fc_direct(x, weights, bias=None) -> np.ndarray:
    weights = np.asarray(weights, dtype=FLOAT)
    x = np.asarray(x, dtype=FLOAT).reshape(-1)
    if weights.ndim != 2 or weights.shape[1] != x.size:
        raise ShapeError(
            f"input of length {x.size} does not match weight matrix {weights.shape}")
    return weights @ x + _bias_vector(bias, weights.shape[0])


def maxpool_output_hw(height: int, width: int, size: int, stride: int, pad: int = 0):
    if size < 1 or stride < 1 or pad < 0:
        raise ShapeError(f"invalid pooling window {size}/{stride} pad {pad}")
    if size > height + pad or size > width + pad:
        raise ShapeError(f"pooling window {size} larger than {height}x{width} input")
    return ((height + pad - size) // stride + 1, (width + pad - size) // stride + 1)


def maxpool_direct(x, size: int, stride: int, pad: int = 0) -> np.ndarray:
    x = as_tensor3d(x)
    c, h, w = x.shape
    oh, ow = maxpool_output_hw(h, w, size, stride, pad)
    off = pad // 2
    ph = (oh - 1) * stride + size
    pw = (ow - 1) * stride + size
    xp = np.full((c, max(ph, h + off), max(pw, w + off)), -np.inf, dtype=FLOAT)
    xp[:, off:off + h, off:off + w] = x
    out = np.full((c, oh, ow), -np.inf, dtype=FLOAT)
    for ky in range(size):
        for kx in range(size):
            np.maximum(out, xp[:, ky:ky + stride * (oh - 1) + 1:stride,
                               kx:kx + stride * (ow - 1) + 1:stride], out=out)
    return out


def apply_activation(x: np.ndarray, kind: str) -> np.ndarray:
    if kind == "linear":
        return x
    if kind == "relu":
        return np.maximum(x, FLOAT(0))
    if kind == "softmax":
        flat = x.reshape(-1).astype(FLOAT)
        e = np.exp(flat - flat.max())
        return (e / e.sum()).astype(FLOAT).reshape(x.shape)
    raise ShapeError(f"unknown activation {kind!r}")


def run_layer_reference(layer: Layer, x: np.ndarray) -> np.ndarray:
    if isinstance(layer, Conv):
        y = conv2d_direct(x, layer.weights, layer.bias, layer.spec)
        return apply_activation(y, layer.activation)
    if isinstance(layer, MaxPool):
        return maxpool_direct(x, layer.size, layer.stride, layer.pad)
    if isinstance(layer, Fc):
        y = fc_direct(x, layer.weights, layer.bias)
        return apply_activation(y, layer.activation)
    if isinstance(layer, Activation):
        return apply_activation(np.asarray(x, dtype=FLOAT), layer.kind)
    raise TypeError(f"unknown layer type {type(layer).__name__}")


def model_infer_reference(model: Model, x) -> np.ndarray:
    if not model.layers:
        raise ShapeError("model has no layers")
    x = np.asarray(x, dtype=FLOAT)
    if tuple(x.shape) != tuple(model.input_shape):
        raise ShapeError(
            f"input shape {x.shape} does not match model input {tuple(model.input_shape)}",
            layer_index=1)
    for i, layer in enumerate(model.layers, start=1):
        try:
            x = run_layer_reference(layer, x)
        except ShapeError as exc:
            raise ShapeError(str(exc), layer_index=i) from None
    return x.reshape(-1)


def random_input(shape: Sequence[int], seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.standard_normal(tuple(shape), dtype=FLOAT)
