"""Weight codecs for fully-connected layers and the streamed FC executor.

Three encodings:

* ``raw32`` -- the float32 values, little-endian.
* ``fp16`` -- IEEE half precision; out-of-range values are clamped.
* ``lossy`` -- a fixed-rate block quantizer.  Each block of ``block_size``
  values stores ``(min, scale)`` as two float32s, with
  ``scale = (max - min) / (2**b - 1)``, and every value becomes the ``b``-bit
  code ``round((x - min) / scale)``.  ``min`` is rounded down and ``scale``
  up to multiples of twice the float32 spacing at the block's largest
  magnitude, which makes every reconstruction ``min + code*scale`` exact in
  float32 and guarantees ``|x - x_hat| <= scale/2``.  A constant block has
  scale 0.  Codes are packed LSB-first into a continuous bit stream, so the
  packed part is exactly ``b/32`` of raw.

Blob file layout (all little-endian)::

    offset  size  field
    0       4     magic b"TWB1"
    4       1     codec tag: 0 raw32, 1 fp16, 2 lossy
    5       1     bits per value (32, 16 or b)
    6       2     reserved, zero
    8       8     element count (u64)
    16      4     block size (u32; 0 unless lossy)
    20      ...   payload

The lossy payload is ``ceil(n / block_size)`` headers of ``<f32 min><f32 scale>``
followed by ``ceil(n * b / 8)`` packed code bytes; value ``i`` occupies bits
``[i*b, (i+1)*b)`` of the stream, bit ``j`` of the stream being bit ``j % 8``
of byte ``j // 8``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .enclave import BufferHandle, Enclave, LayerBuffers, PagingStats, link_time
from .errors import CodecError, ShapeError
from .tensor import FLOAT, FcLayerSpec, fc_direct

MAGIC = b"TWB1"
_HEADER = struct.Struct("<4sBBHQI")
_TAGS = {"raw32": 0, "fp16": 1, "lossy": 2}
_NAMES = {v: k for k, v in _TAGS.items()}
BLOCK_HEADER_BYTES = 8
DEFAULT_BLOCK = 1024
FP16_MAX = float(np.finfo(np.float16).max)
_CHUNK = 1 << 20   # values per packing chunk; a multiple of 8 keeps chunks byte-aligned


@dataclass(eq=False)
class WeightBlob:
    codec: str
    payload: bytes
    element_count: int
    bits: int = 32
    block_size: int = 0
    clamped: int = 0

    @property
    def header_bytes(self) -> int:
        if self.codec != "lossy":
            return 0
        return -(-self.element_count // self.block_size) * BLOCK_HEADER_BYTES

    @property
    def packed_bytes(self) -> int:
        return len(self.payload) - self.header_bytes

    def to_bytes(self) -> bytes:
        head = _HEADER.pack(MAGIC, _TAGS[self.codec], self.bits, 0, self.element_count,
                            self.block_size if self.codec == "lossy" else 0)
        return head + bytes(self.payload)

    @classmethod
    def from_bytes(cls, data: bytes) -> "WeightBlob":
        if len(data) < _HEADER.size:
            raise CodecError("blob shorter than its header")
        magic, tag, bits, _, count, block = _HEADER.unpack_from(data)
        if magic != MAGIC:
            raise CodecError(f"bad magic {magic!r}")
        if tag not in _NAMES:
            raise CodecError(f"unknown codec tag {tag}")
        blob = cls(_NAMES[tag], bytes(data[_HEADER.size:]), count, bits, block)
        if len(blob.payload) != expected_payload_bytes(blob.codec, count, bits, block):
            raise CodecError(
                f"payload is {len(blob.payload)} bytes, expected "
                f"{expected_payload_bytes(blob.codec, count, bits, block)}")
        return blob

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "WeightBlob":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def expected_payload_bytes(codec: str, count: int, bits: int = 32, block: int = 0) -> int:
    if codec == "raw32":
        return 4 * count
    if codec == "fp16":
        return 2 * count
    if codec == "lossy":
        if block < 1:
            raise CodecError("lossy blob needs a positive block size")
        return -(-count // block) * BLOCK_HEADER_BYTES + -(-count * bits // 8)
    raise CodecError(f"unknown codec {codec!r}")


def encode_raw32(weights) -> WeightBlob:
    w = np.ascontiguousarray(weights, dtype="<f4").reshape(-1)
    return WeightBlob("raw32", w.tobytes(), w.size)


def decode_raw32(blob: WeightBlob) -> np.ndarray:
    _expect(blob, "raw32")
    return np.frombuffer(blob.payload, dtype="<f4").astype(FLOAT)


def quantize_fp16(weights) -> WeightBlob:
    w = np.asarray(weights, dtype=FLOAT).reshape(-1)
    bad = ~np.isfinite(w) | (np.abs(w) > FP16_MAX)
    clamped = int(bad.sum())
    if clamped:
        w = np.nan_to_num(w, nan=0.0).clip(-FP16_MAX, FP16_MAX)
    return WeightBlob("fp16", w.astype("<f2").tobytes(), w.size, bits=16, clamped=clamped)


def dequantize_fp16(blob: WeightBlob) -> np.ndarray:
    _expect(blob, "fp16")
    return np.frombuffer(blob.payload, dtype="<f2").astype(FLOAT)


def _expect(blob: WeightBlob, codec: str) -> None:
    if blob.codec != codec:
        raise CodecError(f"expected a {codec} blob, got {blob.codec}")
    if len(blob.payload) != expected_payload_bytes(codec, blob.element_count, blob.bits,
                                                   blob.block_size):
        raise CodecError("payload is truncated or padded")


def _block_params(w: np.ndarray, bits: int, block: int):
    nblocks = -(-w.size // block)
    padded = np.empty(nblocks * block, dtype=FLOAT)
    padded[:w.size] = w
    padded[w.size:] = w[-1] if w.size else 0.0
    blocks = padded.reshape(nblocks, block)
    lo = blocks.min(axis=1).astype(np.float64)
    hi = blocks.max(axis=1).astype(np.float64)
    top = (1 << bits) - 1
    # Snap min down and scale up to multiples of u = 2 ulp(max |x|).  Every
    # lattice point min + code*scale is then exact in float32, so the decoded
    # values sit exactly on the lattice and the scale/2 bound is not eroded
    # by rounding.  For ordinary blocks u is far below the scale.
    mag = np.maximum(np.abs(lo), np.abs(hi)).astype(FLOAT)
    u = 2.0 * np.spacing(mag).astype(np.float64)
    const = hi == lo
    base = np.where(const, lo, np.floor(lo / u) * u)
    scale = np.where(const, 0.0, np.ceil((hi - base) / top / u) * u)
    short = ~const & (base + top * scale < hi)
    scale[short] += u[short]
    return base.astype(FLOAT), scale.astype(FLOAT)


def _reconstruct(lo: np.ndarray, code: np.ndarray, scale: np.ndarray) -> np.ndarray:
    return (lo + code * scale).astype(FLOAT)


def _nearest_codes(x: np.ndarray, lo: np.ndarray, scale: np.ndarray, top: int) -> np.ndarray:
    """round((x - min) / scale), settled against the float32 values the
    decoder will actually produce so rounding there cannot flip the choice."""
    q = np.divide(x - lo, scale, out=np.zeros(x.size), where=scale > 0)
    c0 = np.clip(np.floor(q), 0, top)
    c1 = np.minimum(c0 + 1, top)
    e0 = np.abs(_reconstruct(lo, c0, scale).astype(np.float64) - x)
    e1 = np.abs(_reconstruct(lo, c1, scale).astype(np.float64) - x)
    return np.where(e1 < e0, c1, c0).astype(np.uint16)


def compress_lossy(weights, bits: int, block_size: int = DEFAULT_BLOCK) -> WeightBlob:
    if not 2 <= bits <= 10:
        raise CodecError(f"bits per value must be in [2, 10], got {bits}")
    if block_size < 1:
        raise CodecError("block size must be positive")
    w = np.asarray(weights, dtype=FLOAT).reshape(-1)
    if not np.isfinite(w).all():
        raise CodecError("lossy codec needs finite inputs")
    lo, scale = _block_params(w, bits, block_size)
    headers = np.empty((lo.size, 2), dtype="<f4")
    headers[:, 0], headers[:, 1] = lo, scale
    top = (1 << bits) - 1
    shifts = np.arange(bits, dtype=np.uint16)
    packed = []
    for start in range(0, w.size, _CHUNK):
        chunk = w[start:start + _CHUNK]
        idx = np.arange(start, start + chunk.size) // block_size
        codes = _nearest_codes(chunk, lo[idx].astype(np.float64), scale[idx].astype(np.float64),
                               top)
        bitplane = ((codes[:, None] >> shifts) & 1).astype(np.uint8)
        packed.append(np.packbits(bitplane.reshape(-1), bitorder="little"))
    body = np.concatenate(packed).tobytes() if packed else b""
    return WeightBlob("lossy", headers.tobytes() + body, w.size, bits=bits,
                      block_size=block_size)


def decompress(blob: WeightBlob) -> np.ndarray:
    _expect(blob, "lossy")
    n, bits, block = blob.element_count, blob.bits, blob.block_size
    hb = blob.header_bytes
    headers = np.frombuffer(blob.payload, dtype="<f4", count=hb // 4).reshape(-1, 2)
    lo = headers[:, 0].astype(np.float64)
    scale = headers[:, 1].astype(np.float64)
    stream = np.frombuffer(blob.payload, dtype=np.uint8, offset=hb)
    weights = (1 << np.arange(bits, dtype=np.uint16)).astype(np.uint16)
    out = np.empty(n, dtype=FLOAT)
    for start in range(0, n, _CHUNK):
        count = min(_CHUNK, n - start)
        b0 = start * bits // 8
        b1 = -(-(start + count) * bits // 8)
        bitv = np.unpackbits(stream[b0:b1], bitorder="little")[:count * bits]
        codes = (bitv.reshape(count, bits).astype(np.uint16) * weights).sum(axis=1)
        idx = np.arange(start, start + count) // block
        out[start:start + count] = _reconstruct(lo[idx], codes, scale[idx])
    return out


def decode(blob: WeightBlob) -> np.ndarray:
    if blob.codec == "raw32":
        return decode_raw32(blob)
    if blob.codec == "fp16":
        return dequantize_fp16(blob)
    if blob.codec == "lossy":
        return decompress(blob)
    raise CodecError(f"unknown codec {blob.codec!r}")


def encode(weights, codec: str, bits: int = 5, block_size: int = DEFAULT_BLOCK) -> WeightBlob:
    if codec == "raw32":
        return encode_raw32(weights)
    if codec == "fp16":
        return quantize_fp16(weights)
    if codec == "lossy":
        return compress_lossy(weights, bits, block_size)
    raise CodecError(f"unknown codec {codec!r}")


@dataclass
class CodecReport:
    ratio: float
    payload_ratio: float
    max_abs_error: float
    pages_required: int
    clamped: int = 0


def codec_report(weights, blob: WeightBlob, page: int = 4096) -> CodecReport:
    w = np.asarray(weights, dtype=FLOAT).reshape(-1)
    err = float(np.max(np.abs(decode(blob) - w))) if w.size else 0.0
    raw = 4 * blob.element_count
    return CodecReport(ratio=raw / len(blob.payload),
                       payload_ratio=raw / blob.packed_bytes,
                       max_abs_error=err,
                       pages_required=-(-len(blob.payload) // page),
                       clamped=blob.clamped)


# -- streamed fully-connected execution -------------------------------------

# Decode throughput per worker, in transferred pages per cost unit, relative
# to the link rate: fp16 widening needs two workers to keep up with the link,
# block decompression six.
DECODE_SPEED = {"raw32": float("inf"), "fp16": 0.5, "lossy": 1.0 / 6.0}


class StreamResult(NamedTuple):
    output: np.ndarray
    stats: PagingStats
    cost: float
    weight_faults: int


def _row_payload_range(blob: WeightBlob, row: int, in_features: int) -> list[tuple[int, int]]:
    """Byte ranges of the payload holding weight row ``row``."""
    e0, e1 = row * in_features, (row + 1) * in_features
    if blob.codec == "raw32":
        return [(4 * e0, 4 * (e1 - e0))]
    if blob.codec == "fp16":
        return [(2 * e0, 2 * (e1 - e0))]
    hb = blob.header_bytes
    blk0, blk1 = e0 // blob.block_size, (e1 - 1) // blob.block_size
    b0 = e0 * blob.bits // 8
    b1 = -(-e1 * blob.bits // 8)
    return [(blk0 * BLOCK_HEADER_BYTES, (blk1 - blk0 + 1) * BLOCK_HEADER_BYTES),
            (hb + b0, b1 - b0)]


def register_fc_buffers(enclave: Enclave, blob: WeightBlob, spec: FcLayerSpec,
                        label: str = "fc") -> LayerBuffers:
    return LayerBuffers(
        input=enclave.alloc(spec.in_features * 4, f"{label}.input"),
        weights=enclave.alloc(len(blob.payload), f"{label}.weights"),
        bias=enclave.alloc(spec.out_features * 4, f"{label}.bias"),
        output=enclave.alloc(spec.out_features * 4, f"{label}.output"),
    )


def fc_streamed(x, blob: WeightBlob, spec: FcLayerSpec, enclave: Enclave, workers: int = 1,
                bias=None, buffers: LayerBuffers | None = None,
                decode_speed: float | None = None) -> StreamResult:
    """Fully-connected layer whose encoded weights are streamed row by row.

    Each weight row is read from the (paged) blob exactly once and decoded
    into a one-row staging buffer.  ``decode_speed`` is the per-worker decode
    rate as a fraction of the link rate.
    """
    if blob.element_count != spec.in_features * spec.out_features:
        raise ShapeError(
            f"blob holds {blob.element_count} weights, layer needs "
            f"{spec.out_features}x{spec.in_features}")
    weights = decode(blob).reshape(spec.out_features, spec.in_features)
    out = fc_direct(x, weights, bias)
    if buffers is None:
        buffers = register_fc_buffers(enclave, blob, spec)
    before = enclave.stats()
    wf0 = enclave.handle_faults[buffers.weights.id]
    row_bytes = spec.in_features * 4
    staging: BufferHandle | None = None
    if blob.codec != "raw32":
        staging = enclave.alloc(row_bytes, "fc.decoded_row")
    for r in range(spec.out_features):
        for off, ln in _row_payload_range(blob, r, spec.in_features):
            enclave.access(buffers.weights, off, ln, "r")
        if staging is not None:
            enclave.access(staging, 0, row_bytes, "w")
            enclave.access(staging, 0, row_bytes, "r")
        enclave.access(buffers.input, 0, row_bytes, "r")
        if buffers.bias is not None:
            enclave.access(buffers.bias, r * 4, 4, "r")
        enclave.access(buffers.output, r * 4, 4, "w")
    if staging is not None:
        enclave.free(staging)
    page = enclave.config.page_bytes
    speed = DECODE_SPEED[blob.codec] if decode_speed is None else decode_speed
    link = enclave.config.link_pages_per_unit
    cost = link_time(-(-len(blob.payload) // page), workers, speed * link, link)
    return StreamResult(out, enclave.stats() - before, cost,
                        enclave.handle_faults[buffers.weights.id] - wf0)
