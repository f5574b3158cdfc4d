from __future__ import annotations

import math
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from teecnn.codec import (BLOCK_HEADER_BYTES, MAGIC, WeightBlob, codec_report, compress_lossy,
                          decode, decompress, dequantize_fp16, encode, encode_raw32, fc_streamed,
                          quantize_fp16)
from teecnn.enclave import Enclave, EnclaveConfig
from teecnn.errors import CodecError, ShapeError
from teecnn.tensor import FcLayerSpec, fc_direct


def rand(shape, seed=0):
    return np.random.default_rng(seed).standard_normal(shape).astype(np.float32)


def block_scales(blob):
    hdr = np.frombuffer(blob.payload, "<f4", count=blob.header_bytes // 4).reshape(-1, 2)
    return np.repeat(hdr[:, 1].astype(np.float64), blob.block_size)[:blob.element_count]


# -- fp16 -----------------------------------------------------------------------

def test_fp16_representable_values_round_trip():
    x = np.array([0.5, -2.0, 0.0, 1024.0, 2.0**-14], np.float32)
    assert np.array_equal(dequantize_fp16(quantize_fp16(x)), x)


def test_fp16_million_values_halve_and_stay_close():
    x = np.random.default_rng(0).uniform(-1, 1, 10**6).astype(np.float32)
    blob = quantize_fp16(x)
    assert len(blob.payload) == 2 * 10**6
    assert np.max(np.abs(dequantize_fp16(blob) - x)) <= 2.0**-11


def test_fp16_needs_half_the_pages():
    x = rand(123457)
    raw = codec_report(x, encode_raw32(x)).pages_required
    half = codec_report(x, quantize_fp16(x)).pages_required
    assert abs(half - math.ceil(raw / 2)) <= 1


def test_fp16_is_a_fixed_point():
    x = rand(5000, 3)
    once = dequantize_fp16(quantize_fp16(x))
    assert np.array_equal(dequantize_fp16(quantize_fp16(once)), once)
    assert once.size == x.size and once.dtype == np.float32


def test_fp16_clamps_and_reports():
    x = np.array([1e6, -1e6, np.inf, np.nan, 1.0], np.float32)
    blob = quantize_fp16(x)
    assert blob.clamped == 4
    y = dequantize_fp16(blob)
    assert y[0] == 65504 and y[1] == -65504 and y[2] == 65504 and y[3] == 0 and y[4] == 1
    assert codec_report(np.nan_to_num(x), blob).clamped == 4


def test_codec_mismatch_rejected():
    with pytest.raises(CodecError):
        dequantize_fp16(encode_raw32(rand(4)))
    with pytest.raises(CodecError):
        decompress(quantize_fp16(rand(4)))


@given(st.lists(st.floats(-1, 1, width=32), min_size=1, max_size=300))
def test_fp16_error_bound(values):
    x = np.array(values, np.float32)
    err = np.abs(dequantize_fp16(quantize_fp16(x)).astype(np.float64) - x)
    assert np.all(err <= 2.0**-11 * np.maximum(1, np.abs(x)))


# -- lossy ------------------------------------------------------------------------

def test_constant_block_is_exact():
    x = np.full(3000, 0.37, np.float32)
    blob = compress_lossy(x, 4)
    assert np.all(block_scales(blob) == 0)
    assert np.array_equal(decompress(blob), x)


def test_linspace_ten_bits():
    x = np.linspace(0, 1, 1024, dtype=np.float32)
    blob = compress_lossy(x, 10)
    err = np.max(np.abs(decompress(blob).astype(np.float64) - x))
    assert err <= 0.5 / (2**10 - 1) + 1e-9
    assert err <= block_scales(blob).max() / 2


def test_two_bits_is_much_lossier():
    x = np.random.default_rng(2).uniform(-1, 1, 1024).astype(np.float32)
    rng = float(x.max() - x.min())
    e2 = np.max(np.abs(decompress(compress_lossy(x, 2)) - x))
    e10 = np.max(np.abs(decompress(compress_lossy(x, 10)) - x))
    assert e2 <= rng / 6 * (1 + 1e-6)
    assert e2 > 50 * e10


def test_lattice_values_round_trip_exactly():
    codes = np.random.default_rng(3).integers(0, 32, 4096)
    codes[::1024] = 0
    codes[1::1024] = 31
    x = (0.25 + codes * 2.0**-8).astype(np.float32)
    assert np.array_equal(decompress(compress_lossy(x, 5)), x)


def test_rejects_bits_out_of_range():
    for b in (1, 11):
        with pytest.raises(CodecError):
            compress_lossy(rand(10), b)
    with pytest.raises(CodecError):
        compress_lossy(np.array([1.0, np.nan], np.float32), 4)


def test_block_structure_preserved():
    x = rand(2500, 4)
    blob = compress_lossy(x, 6, block_size=1000)
    assert blob.header_bytes == 3 * BLOCK_HEADER_BYTES
    assert blob.packed_bytes == math.ceil(2500 * 6 / 8)
    assert decompress(blob).shape == (2500,)


def test_truncated_payload_rejected():
    blob = compress_lossy(rand(100), 5)
    bad = WeightBlob("lossy", blob.payload[:-1], blob.element_count, 5, blob.block_size)
    with pytest.raises(CodecError):
        decompress(bad)
    with pytest.raises(CodecError):
        WeightBlob.from_bytes(blob.to_bytes()[:-3])


@given(st.integers(2, 10), st.integers(1, 3000), st.sampled_from([1, 7, 64, 1024]),
       st.integers(0, 2**16), st.sampled_from([1e-3, 1.0, 1e4]))
def test_lossy_bound_and_ratio(bits, n, block, seed, spread):
    x = (np.random.default_rng(seed).standard_normal(n) * spread).astype(np.float32)
    blob = compress_lossy(x, bits, block)
    err = np.abs(decompress(blob).astype(np.float64) - x)
    assert np.all(err <= block_scales(blob) / 2)
    assert blob.packed_bytes == math.ceil(n * bits / 8)
    if (n * bits) % 8 == 0:
        assert blob.packed_bytes * 32 == 4 * n * bits


@given(st.integers(0, 2**16), st.sampled_from([64, 1024]))
def test_error_non_increasing_in_bits(seed, block):
    x = np.random.default_rng(seed).uniform(-2, 2, 4096).astype(np.float32)
    errs = [codec_report(x, compress_lossy(x, b, block)).max_abs_error for b in range(2, 11)]
    assert all(a >= b for a, b in zip(errs, errs[1:]))


def test_raw32_report_is_lossless():
    x = rand(999)
    rep = codec_report(x, encode_raw32(x))
    assert rep.max_abs_error == 0 and rep.ratio == 1


def test_report_separates_payload_and_total_ratio():
    x = rand(8192)
    rep = codec_report(x, compress_lossy(x, 4))
    assert rep.payload_ratio == 8
    assert rep.ratio < 8


# -- file format --------------------------------------------------------------------

@pytest.mark.parametrize("codec", ["raw32", "fp16", "lossy"])
def test_blob_file_round_trip(tmp_path, codec):
    x = rand(3001, 5)
    blob = encode(x, codec, bits=7, block_size=256)
    path = tmp_path / "w.blob"
    blob.save(path)
    back = WeightBlob.load(path)
    assert back.codec == codec and back.payload == blob.payload
    assert np.array_equal(decode(back), decode(blob))


def test_blob_header_layout():
    blob = compress_lossy(rand(10), 3, block_size=4)
    raw = blob.to_bytes()
    magic, tag, bits, reserved, count, block = struct.unpack_from("<4sBBHQI", raw)
    assert (magic, tag, bits, reserved, count, block) == (MAGIC, 2, 3, 0, 10, 4)
    assert raw[20:] == blob.payload
    # three block headers, then 30 bits of codes in 4 bytes
    assert len(blob.payload) == 3 * 8 + 4


def test_bit_packing_is_lsb_first():
    # values on a 2-bit lattice [0, 1/3, 2/3, 1] -> codes 0,1,2,3
    x = np.array([0, 1, 2, 3], np.float32)
    blob = compress_lossy(x, 2, block_size=4)
    assert blob.payload[8:] == bytes([0b11100100])


def test_bad_magic_and_tag():
    raw = bytearray(encode_raw32(rand(2)).to_bytes())
    with pytest.raises(CodecError):
        WeightBlob.from_bytes(b"XXXX" + bytes(raw[4:]))
    raw[4] = 9
    with pytest.raises(CodecError):
        WeightBlob.from_bytes(bytes(raw))
    with pytest.raises(CodecError):
        WeightBlob.from_bytes(b"TW")


# -- streamed fc ------------------------------------------------------------------------

def streamed(codec, out=64, inp=3000, workers=1, seed=0, **kw):
    w, x, b = rand((out, inp), seed), rand(inp, seed + 1), rand(out, seed + 2)
    blob = encode(w, codec, **kw)
    enc = Enclave(EnclaveConfig(secure_bytes=64 * 4096))
    enc.warm()
    enc.record()
    res = fc_streamed(x, blob, FcLayerSpec(inp, out), enc, workers, bias=b)
    return w, x, b, blob, enc, res


def test_raw32_stream_is_bit_identical():
    w, x, b, blob, _, res = streamed("raw32")
    assert np.array_equal(res.output, fc_direct(x, w, b))


@pytest.mark.parametrize("codec", ["fp16", "lossy"])
def test_encoded_stream_matches_decoded_weights(codec):
    w, x, b, blob, _, res = streamed(codec)
    ref = fc_direct(x, decode(blob).reshape(w.shape), b)
    np.testing.assert_allclose(res.output, ref, rtol=1e-5, atol=1e-5 * np.abs(ref).max())


@pytest.mark.parametrize("codec", ["raw32", "fp16", "lossy"])
def test_each_weight_page_faults_once(codec):
    _, _, _, blob, enc, res = streamed(codec)
    pages = math.ceil(len(blob.payload) / 4096)
    assert res.weight_faults == pages
    if codec == "lossy":
        return
    # dense codecs sweep the weight pages in one ascending pass
    handle = [h for h in enc._handles.values() if h.label == "fc.weights"][0]
    mine = set(enc.pages_of(handle))
    seen = []
    for _, p in enc.trace:
        if p in mine and (not seen or seen[-1] != p):
            seen.append(p)
    assert seen == sorted(set(seen)) and len(seen) == pages


def test_fp16_halves_weight_faults():
    _, _, _, _, _, raw = streamed("raw32", out=256, inp=4096)
    _, _, _, _, _, half = streamed("fp16", out=256, inp=4096)
    assert abs(half.weight_faults - math.ceil(raw.weight_faults / 2)) <= 1


def test_lossy_five_bits_is_about_a_sixth():
    _, _, _, _, _, raw = streamed("raw32", out=256, inp=4096)
    _, _, _, _, _, lz = streamed("lossy", out=256, inp=4096, bits=5)
    assert 0.15 <= lz.weight_faults / raw.weight_faults <= 0.18


def test_workers_in_cost_model():
    costs = {w: streamed("fp16", workers=w)[5].cost for w in (1, 2, 8)}
    assert costs[1] == 2 * costs[2]
    assert costs[2] == costs[8]
    raw = {w: streamed("raw32", workers=w)[5].cost for w in (1, 8)}
    assert raw[1] == raw[8]


def test_stream_rejects_wrong_shape():
    blob = encode_raw32(rand((4, 5)))
    with pytest.raises(ShapeError):
        fc_streamed(rand(6), blob, FcLayerSpec(6, 4), Enclave())
