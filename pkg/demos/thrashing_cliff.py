"""Evictions of one conv layer as secure memory grows from 1 to 8 MiB.

The unmodified execution lowers the whole input into a ~4 MB im2col buffer and
sweeps it once per output channel, so it thrashes until that buffer fits.  A
y-plane plan sized for 1 MiB keeps its working set small at every size.
"""

from __future__ import annotations

import argparse

import numpy as np

from teecnn.enclave import MiB, Enclave, EnclaveConfig
from teecnn.im2col import conv2d_unmodified, im2col_bytes, register_conv_buffers
from teecnn.partition import conv2d_yplane, plan_yplane
from teecnn.tensor import ConvLayerSpec


def evictions(spec, x, w, b, mb, plan=None):
    enc = Enclave(EnclaveConfig(secure_bytes=mb * MiB))
    enc.warm()
    bufs = register_conv_buffers(enc, x, spec)
    if plan is None:
        conv2d_unmodified(x, w, b, spec, enc, bufs)
    else:
        conv2d_yplane(x, w, b, plan, enc, bufs)
    return enc.stats().evictions


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--channels", type=int, default=32)
    ap.add_argument("--size", type=int, default=60)
    ap.add_argument("--max-mb", type=int, default=8)
    args = ap.parse_args()

    spec = ConvLayerSpec(args.channels, args.channels, 3, 1, 1)
    rng = np.random.default_rng(0)
    x = rng.standard_normal((args.channels, args.size, args.size), dtype=np.float32)
    w = rng.standard_normal(spec.weight_shape, dtype=np.float32)
    b = np.zeros(args.channels, np.float32)
    plan = plan_yplane(spec, args.size, args.size, 1 * MiB)

    print(f"layer {args.channels}->{args.channels}, {args.size}x{args.size}, 3x3 same padding")
    print(f"im2col buffer {im2col_bytes(spec, args.size, args.size) / MiB:.2f} MiB; "
          f"y-plane plan: {plan.partitions} partitions of {plan.rows_per_partition} rows\n")
    print(f"{'MiB':>4} {'unmodified':>11} {'y-plane':>8}")
    for mb in range(1, args.max_mb + 1):
        print(f"{mb:>4} {evictions(spec, x, w, b, mb):>11} {evictions(spec, x, w, b, mb, plan):>8}")


if __name__ == "__main__":
    main()
