"""Streaming a large fully-connected layer through secure memory in three encodings.

For each codec: payload size, weight-page faults, reconstruction error, and
the link-model time as the number of decode workers grows.
"""

from __future__ import annotations

import argparse

import numpy as np

from teecnn.codec import codec_report, encode, fc_streamed
from teecnn.enclave import Enclave
from teecnn.tensor import FcLayerSpec


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--inputs", type=int, default=25088)
    ap.add_argument("--outputs", type=int, default=1024,
                    help="rows of the layer (4096 for the full VGG head, ~1.2 GB of RAM)")
    ap.add_argument("--bits", type=int, default=5)
    args = ap.parse_args()

    spec = FcLayerSpec(args.inputs, args.outputs)
    rng = np.random.default_rng(0)
    w = rng.standard_normal((args.outputs, args.inputs), dtype=np.float32) * 0.01
    x = rng.standard_normal(args.inputs, dtype=np.float32)

    print(f"fc {args.outputs}x{args.inputs}\n")
    print(f"{'codec':<8} {'MiB':>8} {'faults':>8} {'max err':>10} "
          + " ".join(f"{'t(w=' + str(k) + ')':>9}" for k in (1, 2, 4, 8)))
    for codec in ("raw32", "fp16", "lossy"):
        blob = encode(w, codec, bits=args.bits)
        rep = codec_report(w, blob)
        res = [fc_streamed(x, blob, spec, Enclave(), workers=k) for k in (1, 2, 4, 8)]
        name = codec if codec != "lossy" else f"lossy{args.bits}"
        print(f"{name:<8} {len(blob.payload) / 2**20:8.2f} {res[0].weight_faults:>8} "
              f"{rep.max_abs_error:10.3g} " + " ".join(f"{r.cost:9.0f}" for r in res))


if __name__ == "__main__":
    main()
