"""Command-line entry point: ``teecnn-bench`` / ``python -m teecnn``.

Exit status is 0 on success, 2 when some layer had no plan within the
budget (the run still completes and reports it) and 1 on any error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict

from .bench import CODECS, SCHEMES, ExperimentConfig, emit_report, explain_plan, format_summary
from .bench import run_experiment
from .enclave import MiB, EnclaveConfig
from .errors import CodecError, ModelFormatError, ShapeError
from .modelio import load_model

DESK_MODEL = "vgg-large-s8"
FULL_MODEL = "vgg-large"
DESK_ENCLAVE_MB = 28 / 64
FULL_ENCLAVE_MB = 28.0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="teecnn-bench",
        description="Trace CNN inference through a simulated secure-memory enclave.")
    p.add_argument("--model", help=f"model JSON path or bundled name (default {DESK_MODEL}, "
                                   f"or {FULL_MODEL} with --full-size)")
    p.add_argument("--enclave-mb", type=float,
                   help=f"secure memory in MiB (default {DESK_ENCLAVE_MB}, "
                        f"{FULL_ENCLAVE_MB:g} with --full-size)")
    p.add_argument("--page-bytes", type=int, default=4096)
    p.add_argument("--scheme", choices=SCHEMES, default="hybrid")
    p.add_argument("--fc-codec", choices=CODECS, default="raw32")
    p.add_argument("--bits", type=int, default=5, help="bits per value for the lossy codec")
    p.add_argument("--workers", type=int, default=1, help="decode workers in the link model")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=("markdown", "csv", "json"), default="markdown")
    p.add_argument("--explain", action="store_true",
                   help="print the per-layer partition plan instead of running")
    p.add_argument("--trace-out", help="write the page access trace to this file")
    p.add_argument("--out", help="write the report here instead of stdout")
    p.add_argument("--full-size", action="store_true",
                   help="use the full-size model and enclave defaults")
    p.add_argument("--no-check", action="store_true",
                   help="skip the reference forward pass")
    return p


def _run(args) -> tuple[str, int]:
    model_name = args.model or (FULL_MODEL if args.full_size else DESK_MODEL)
    mb = args.enclave_mb if args.enclave_mb is not None else (
        FULL_ENCLAVE_MB if args.full_size else DESK_ENCLAVE_MB)
    enclave = EnclaveConfig(secure_bytes=int(mb * MiB), page_bytes=args.page_bytes)
    if args.explain:
        model = load_model(model_name, with_weights=False)
        return explain_plan(model, enclave.secure_bytes, enclave.page_bytes,
                            as_json=args.format == "json"), 0
    config = ExperimentConfig(model=model_name, enclave=enclave, scheme=args.scheme,
                              fc_codec=args.fc_codec, bits=args.bits, workers=args.workers,
                              seed=args.seed, check=not args.no_check)
    model = load_model(model_name, seed=args.seed)
    trace = None
    if args.trace_out:
        trace = open(args.trace_out, "w")
    try:
        reports, summary = run_experiment(config, model, trace_out=trace)
    finally:
        if trace is not None:
            trace.close()
    if args.format == "json":
        text = json.dumps({"layers": [asdict(r) for r in reports], "summary": summary},
                          indent=1) + "\n"
    elif args.format == "csv":
        text = emit_report(reports, "csv")
    else:
        text = emit_report(reports, "markdown") + "\n" + format_summary(summary)
    return text, 2 if summary["infeasible_layers"] else 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        text, status = _run(args)
    except (ModelFormatError, ShapeError, CodecError, OSError, ValueError) as exc:
        print(f"teecnn-bench: error: {exc}", file=sys.stderr)
        return 1
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    if status == 2:
        print("teecnn-bench: some layers have no plan within the budget", file=sys.stderr)
    return status


if __name__ == "__main__":
    sys.exit(main())
