"""End-to-end traced inference of the 1/8-scale large VGG under every scheme.

The default budget (28 MiB / 64) sits between the hybrid and channel-only
minimum budgets, so only the hybrid scheme runs every layer within it.
"""

from __future__ import annotations

import argparse

from teecnn.bench import SCHEMES, ExperimentConfig, emit_report, run_experiment
from teecnn.enclave import EnclaveConfig
from teecnn.modelio import load_model


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--budget-kib", type=int, default=28 * 1024 // 64)
    ap.add_argument("--details", action="store_true", help="print each per-layer table")
    args = ap.parse_args()

    model = load_model("vgg-large-s8", seed=0)
    enclave = EnclaveConfig(secure_bytes=args.budget_kib * 1024)
    print(f"{model.name} at {args.budget_kib} KiB ({enclave.capacity} pages)\n")
    print(f"{'scheme':<11} {'faults':>8} {'evictions':>10} {'cost':>10}  infeasible layers")
    for scheme in SCHEMES:
        reports, summary = run_experiment(ExperimentConfig(enclave=enclave, scheme=scheme), model)
        bad = ", ".join(map(str, summary["infeasible_layers"])) or "-"
        print(f"{scheme:<11} {summary['total_faults']:>8} {summary['total_evictions']:>10} "
              f"{summary['total_cost']:>10.0f}  {bad}")
        if args.details:
            print(emit_report(reports, "markdown"))
    mins = summary["min_feasible_budget"]
    print("\nminimum budgets: " + ", ".join(f"{k} {v // 1024} KiB" for k, v in mins.items()))


if __name__ == "__main__":
    main()
