"""Which partitioning each conv layer of a model needs under a memory budget.

Prints the smallest budget at which every layer fits for y-plane only,
channel only and the per-layer hybrid, then the hybrid plan layer by layer.
"""

from __future__ import annotations

import argparse

from teecnn.bench import explain_plan
from teecnn.enclave import MiB
from teecnn.modelio import load_model
from teecnn.partition import min_feasible_budget


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--model", default="vgg-large")
    ap.add_argument("--budget-mb", type=float, default=28.0)
    args = ap.parse_args()

    model = load_model(args.model, with_weights=False)
    print(f"minimum secure memory for {model.name}:")
    for scheme in ("yplane", "channel", "hybrid"):
        print(f"  {scheme:<8} {min_feasible_budget(model, scheme) / MiB:8.2f} MiB")
    print()
    print(explain_plan(model, int(args.budget_mb * MiB)), end="")


if __name__ == "__main__":
    main()
