"""Traced end-to-end experiments and their reports.

A run walks the model layer by layer inside one warm enclave.  Conv layers
execute under the configured scheme; fc layers stream their (optionally
encoded) weights; pooling and activations are traced as plain reads and
writes.  A layer whose scheme has no plan within the budget is flagged
infeasible and executed with the smallest plan available, so a run always
produces numbers for every layer.
"""

from __future__ import annotations

import csv
import io
import json
import zlib
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .codec import decode, encode, expected_payload_bytes, fc_streamed
from .enclave import Enclave, EnclaveConfig, LayerBuffers
from .errors import InfeasibleBudget
from .im2col import F32, conv2d_unmodified, im2col_bytes
from .modelio import load_model
from .partition import (ChannelPlan, SchemeChoice, YPlanePlan, channel_footprint,
                        min_feasible_budget, plan_channel, plan_yplane, run_choice,
                        select_scheme, unpartitioned_footprint, yplane_footprint)
from .tensor import (FLOAT, Activation, Conv, Fc, MaxPool, Model, apply_activation,
                     maxpool_direct, random_input, run_layer_reference)

SCHEMES = ("unmodified", "yplane", "channel", "hybrid")
CODECS = ("raw32", "fp16", "lossy")


@dataclass
class ExperimentConfig:
    model: str = "vgg-large-s8"
    enclave: EnclaveConfig = field(default_factory=EnclaveConfig)
    scheme: str = "hybrid"
    fc_codec: str = "raw32"
    bits: int = 5
    workers: int = 1
    seed: int = 0
    block_size: int = 1024
    check: bool = True

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; choose from {', '.join(SCHEMES)}")
        if self.fc_codec not in CODECS:
            raise ValueError(f"unknown fc codec {self.fc_codec!r}; choose from {', '.join(CODECS)}")
        if self.fc_codec == "lossy" and not 2 <= self.bits <= 10:
            raise ValueError(f"bits per value must be in [2, 10], got {self.bits}")
        if self.workers < 1:
            raise ValueError("need at least one worker")


@dataclass
class LayerReport:
    layer: int
    type: str
    scheme: str
    partitions: int
    input_bytes: int
    im2col_bytes: int
    weight_bytes: int
    output_bytes: int
    faults: int
    evictions: int
    weight_faults: int
    cost: float
    infeasible: bool
    checksum: str


COLUMNS = [f.name for f in fields(LayerReport)]


def checksum(x: np.ndarray) -> str:
    return f"{zlib.crc32(np.ascontiguousarray(x, dtype=FLOAT).tobytes()):08x}"


def _conv_choice(scheme: str, spec, h: int, w: int, budget: int, page: int):
    """(SchemeChoice, infeasible) for one conv layer under ``scheme``."""
    if scheme == "unmodified":
        return (SchemeChoice("unmodified", None),
                unpartitioned_footprint(spec, h, w, page) > budget)
    if scheme == "yplane":
        try:
            return SchemeChoice("yplane", plan_yplane(spec, h, w, budget, page)), False
        except InfeasibleBudget:
            return SchemeChoice("yplane", YPlanePlan.with_rows(spec, h, w, 1, page)), True
    if scheme == "channel":
        try:
            return SchemeChoice("channel", plan_channel(spec, h, w, budget, page)), False
        except InfeasibleBudget:
            return SchemeChoice("channel", ChannelPlan.with_group(spec, h, w, 1, page)), True
    try:
        return select_scheme(spec, h, w, budget, page), False
    except InfeasibleBudget:
        if yplane_footprint(spec, h, w, 1, page) <= channel_footprint(spec, h, w, 1, page):
            return SchemeChoice("yplane", YPlanePlan.with_rows(spec, h, w, 1, page)), True
        return SchemeChoice("channel", ChannelPlan.with_group(spec, h, w, 1, page)), True


def run_experiment(config: ExperimentConfig, model: Model | None = None, trace_out=None):
    """Run one traced inference; returns ``(reports, summary)``.

    ``model`` overrides loading ``config.model`` (it must carry weights).
    With ``trace_out`` (a text stream) the page accesses after warm-up are
    written there in the ``<R|W> <page>`` format.
    """
    if model is None:
        model = load_model(config.model, seed=config.seed)
    enclave = Enclave(config.enclave)
    enclave.warm()
    if trace_out is not None:
        enclave.record()
    page = config.enclave.page_bytes
    budget = config.enclave.secure_bytes
    cost_fault = config.enclave.cost_fault
    x = random_input(model.input_shape, config.seed)
    ref = x.copy() if config.check else None
    cur = enclave.alloc(x.size * F32, "model.input")
    reports = []
    shapes = model.shapes()
    for i, (layer, (s_in, s_out)) in enumerate(zip(model.layers, shapes), start=1):
        before = enclave.stats()
        in_bytes = int(np.prod(s_in)) * F32
        out_bytes = int(np.prod(s_out)) * F32
        cols = wbytes = wfaults = partitions = 0
        scheme, infeasible, extra_cost = "-", False, 0.0
        if isinstance(layer, Conv):
            spec = layer.spec
            h, w = s_in[1], s_in[2]
            choice, infeasible = _conv_choice(config.scheme, spec, h, w, budget, page)
            buffers = LayerBuffers(
                cur, enclave.alloc(spec.weight_count * F32, f"L{i}.weights"),
                enclave.alloc(spec.out_channels * F32, f"L{i}.bias") if spec.has_bias else None,
                enclave.alloc(out_bytes, f"L{i}.output"))
            if choice.kind == "unmodified":
                y = conv2d_unmodified(x, layer.weights, layer.bias, spec, enclave, buffers)
            else:
                y = run_choice(layer, x, choice, enclave, buffers)
            if layer.activation != "linear":
                enclave.access(buffers.output, 0, out_bytes, "rw")
            x = apply_activation(y, layer.activation)
            cur = buffers.output
            scheme, partitions = choice.kind, choice.partitions
            cols, wbytes = im2col_bytes(spec, h, w), spec.weight_count * F32
            if ref is not None:
                ref = run_layer_reference(layer, ref)
        elif isinstance(layer, Fc):
            spec = layer.spec
            blob = encode(layer.weights, config.fc_codec, config.bits, config.block_size)
            wbytes = expected_payload_bytes(blob.codec, blob.element_count, blob.bits,
                                            blob.block_size)
            buffers = LayerBuffers(
                cur, enclave.alloc(len(blob.payload), f"L{i}.weights"),
                enclave.alloc(spec.out_features * F32, f"L{i}.bias") if spec.has_bias else None,
                enclave.alloc(out_bytes, f"L{i}.output"))
            res = fc_streamed(x, blob, spec, enclave, config.workers, layer.bias, buffers)
            if layer.activation != "linear":
                enclave.access(buffers.output, 0, out_bytes, "rw")
            x = apply_activation(res.output, layer.activation)
            cur = buffers.output
            scheme, partitions, wfaults = config.fc_codec, 1, res.weight_faults
            # weight pages are charged at the link model's rate instead of per fault
            extra_cost = res.cost - res.weight_faults * cost_fault
            if ref is not None:
                dec = decode(blob).reshape(layer.weights.shape)
                ref = run_layer_reference(Fc(spec, dec, layer.bias, layer.activation), ref)
        elif isinstance(layer, MaxPool):
            out = enclave.alloc(out_bytes, f"L{i}.output")
            enclave.access(cur, 0, in_bytes, "r")
            enclave.access(out, 0, out_bytes, "w")
            x = maxpool_direct(x, layer.size, layer.stride, layer.pad)
            cur = out
            if ref is not None:
                ref = run_layer_reference(layer, ref)
        elif isinstance(layer, Activation):
            enclave.access(cur, 0, in_bytes, "rw")
            x = apply_activation(np.asarray(x, dtype=FLOAT), layer.kind)
            if ref is not None:
                ref = run_layer_reference(layer, ref)
        delta = enclave.stats() - before
        reports.append(LayerReport(
            layer=i, type=type(layer).__name__.lower(), scheme=scheme, partitions=partitions,
            input_bytes=in_bytes, im2col_bytes=cols, weight_bytes=wbytes, output_bytes=out_bytes,
            faults=delta.faults, evictions=delta.evictions, weight_faults=wfaults,
            cost=float(delta.total_cost + extra_cost), infeasible=infeasible,
            checksum=checksum(x)))
    if trace_out is not None:
        enclave.dump_trace(trace_out)
    summary = {
        "model": model.name,
        "scheme": config.scheme,
        "fc_codec": config.fc_codec if config.fc_codec != "lossy" else f"lossy{config.bits}",
        "enclave_bytes": budget,
        "page_bytes": page,
        "workers": config.workers,
        "seed": config.seed,
        "total_cost": float(sum(r.cost for r in reports)),
        "total_faults": sum(r.faults for r in reports),
        "total_evictions": sum(r.evictions for r in reports),
        "infeasible_layers": [r.layer for r in reports if r.infeasible],
        "min_feasible_budget": {s: min_feasible_budget(model, s, page)
                                for s in ("yplane", "channel", "hybrid")},
        "output_checksum": checksum(x),
    }
    if ref is not None:
        ref = np.asarray(ref, dtype=FLOAT).reshape(-1)
        out = np.asarray(x, dtype=FLOAT).reshape(-1)
        scale = float(np.max(np.abs(ref))) or 1.0
        summary["max_rel_error"] = float(np.max(np.abs(out - ref)) / scale)
    return reports, summary


def _mb(n: int) -> str:
    return f"{n / (1 << 20):.2f}"


def emit_report(reports, format: str = "csv") -> str:
    """Render reports as CSV (exact values) or a markdown table (sizes in MiB)."""
    if format == "csv":
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(COLUMNS)
        for r in reports:
            row = asdict(r)
            row["cost"] = repr(row["cost"])
            row["infeasible"] = int(row["infeasible"])
            wr.writerow([row[c] for c in COLUMNS])
        return buf.getvalue()
    if format == "markdown":
        head = ["Layer", "Type", "Scheme", "Partitions", "Input (MiB)", "im2col (MiB)",
                "Weights (MiB)", "Output (MiB)", "Faults", "Evictions", "Weight faults",
                "Cost", "Feasible", "Checksum"]
        lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
        for r in reports:
            cells = [r.layer, r.type, r.scheme, r.partitions, _mb(r.input_bytes),
                     _mb(r.im2col_bytes), _mb(r.weight_bytes), _mb(r.output_bytes), r.faults,
                     f"**{r.evictions}**" if r.infeasible else r.evictions, r.weight_faults,
                     f"{r.cost:g}", "no" if r.infeasible else "yes", r.checksum]
            lines.append("| " + " | ".join(str(c) for c in cells) + " |")
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown report format {format!r}")


def parse_csv_report(text: str) -> list[LayerReport]:
    out = []
    for row in csv.DictReader(io.StringIO(text)):
        out.append(LayerReport(
            layer=int(row["layer"]), type=row["type"], scheme=row["scheme"],
            partitions=int(row["partitions"]), input_bytes=int(row["input_bytes"]),
            im2col_bytes=int(row["im2col_bytes"]), weight_bytes=int(row["weight_bytes"]),
            output_bytes=int(row["output_bytes"]), faults=int(row["faults"]),
            evictions=int(row["evictions"]), weight_faults=int(row["weight_faults"]),
            cost=float(row["cost"]), infeasible=bool(int(row["infeasible"])),
            checksum=row["checksum"]))
    return out


def format_summary(summary: dict) -> str:
    lines = []
    for key, val in summary.items():
        if isinstance(val, dict):
            val = ", ".join(f"{k}={v}" for k, v in val.items())
        elif isinstance(val, list):
            val = ", ".join(map(str, val)) or "none"
        lines.append(f"{key}: {val}")
    return "\n".join(lines) + "\n"


def plan_choices(model: Model, budget: int, page: int = 4096) -> list[dict]:
    """Per conv layer: the hybrid choice and the footprints it compared."""
    rows = []
    for index, layer, shape in model.conv_layers():
        spec, h, w = layer.spec, shape[1], shape[2]
        entry = {"layer": index, "in_channels": spec.in_channels,
                 "out_channels": spec.out_channels, "height": h, "width": w}
        try:
            entry.update(select_scheme(spec, h, w, budget, page).to_dict())
        except InfeasibleBudget as exc:
            entry.update({"kind": "infeasible", "plan": None,
                          "reason": {"budget_bytes": budget, "required_bytes": exc.required_bytes,
                                     "unpartitioned_bytes": unpartitioned_footprint(spec, h, w, page),
                                     "yplane_min_bytes": yplane_footprint(spec, h, w, 1, page),
                                     "channel_min_bytes": channel_footprint(spec, h, w, 1, page)}})
        rows.append(entry)
    return rows


def explain_plan(model: Model, budget: int, page: int = 4096, as_json: bool = False) -> str:
    choices = plan_choices(model, budget, page)
    if as_json:
        return json.dumps({"model": model.name, "budget_bytes": budget, "page_bytes": page,
                           "layers": choices}, indent=1) + "\n"
    lines = [f"{model.name} at {_mb(budget)} MiB secure memory, {page}-byte pages"]
    for c in choices:
        r = c["reason"]
        plan = c["plan"]
        label = c["kind"] if plan is None else f"{c['kind']} x{plan['partitions']}"
        chosen = f", chosen {_mb(plan['footprint_bytes'])}" if plan else ""
        lines.append(
            f"L{c['layer']:<3} conv {c['in_channels']}->{c['out_channels']} "
            f"{c['height']}x{c['width']}: {label} (unpartitioned {_mb(r['unpartitioned_bytes'])}, "
            f"yplane-min {_mb(r['yplane_min_bytes'])}, channel-min {_mb(r['channel_min_bytes'])}"
            f"{chosen} MiB)")
    return "\n".join(lines) + "\n"
