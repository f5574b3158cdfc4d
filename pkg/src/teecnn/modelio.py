"""Model description files.

A model is a JSON document::

    {
      "name": "vgg16",
      "input": {"channels": 3, "height": 224, "width": 224},
      "seed": 0,                       # optional, for generated weights
      "weights": "vgg16.weights",      # optional sidecar, relative to the JSON
      "layers": [
        {"type": "conv", "filters": 64, "size": 3, "stride": 1, "pad": 1,
         "bias": true, "activation": "relu"},
        {"type": "maxpool", "size": 2, "stride": 2, "pad": 0},
        {"type": "fc", "outputs": 4096, "bias": true, "activation": "relu"},
        {"type": "activation", "kind": "softmax"}
      ]
    }

``stride``, ``pad``, ``bias`` and ``activation`` have the defaults 1, 0, true
and "linear".  The sidecar is raw little-endian float32: for each conv or fc
layer in order, its weights (``N x C x K x K`` or ``out x in``) followed by its
bias.  Without a sidecar, weights are drawn from the seed (He-scaled normals,
small normal biases), the same for every load.
"""

from __future__ import annotations

import json
import os
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ModelFormatError, ShapeError
from .tensor import (ACTIVATIONS, FLOAT, Activation, Conv, ConvLayerSpec, Fc, FcLayerSpec,
                     MaxPool, Model, layer_output_shape)

BUNDLED = ("vgg16", "vgg-large", "vgg-large-s8")


def bundled_model_path(name: str) -> Path:
    if name not in BUNDLED:
        raise ModelFormatError(f"no bundled model {name!r}; choose from {', '.join(BUNDLED)}")
    return Path(str(resources.files("teecnn") / "models" / f"{name}.json"))


def resolve_model_path(name_or_path) -> Path:
    p = Path(name_or_path)
    if p.suffix == "" and str(name_or_path) in BUNDLED and not p.exists():
        return bundled_model_path(str(name_or_path))
    return p


def _field(d: dict, key: str, where: str, kind=int, default=None, required=True):
    if key not in d:
        if required and default is None:
            raise ModelFormatError(f"{where}.{key}: missing")
        return default
    val = d[key]
    if kind is int and (isinstance(val, bool) or not isinstance(val, int)):
        raise ModelFormatError(f"{where}.{key}: expected an integer, got {val!r}")
    if kind is bool and not isinstance(val, bool):
        raise ModelFormatError(f"{where}.{key}: expected true/false, got {val!r}")
    if kind is str and not isinstance(val, str):
        raise ModelFormatError(f"{where}.{key}: expected a string, got {val!r}")
    return val


def _activation(d: dict, where: str, key: str = "activation") -> str:
    act = _field(d, key, where, str, "linear")
    if act not in ACTIVATIONS:
        raise ModelFormatError(f"{where}.{key}: unknown activation {act!r}")
    return act


def parse_model(doc: dict) -> Model:
    """Build a weightless :class:`Model` from a parsed JSON document."""
    if not isinstance(doc, dict):
        raise ModelFormatError("model document must be a JSON object")
    inp = doc.get("input")
    if not isinstance(inp, dict):
        raise ModelFormatError("input: missing or not an object")
    shape = tuple(_field(inp, k, "input") for k in ("channels", "height", "width"))
    if min(shape) < 1:
        raise ModelFormatError(f"input: dimensions must be positive, got {shape}")
    layers_doc = doc.get("layers")
    if not isinstance(layers_doc, list) or not layers_doc:
        raise ModelFormatError("layers: missing or empty")
    model = Model(shape, [], str(doc.get("name", "model")))
    cur = shape
    for i, ld in enumerate(layers_doc, start=1):
        where = f"layers[{i}]"
        if not isinstance(ld, dict):
            raise ModelFormatError(f"{where}: expected an object")
        kind = ld.get("type")
        try:
            if kind == "conv":
                if len(cur) != 3:
                    raise ShapeError(f"conv after a flat {cur} tensor")
                spec = ConvLayerSpec(cur[0], _field(ld, "filters", where), _field(ld, "size", where),
                                     _field(ld, "stride", where, int, 1),
                                     _field(ld, "pad", where, int, 0),
                                     _field(ld, "bias", where, bool, True))
                layer = Conv(spec, activation=_activation(ld, where))
            elif kind == "maxpool":
                layer = MaxPool(_field(ld, "size", where), _field(ld, "stride", where),
                                _field(ld, "pad", where, int, 0))
            elif kind == "fc":
                spec = FcLayerSpec(int(np.prod(cur)), _field(ld, "outputs", where),
                                   _field(ld, "bias", where, bool, True))
                layer = Fc(spec, activation=_activation(ld, where))
            elif kind == "activation":
                layer = Activation(_activation(ld, where, "kind"))
            else:
                raise ModelFormatError(f"{where}.type: unknown layer type {kind!r}")
            cur = layer_output_shape(layer, cur)
        except ShapeError as exc:
            raise ShapeError(str(exc), layer_index=i) from None
        model.layers.append(layer)
    return model


def _layer_arrays(layer):
    spec = layer.spec
    if isinstance(layer, Conv):
        return spec.weight_shape, spec.patch_size, spec.out_channels
    return (spec.out_features, spec.in_features), spec.in_features, spec.out_features


def generate_weights(model: Model, seed: int = 0) -> Model:
    """Fill every conv/fc layer with reproducible random parameters."""
    for i, layer in enumerate(model.layers):
        if not isinstance(layer, (Conv, Fc)):
            continue
        shape, fan_in, n = _layer_arrays(layer)
        rng = np.random.default_rng([seed, i])
        w = rng.standard_normal(shape, dtype=FLOAT)
        w *= FLOAT(np.sqrt(2.0 / fan_in))
        layer.weights = w
        layer.bias = (rng.standard_normal(n, dtype=FLOAT) * FLOAT(0.01)
                      if layer.spec.has_bias else None)
    return model


def read_weights(model: Model, path) -> Model:
    raw = np.fromfile(path, dtype="<f4")
    need = sum(int(np.prod(_layer_arrays(l)[0])) + (_layer_arrays(l)[2] if l.spec.has_bias else 0)
               for l in model.weighted_layers())
    if raw.size != need:
        raise ModelFormatError(f"weights: sidecar holds {raw.size} values, model needs {need}")
    pos = 0
    for layer in model.weighted_layers():
        shape, _, n = _layer_arrays(layer)
        size = int(np.prod(shape))
        layer.weights = raw[pos:pos + size].astype(FLOAT).reshape(shape)
        pos += size
        if layer.spec.has_bias:
            layer.bias = raw[pos:pos + n].astype(FLOAT)
            pos += n
        else:
            layer.bias = None
    return model


def load_model(path, with_weights: bool = True, seed: int | None = None) -> Model:
    """Load a model file or a bundled model by name.

    ``seed`` overrides the document's seed for generated weights; it has no
    effect when a sidecar is present.
    """
    path = resolve_model_path(path)
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path}: not valid JSON ({exc})") from None
    model = parse_model(doc)
    if not with_weights:
        return model
    if doc.get("weights"):
        return read_weights(model, Path(path).parent / doc["weights"])
    return generate_weights(model, doc.get("seed", 0) if seed is None else seed)


def model_to_dict(model: Model) -> dict:
    layers = []
    for layer in model.layers:
        if isinstance(layer, Conv):
            s = layer.spec
            layers.append({"type": "conv", "filters": s.out_channels, "size": s.kernel,
                           "stride": s.stride, "pad": s.padding, "bias": s.has_bias,
                           "activation": layer.activation})
        elif isinstance(layer, MaxPool):
            layers.append({"type": "maxpool", "size": layer.size, "stride": layer.stride,
                           "pad": layer.pad})
        elif isinstance(layer, Fc):
            layers.append({"type": "fc", "outputs": layer.spec.out_features,
                           "bias": layer.spec.has_bias, "activation": layer.activation})
        else:
            layers.append({"type": "activation", "kind": layer.kind})
    c, h, w = model.input_shape
    return {"name": model.name, "input": {"channels": c, "height": h, "width": w},
            "layers": layers}


def save_model(model: Model, path, with_weights: bool = True) -> None:
    """Write ``path`` (JSON) and, with weights, a ``.weights`` sidecar next to it."""
    doc = model_to_dict(model)
    path = Path(path)
    if with_weights:
        sidecar = path.with_suffix(".weights")
        with open(sidecar, "wb") as fh:
            for layer in model.weighted_layers():
                if layer.weights is None:
                    raise ModelFormatError(f"layer {layer.spec} has no weights to save")
                fh.write(np.asarray(layer.weights, dtype="<f4").tobytes())
                if layer.spec.has_bias:
                    fh.write(np.asarray(layer.bias, dtype="<f4").tobytes())
        doc["weights"] = os.path.basename(sidecar)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")
