"""Model-file ingestion: layer specs, hyperparameters, parsing and shape inference.

A model file is a JSON document::

    {
      "name": "mlp",                       # optional
      "input_shape": [20, 20, 1],
      "layers": [{"kind": "Input"}, {"kind": "FullyConnected", "out_channels": 25}, ...],
      "hyperparameters": {"learning_rate": 0.1, ...}
    }
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Any, Sequence

KINDS = (
    "Input",
    "Conv",
    "MaxPool",
    "FullyConnected",
    "Output",
    "InceptionModule",
    "EnhancementUnit",
)
ACTIVATIONS = ("ReLU", "Softmax", "Identity")
PADDINGS = ("same", "valid")
BATCH_MODES = ("GD", "miniBatchGD", "SGD")
MASK_SIZES = (1, 3, 5, 7)

Shape = tuple[int, int, int]


class ModelError(ValueError):
    """Invalid model document or layer specification."""

    def __init__(self, message: str, layer: int | None = None, field: str | None = None):
        self.layer = layer
        self.field = field
        where = []
        if layer is not None:
            where.append(f"layer {layer}")
        if field is not None:
            where.append(f"field '{field}'")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    filter_size: int = 1
    stride: int = 1
    padding: str = "same"
    out_channels: int | None = None
    activation: str = "Identity"
    branches: tuple[tuple["LayerSpec", ...], ...] = ()
    mask_size: int = 3
    feedback_partner: int | None = None
    use_magnitude: bool = True
    name: str | None = None
    note: str | None = None

    @property
    def is_weighted(self) -> bool:
        return self.kind in ("Conv", "FullyConnected", "Output")

    def label(self, index: int) -> str:
        return self.name or f"{self.kind}{index}"


@dataclass(frozen=True)
class Hyperparameters:
    learning_rate: float = 0.1
    batch_mode: str = "GD"
    batch_size: int = 1
    # scalar applies to every hidden layer; a sequence gives one value per layer
    dropout_p: float | tuple[float, ...] = 0.0
    prune_epsilon: float = 0.0
    prune_count_fraction: float = 1.0
    enhancement_iterations: int = 1


@dataclass(frozen=True)
class NetworkModel:
    layers: tuple[LayerSpec, ...]
    input_shape: Shape
    hyper: Hyperparameters = field(default_factory=Hyperparameters)
    name: str | None = None

    def __len__(self) -> int:
        return len(self.layers)

    def dropout_for(self, index: int) -> float:
        p = self.hyper.dropout_p
        if isinstance(p, tuple):
            return p[index]
        if index == 0 or index == len(self.layers) - 1:
            return 0.0
        return p


_LAYER_KEYS = {
    "kind",
    "filter_size",
    "stride",
    "padding",
    "out_channels",
    "activation",
    "branches",
    "mask_size",
    "feedback_partner",
    "use_magnitude",
    "name",
    "note",
}
_HYPER_KEYS = {f for f in Hyperparameters.__dataclass_fields__}
_TOP_KEYS = {"name", "input_shape", "layers", "hyperparameters"}

_DEFAULT_ACTIVATION = {
    "Conv": "ReLU",
    "FullyConnected": "ReLU",
    "Output": "Softmax",
}
_DEFAULT_PADDING = {"MaxPool": "valid", "FullyConnected": "valid", "Output": "valid"}


def _check_keys(obj: dict, allowed: set, strict: bool, layer=None, what="document"):
    if not strict:
        return
    unknown = sorted(set(obj) - allowed)
    if unknown:
        raise ModelError(f"unknown key(s) in {what}: {', '.join(unknown)}", layer, unknown[0])


def _pos_int(value: Any, layer: int | None, name: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int) or value < 1:
        raise ModelError(f"must be a positive integer, got {value!r}", layer, name)
    return value


def _layer_from_dict(obj: Any, index: int, strict: bool) -> LayerSpec:
    if not isinstance(obj, dict):
        raise ModelError("layer entry must be an object", index)
    _check_keys(obj, _LAYER_KEYS, strict, index, "layer")
    kind = obj.get("kind")
    if kind not in KINDS:
        raise ModelError(f"unknown layer kind {kind!r}", index, "kind")

    kw: dict[str, Any] = {"kind": kind}
    kw["filter_size"] = _pos_int(obj.get("filter_size", 1), index, "filter_size")
    kw["stride"] = _pos_int(obj.get("stride", 1), index, "stride")
    padding = obj.get("padding", _DEFAULT_PADDING.get(kind, "same"))
    if padding not in PADDINGS:
        raise ModelError(f"padding must be one of {PADDINGS}, got {padding!r}", index, "padding")
    kw["padding"] = padding
    if "out_channels" in obj:
        kw["out_channels"] = _pos_int(obj["out_channels"], index, "out_channels")
    elif kind in ("Conv", "FullyConnected", "Output"):
        raise ModelError("required for this layer kind", index, "out_channels")
    activation = obj.get("activation", _DEFAULT_ACTIVATION.get(kind, "Identity"))
    if activation not in ACTIVATIONS:
        raise ModelError(f"activation must be one of {ACTIVATIONS}", index, "activation")
    if activation == "Softmax" and kind != "Output":
        raise ModelError("Softmax is only supported on the Output layer", index, "activation")
    kw["activation"] = activation

    if kind == "InceptionModule":
        raw = obj.get("branches")
        if not isinstance(raw, list) or not raw:
            raise ModelError("InceptionModule needs a non-empty list of branches", index, "branches")
        branches = []
        for chain in raw:
            chain = chain if isinstance(chain, list) else [chain]
            if not chain:
                raise ModelError("empty branch", index, "branches")
            specs = tuple(_layer_from_dict(b, index, strict) for b in chain)
            for s in specs:
                if s.kind not in ("Conv", "MaxPool"):
                    raise ModelError("branches may contain only Conv and MaxPool", index, "branches")
            branches.append(specs)
        kw["branches"] = tuple(branches)
    elif "branches" in obj:
        raise ModelError("only InceptionModule layers take branches", index, "branches")

    if kind == "EnhancementUnit":
        m = obj.get("mask_size", 3)
        if m not in MASK_SIZES:
            raise ModelError(f"mask_size must be one of {MASK_SIZES}", index, "mask_size")
        kw["mask_size"] = m
        partner = obj.get("feedback_partner")
        if partner is not None and (isinstance(partner, bool) or not isinstance(partner, int)):
            raise ModelError("must be a layer index", index, "feedback_partner")
        kw["feedback_partner"] = partner
        um = obj.get("use_magnitude", True)
        if not isinstance(um, bool):
            raise ModelError("must be a boolean", index, "use_magnitude")
        kw["use_magnitude"] = um
    for opt in ("name", "note"):
        if obj.get(opt) is not None:
            kw[opt] = str(obj[opt])
    return LayerSpec(**kw)


def _check_layer(layer: LayerSpec, index: int) -> None:
    """Field-level invariants, for layers built in code as well as parsed ones."""
    if layer.kind not in KINDS:
        raise ModelError(f"unknown layer kind {layer.kind!r}", index, "kind")
    for name in ("filter_size", "stride"):
        _pos_int(getattr(layer, name), index, name)
    if layer.padding not in PADDINGS:
        raise ModelError(f"padding must be one of {PADDINGS}", index, "padding")
    if layer.kind in ("Conv", "FullyConnected", "Output"):
        _pos_int(layer.out_channels, index, "out_channels")
    if layer.activation not in ACTIVATIONS:
        raise ModelError(f"activation must be one of {ACTIVATIONS}", index, "activation")
    if layer.activation == "Softmax" and layer.kind != "Output":
        raise ModelError("Softmax is only supported on the Output layer", index, "activation")
    if layer.kind == "EnhancementUnit" and layer.mask_size not in MASK_SIZES:
        raise ModelError(f"mask_size must be one of {MASK_SIZES}", index, "mask_size")
    for chain in layer.branches:
        for b in chain:
            if b.kind not in ("Conv", "MaxPool"):
                raise ModelError("branches may contain only Conv and MaxPool", index, "branches")
            _check_layer(b, index)


def _hyper_from_dict(obj: Any, strict: bool) -> Hyperparameters:
    if obj is None:
        return Hyperparameters()
    if not isinstance(obj, dict):
        raise ModelError("hyperparameters must be an object", field="hyperparameters")
    _check_keys(obj, _HYPER_KEYS, strict, what="hyperparameters")
    kw: dict[str, Any] = {}
    if "learning_rate" in obj:
        kw["learning_rate"] = float(obj["learning_rate"])
    if "batch_mode" in obj:
        if obj["batch_mode"] not in BATCH_MODES:
            raise ModelError(f"must be one of {BATCH_MODES}", field="batch_mode")
        kw["batch_mode"] = obj["batch_mode"]
    if "batch_size" in obj:
        kw["batch_size"] = _pos_int(obj["batch_size"], None, "batch_size")
    if "dropout_p" in obj:
        p = obj["dropout_p"]
        kw["dropout_p"] = tuple(float(v) for v in p) if isinstance(p, list) else float(p)
    for key in ("prune_epsilon", "prune_count_fraction"):
        if key in obj:
            kw[key] = float(obj[key])
    if "enhancement_iterations" in obj:
        kw["enhancement_iterations"] = _pos_int(obj["enhancement_iterations"], None, "enhancement_iterations")
    return Hyperparameters(**kw)


def validate(model: NetworkModel) -> NetworkModel:
    """Check structural invariants; raises ModelError. Returns the model unchanged."""
    layers = model.layers
    if len(model.input_shape) != 3 or any(
        isinstance(d, bool) or not isinstance(d, int) or d < 1 for d in model.input_shape
    ):
        raise ModelError("input_shape must be three positive integers", field="input_shape")
    if not layers or layers[0].kind != "Input":
        raise ModelError("first layer must be Input", 0, "kind")
    if layers[-1].kind != "Output":
        raise ModelError("last layer must be Output", len(layers) - 1, "kind")
    for i, layer in enumerate(layers[1:], start=1):
        if layer.kind == "Input":
            raise ModelError("Input may only appear first", i, "kind")
        if layer.kind == "Output" and i != len(layers) - 1:
            raise ModelError("Output may only appear last", i, "kind")
    for i, layer in enumerate(layers):
        _check_layer(layer, i)

    h = model.hyper
    p = h.dropout_p
    values = p if isinstance(p, tuple) else (p,)
    if isinstance(p, tuple) and len(p) != len(layers):
        raise ModelError(f"needs one value per layer ({len(layers)})", field="dropout_p")
    for v in values:
        if not 0.0 <= v < 1.0:
            raise ModelError(f"keep probability must be positive; got p={v}", field="dropout_p")
    if h.prune_epsilon < 0:
        raise ModelError("must be >= 0", field="prune_epsilon")
    if not 0.0 <= h.prune_count_fraction <= 1.0:
        raise ModelError("must lie in [0, 1]", field="prune_count_fraction")
    if h.learning_rate < 0 or not math.isfinite(h.learning_rate):
        raise ModelError("must be a finite non-negative number", field="learning_rate")

    for i, layer in enumerate(layers):
        if layer.kind != "EnhancementUnit" or layer.feedback_partner is None:
            continue
        k = layer.feedback_partner
        if not i < k < len(layers) or layers[k].kind != "EnhancementUnit":
            raise ModelError("must refer to a later EnhancementUnit", i, "feedback_partner")
        if layers[k].mask_size != layer.mask_size:
            raise ModelError("feedback partners must use the same mask_size", i, "mask_size")

    shapes = shape_infer(model)
    for i, layer in enumerate(layers):
        k = layer.feedback_partner if layer.kind == "EnhancementUnit" else None
        if k is not None and shapes[i][:2] != shapes[k][:2]:
            raise ModelError(
                f"feedback link needs equal height/width, got {shapes[i][:2]} and {shapes[k][:2]}",
                i,
                "feedback_partner",
            )
    return model


def parse_model(text: str, strict: bool = True) -> NetworkModel:
    """Parse and validate a JSON model document."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelError(f"malformed document: {exc}") from exc
    if not isinstance(doc, dict):
        raise ModelError("top level must be an object")
    _check_keys(doc, _TOP_KEYS, strict)
    shape = doc.get("input_shape")
    if not isinstance(shape, list) or len(shape) != 3:
        raise ModelError("input_shape must be [height, width, channels]", field="input_shape")
    raw_layers = doc.get("layers")
    if not isinstance(raw_layers, list):
        raise ModelError("layers must be an array", field="layers")
    layers = tuple(_layer_from_dict(obj, i, strict) for i, obj in enumerate(raw_layers))
    hyper = _hyper_from_dict(doc.get("hyperparameters"), strict)
    name = doc.get("name")
    model = NetworkModel(layers, tuple(shape), hyper, None if name is None else str(name))
    return validate(model)


def load_model(path, strict: bool = True) -> NetworkModel:
    with open(path, encoding="utf-8") as fh:
        return parse_model(fh.read(), strict=strict)


def _layer_to_dict(layer: LayerSpec) -> dict:
    out: dict[str, Any] = {"kind": layer.kind}
    if layer.kind not in ("Input", "EnhancementUnit", "InceptionModule"):
        out["filter_size"] = layer.filter_size
        out["stride"] = layer.stride
        out["padding"] = layer.padding
    if layer.out_channels is not None:
        out["out_channels"] = layer.out_channels
    out["activation"] = layer.activation
    if layer.kind == "InceptionModule":
        out["branches"] = [[_layer_to_dict(b) for b in chain] for chain in layer.branches]
    if layer.kind == "EnhancementUnit":
        out["mask_size"] = layer.mask_size
        out["feedback_partner"] = layer.feedback_partner
        out["use_magnitude"] = layer.use_magnitude
    if layer.name is not None:
        out["name"] = layer.name
    if layer.note is not None:
        out["note"] = layer.note
    return out


def serialize_model(model: NetworkModel) -> str:
    h = model.hyper
    hyper = {
        "learning_rate": h.learning_rate,
        "batch_mode": h.batch_mode,
        "batch_size": h.batch_size,
        "dropout_p": list(h.dropout_p) if isinstance(h.dropout_p, tuple) else h.dropout_p,
        "prune_epsilon": h.prune_epsilon,
        "prune_count_fraction": h.prune_count_fraction,
        "enhancement_iterations": h.enhancement_iterations,
    }
    doc: dict[str, Any] = {}
    if model.name is not None:
        doc["name"] = model.name
    doc["input_shape"] = list(model.input_shape)
    doc["layers"] = [_layer_to_dict(layer) for layer in model.layers]
    doc["hyperparameters"] = hyper
    return json.dumps(doc, indent=2)


# -- shape inference ---------------------------------------------------------


def window_out(size: int, f: int, s: int, padding: str) -> int:
    """Output extent of a sliding window along one axis."""
    if padding == "same":
        return -(-size // s)
    if size < f:
        raise ValueError(f"window {f} larger than input extent {size}")
    return (size - f) // s + 1


def same_padding(size: int, f: int, s: int) -> tuple[int, int]:
    """(before, after) zero padding for 'same' mode; symmetric, extra on the far side."""
    out = -(-size // s)
    total = max((out - 1) * s + f - size, 0)
    return total // 2, total - total // 2


def _spatial(layer: LayerSpec, shape: Shape, index: int) -> Shape:
    h, w, c = shape
    f, s = layer.filter_size, layer.stride
    try:
        ho = window_out(h, f, s, layer.padding)
        wo = window_out(w, f, s, layer.padding)
    except ValueError as exc:
        raise ModelError(f"incompatible shapes: {exc} (input {shape})", index, "filter_size") from exc
    return (ho, wo, layer.out_channels if layer.kind == "Conv" else c)


def infer_layer(layer: LayerSpec, shape: Shape, index: int = 0) -> Shape:
    """Output shape of one layer given its input shape."""
    kind = layer.kind
    if kind in ("Conv", "MaxPool"):
        return _spatial(layer, shape, index)
    if kind in ("FullyConnected", "Output"):
        return (1, 1, layer.out_channels)
    if kind == "EnhancementUnit":
        return shape
    if kind == "InceptionModule":
        outs = []
        for chain in layer.branches:
            s = shape
            for b in chain:
                s = _spatial(b, s, index)
            outs.append(s)
        hw = {o[:2] for o in outs}
        if len(hw) != 1:
            raise ModelError(f"branch outputs disagree on height/width: {sorted(hw)}", index, "branches")
        h, w = outs[0][:2]
        return (h, w, sum(o[2] for o in outs))
    raise ModelError(f"cannot infer shape for kind {kind}", index, "kind")


def shape_infer(model: NetworkModel) -> list[Shape]:
    shapes: list[Shape] = []
    current: Shape = tuple(model.input_shape)
    for i, layer in enumerate(model.layers):
        if layer.kind == "Input":
            current = tuple(model.input_shape)
        else:
            current = infer_layer(layer, current, i)
        shapes.append(current)
    return shapes


def build_model(
    input_shape: Sequence[int],
    layers: Sequence[LayerSpec],
    hyper: Hyperparameters | None = None,
    name: str | None = None,
) -> NetworkModel:
    """Programmatic constructor; prepends Input when missing and validates."""
    layers = tuple(layers)
    if not layers or layers[0].kind != "Input":
        layers = (LayerSpec("Input"),) + layers
    model = NetworkModel(layers, tuple(int(d) for d in input_shape), hyper or Hyperparameters(), name)
    return validate(model)


def conv(out_channels: int, f: int = 3, s: int = 1, padding: str = "same", activation: str = "ReLU", **kw) -> LayerSpec:
    return LayerSpec("Conv", f, s, padding, out_channels, activation, **kw)


def maxpool(f: int = 2, s: int = 2, padding: str = "valid", **kw) -> LayerSpec:
    return LayerSpec("MaxPool", f, s, padding, **kw)


def dense(n: int, activation: str = "ReLU", **kw) -> LayerSpec:
    return LayerSpec("FullyConnected", padding="valid", out_channels=n, activation=activation, **kw)


def output(n: int, activation: str = "Softmax", **kw) -> LayerSpec:
    return LayerSpec("Output", padding="valid", out_channels=n, activation=activation, **kw)


def with_hyper(model: NetworkModel, **changes) -> NetworkModel:
    return validate(replace(model, hyper=replace(model.hyper, **changes)))
