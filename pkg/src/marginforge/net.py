"""Dense/ReLU classifier stacks with per-layer activation capture.

A forward pass records the whole computation on a fresh Graph and keeps the
node ids of the input, every post-ReLU activation, and the logits, so
gradients of any class score with respect to any captured layer can be pulled
out of the same trace.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Graph, NodeId, backward

CHECKPOINT_FORMAT = "marginforge-checkpoint-v1"


class ModelError(Exception):
    """Inconsistent layer specs or parameter payloads."""


@dataclass(frozen=True)
class Dense:
    in_dim: int
    out_dim: int
    has_bias: bool = True


@dataclass(frozen=True)
class Relu:
    pass


LayerSpec = Dense | Relu


@dataclass
class Model:
    layers: list[LayerSpec]
    params: dict[str, np.ndarray]
    n_classes: int
    seed: int

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def n_captured_layers(self) -> int:
        """Input + each post-ReLU activation + logits."""
        return 2 + sum(1 for l in self.layers[:-1] if isinstance(l, Relu))


@dataclass
class ForwardTrace:
    graph: Graph
    layer_nodes: list[NodeId]   # h0 = input, post-ReLU activations, logits
    logits_node: NodeId
    logits_value: np.ndarray    # [batch, n_classes]
    param_nodes: dict[str, NodeId] = field(default_factory=dict)

    @property
    def batch_size(self) -> int:
        return self.logits_value.shape[0]


def _validate_layers(layer_specs: list[LayerSpec], n_classes: int) -> None:
    if not layer_specs or not isinstance(layer_specs[0], Dense):
        raise ModelError("first layer must be dense")
    if not isinstance(layer_specs[-1], Dense):
        raise ModelError("final layer must be dense")
    if n_classes < 2:
        raise ModelError(f"n_classes must be >= 2, got {n_classes}")
    if layer_specs[-1].out_dim != n_classes:
        raise ModelError(
            f"final dense out_dim {layer_specs[-1].out_dim} != n_classes {n_classes}")
    width = layer_specs[0].in_dim
    for spec in layer_specs:
        if isinstance(spec, Dense):
            if spec.in_dim != width:
                raise ModelError(f"dense in_dim {spec.in_dim} does not chain from {width}")
            if spec.in_dim < 1 or spec.out_dim < 1:
                raise ModelError(f"dense dims must be positive: {spec}")
            width = spec.out_dim


def init_model(layer_specs: list[LayerSpec], n_classes: int, seed: int) -> Model:
    """He-uniform weights (bound sqrt(6/in_dim)), zero biases, seed-determined."""
    _validate_layers(layer_specs, n_classes)
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for li, spec in enumerate(layer_specs):
        if isinstance(spec, Dense):
            bound = np.sqrt(6.0 / spec.in_dim)
            params[f"W{li}"] = rng.uniform(-bound, bound, size=(spec.in_dim, spec.out_dim))
            if spec.has_bias:
                params[f"b{li}"] = np.zeros(spec.out_dim)
    return Model(list(layer_specs), params, n_classes, seed)


def model_from_dims(dims: list[int], seed: int, has_bias: bool = True) -> Model:
    """Dense stack with ReLU between consecutive layers; dims[-1] = n_classes."""
    if len(dims) < 2:
        raise ModelError(f"need at least [in, out] dims, got {dims}")
    layers: list[LayerSpec] = []
    for i in range(len(dims) - 1):
        if i > 0:
            layers.append(Relu())
        layers.append(Dense(dims[i], dims[i + 1], has_bias))
    return init_model(layers, dims[-1], seed)


def forward(model: Model, x: np.ndarray) -> ForwardTrace:
    """Record the forward pass of a [batch, d] input on a fresh graph."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ModelError(f"input shape {x.shape} does not match input dim {model.input_dim}")
    g = Graph()
    h = g.input(x)
    captured = [h]
    param_nodes: dict[str, NodeId] = {}
    for li, spec in enumerate(model.layers):
        if isinstance(spec, Dense):
            w = g.parameter(model.params[f"W{li}"])
            param_nodes[f"W{li}"] = w
            h = g.matmul(h, w)
            if spec.has_bias:
                b = g.parameter(model.params[f"b{li}"])
                param_nodes[f"b{li}"] = b
                h = g.add(h, b)
        else:
            h = g.relu(h)
            if li != len(model.layers) - 1:
                captured.append(h)
    captured.append(h)  # logits
    return ForwardTrace(g, captured, h, g.value(h), param_nodes)


def predict(trace: ForwardTrace) -> np.ndarray:
    """Per-row argmax of logits; ties go to the lowest class index."""
    return np.argmax(trace.logits_value, axis=1)


def logit_grad_wrt_layer(trace: ForwardTrace, class_i: int, layer: int, sample: int) -> np.ndarray:
    """Gradient of the scalar f_i(x_b) w.r.t. captured layer `layer` of sample b."""
    batch, n_classes = trace.logits_value.shape
    if not 0 <= class_i < n_classes:
        raise ModelError(f"class {class_i} out of range for {n_classes} classes")
    if not 0 <= layer < len(trace.layer_nodes):
        raise ModelError(f"layer {layer} not captured (have {len(trace.layer_nodes)})")
    if not 0 <= sample < batch:
        raise ModelError(f"sample {sample} out of range for batch {batch}")
    g = trace.graph
    target = trace.layer_nodes[layer]
    scalar = g.select(trace.logits_node, [sample], [class_i])
    seed = g.reduce_sum(scalar)
    grads = backward(g, seed, wrt=[target])
    full = grads.get(target)
    width = g.value(target).shape[1]
    if full is None:
        return np.zeros(width)
    return full[sample]


def class_layer_grads(trace: ForwardTrace, class_i: int, layers: list[int]) -> dict[int, np.ndarray]:
    """Per-sample gradients of f_i w.r.t. each requested layer, one backward pass.

    Row b of the result for layer l is the gradient of f_i(x_b) w.r.t. that
    sample's activation; valid because the forward ops are row-independent.
    """
    batch = trace.batch_size
    g = trace.graph
    targets = [trace.layer_nodes[l] for l in layers]
    col = g.select(trace.logits_node, np.arange(batch), np.full(batch, class_i))
    seed = g.reduce_sum(col)
    grads = backward(g, seed, wrt=targets)
    out = {}
    for l, t in zip(layers, targets):
        got = grads.get(t)
        out[l] = got if got is not None else np.zeros_like(g.value(t))
    return out


# -- checkpoints -----------------------------------------------------------


def _layer_specs_json(layers: list[LayerSpec]) -> list:
    out = []
    for spec in layers:
        if isinstance(spec, Dense):
            out.append(["dense", spec.in_dim, spec.out_dim, spec.has_bias])
        else:
            out.append(["relu"])
    return out


def _layer_specs_from_json(raw: list) -> list[LayerSpec]:
    out: list[LayerSpec] = []
    for item in raw:
        if item[0] == "dense":
            out.append(Dense(int(item[1]), int(item[2]), bool(item[3])))
        elif item[0] == "relu":
            out.append(Relu())
        else:
            raise ModelError(f"unknown layer kind in checkpoint: {item[0]!r}")
    return out


def save_model(model: Model, path) -> None:
    """JSON header line + flat little-endian float64 payload, layer order, row-major."""
    header = {
        "format": CHECKPOINT_FORMAT,
        "layers": _layer_specs_json(model.layers),
        "n_classes": model.n_classes,
        "seed": model.seed,
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for li, spec in enumerate(model.layers):
            if isinstance(spec, Dense):
                f.write(np.ascontiguousarray(model.params[f"W{li}"], dtype="<f8").tobytes())
                if spec.has_bias:
                    f.write(np.ascontiguousarray(model.params[f"b{li}"], dtype="<f8").tobytes())


def load_model(path) -> Model:
    with open(path, "rb") as f:
        header_line = f.readline()
        try:
            header = json.loads(header_line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise ModelError(f"{path}: bad checkpoint header: {e}") from None
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ModelError(f"{path}: not a {CHECKPOINT_FORMAT} file")
        layers = _layer_specs_from_json(header["layers"])
        payload = f.read()
    params: dict[str, np.ndarray] = {}
    offset = 0
    for li, spec in enumerate(layers):
        if not isinstance(spec, Dense):
            continue
        for name, shape in [(f"W{li}", (spec.in_dim, spec.out_dim))] + (
                [(f"b{li}", (spec.out_dim,))] if spec.has_bias else []):
            n = int(np.prod(shape))
            chunk = payload[offset:offset + 8 * n]
            if len(chunk) != 8 * n:
                raise ModelError(f"{path}: truncated payload at byte {offset} reading {name}")
            params[name] = np.frombuffer(chunk, dtype="<f8").reshape(shape).copy()
            offset += 8 * n
    if offset != len(payload):
        raise ModelError(f"{path}: {len(payload) - offset} trailing payload bytes")
    return Model(layers, params, int(header["n_classes"]), int(header["seed"]))
