"""Immutable layer graph, static shape rules and numerical execution."""

from __future__ import annotations

import math
from functools import cached_property
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Any, Mapping

import numpy as np

from . import ops
from .tensor import ShapeError, Tensor

Shape = tuple[int, int, int, int]


@dataclass(frozen=True)
class LayerNode:
    name: str
    kind: str
    inputs: tuple[str, ...]
    attrs: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "attrs", MappingProxyType(dict(self.attrs)))

    @property
    def group(self) -> str:
        return self.name.split(".", 1)[0]

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        a = self.attrs
        if self.kind == "conv":
            shapes = {f"{self.name}.weight": (a["out_channels"], a["in_channels"], a["kernel"], a["kernel"])}
            if a.get("bias"):
                shapes[f"{self.name}.bias"] = (a["out_channels"],)
            return shapes
        if self.kind == "bn":
            return {f"{self.name}.gamma": (a["channels"],), f"{self.name}.beta": (a["channels"],)}
        if self.kind == "linear":
            shapes = {f"{self.name}.weight": (a["out_features"], a["in_features"])}
            if a.get("bias", True):
                shapes[f"{self.name}.bias"] = (a["out_features"],)
            return shapes
        return {}

    @property
    def num_params(self) -> int:
        return sum(math.prod(s) for s in self.param_shapes().values())

    def conv_spec(self) -> ops.ConvSpec:
        a = self.attrs
        return ops.ConvSpec(a["in_channels"], a["out_channels"], a["kernel"], a["stride"], bool(a.get("bias")))


@dataclass(frozen=True)
class Graph:
    nodes: tuple[LayerNode, ...]
    inputs: tuple[str, ...]
    outputs: tuple[str, ...]
    # structural metadata recorded by the builder (fusion units, blocks, ...)
    modules: tuple[Mapping[str, Any], ...] = ()
    pad_multiple: int = 1
    min_multiple: int = 32

    def __post_init__(self):
        seen = set()
        for node in self.nodes:
            if node.name in seen:
                raise ValueError(f"duplicate node name {node.name!r}")
            for src in node.inputs:
                if src not in seen:
                    raise ValueError(f"node {node.name!r} consumes {src!r} before it is defined")
            seen.add(node.name)
        for out in self.outputs:
            if out not in seen:
                raise ValueError(f"unknown output {out!r}")

    @property
    def input_name(self) -> str:
        return self.inputs[0]

    def node(self, name: str) -> LayerNode:
        return self._index[name]

    @cached_property
    def _index(self) -> dict[str, LayerNode]:
        return {n.name: n for n in self.nodes}

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        out: dict[str, tuple[int, ...]] = {}
        for node in self.nodes:
            out.update(node.param_shapes())
        return out

    def count(self, kind: str) -> int:
        return sum(1 for m in self.modules if m["kind"] == kind)

    def modules_of(self, kind: str) -> list[Mapping[str, Any]]:
        return [m for m in self.modules if m["kind"] == kind]


class GraphBuilder:
    """Mutable staging area; :meth:`finish` freezes it into a :class:`Graph`."""

    def __init__(self, input_channels: int | list[int] = 3, input_name: str = "input"):
        widths = [input_channels] if isinstance(input_channels, int) else list(input_channels)
        self.inputs = [input_name] if len(widths) == 1 else [f"{input_name}{i + 1}" for i in range(len(widths))]
        self.nodes: list[LayerNode] = [LayerNode(n, "input", (), {"channels": c}) for n, c in zip(self.inputs, widths)]
        self.channels: dict[str, int] = dict(zip(self.inputs, widths))
        self.modules: list[dict[str, Any]] = []

    def add(self, name: str, kind: str, inputs, width: int, **attrs) -> str:
        inputs = (inputs,) if isinstance(inputs, str) else tuple(inputs)
        self.nodes.append(LayerNode(name, kind, inputs, attrs))
        self.channels[name] = width
        return name

    def conv(self, name, src, out_ch, kernel=3, stride=1, bias=False) -> str:
        in_ch = self.channels[src]
        return self.add(name, "conv", src, out_ch, in_channels=in_ch, out_channels=out_ch,
                        kernel=kernel, stride=stride, bias=bias)

    def bn(self, name, src) -> str:
        return self.add(name, "bn", src, self.channels[src], channels=self.channels[src])

    def relu(self, name, src) -> str:
        return self.add(name, "relu", src, self.channels[src])

    def conv_bn(self, prefix, src, out_ch, kernel=3, stride=1, act=True) -> str:
        y = self.conv(f"{prefix}.conv", src, out_ch, kernel, stride)
        y = self.bn(f"{prefix}.bn", y)
        return self.relu(f"{prefix}.relu", y) if act else y

    def module(self, kind: str, path: str, **info) -> None:
        self.modules.append({"kind": kind, "path": path, **info})

    def finish(self, outputs, pad_multiple: int = 1, min_multiple: int = 32, prune: bool = True) -> Graph:
        outputs = tuple(outputs)
        nodes = self.nodes
        if prune:
            index = {n.name: n for n in nodes}
            live = set(self.inputs)
            stack = list(outputs)
            while stack:
                name = stack.pop()
                if name in live:
                    continue
                live.add(name)
                stack.extend(index[name].inputs)
            nodes = [n for n in nodes if n.name in live]
            live_modules = []
            for m in self.modules:
                kept = [n for n in m.get("nodes", ()) if n in live]
                if m.get("nodes") and not kept:
                    continue
                live_modules.append({**m, "nodes": tuple(kept)} if "nodes" in m else m)
            modules = live_modules
        else:
            modules = self.modules
        return Graph(tuple(nodes), tuple(self.inputs), outputs, tuple(MappingProxyType(m) for m in modules),
                     pad_multiple, min_multiple)


def node_output_shape(node: LayerNode, in_shapes: list[Shape]) -> Shape:
    """Static shape rule for one node; raises ShapeError naming the node on any violation."""
    a, k = node.attrs, node.kind
    try:
        if k == "input":
            raise AssertionError("input shapes are supplied externally")
        x = in_shapes[0]
        if k == "conv":
            if x[1] != a["in_channels"]:
                raise ShapeError(f"expects {a['in_channels']} input channels, got {x[1]}")
            ho, wo = node.conv_spec().output_size(x[2], x[3])
            if ho < 1 or wo < 1:
                raise ShapeError(f"spatial size {x[2]}x{x[3]} too small")
            return (x[0], a["out_channels"], ho, wo)
        if k == "bn":
            if x[1] != a["channels"]:
                raise ShapeError(f"expects {a['channels']} channels, got {x[1]}")
            return x
        if k in ("relu", "identity"):
            return x
        if k in ("sum", "mul"):
            for i, s in enumerate(in_shapes[1:], 1):
                if s != x:
                    raise ShapeError(f"ladder violation: operand {i} ({node.inputs[i]}) has shape {s}, "
                                     f"operand 0 ({node.inputs[0]}) has {x}")
            return x
        if k == "concat":
            for i, s in enumerate(in_shapes):
                if (s[0], s[2], s[3]) != (x[0], x[2], x[3]):
                    raise ShapeError(f"ladder violation: operand {i} has spatial dims {s[2:]}, expected {x[2:]}")
            return (x[0], sum(s[1] for s in in_shapes), x[2], x[3])
        if k == "resize":
            if "like" in a:
                ref = in_shapes[1]
                return (x[0], x[1], ref[2], ref[3])
            f = a["factor"]
            if f >= 1:
                return (x[0], x[1], x[2] * int(f), x[3] * int(f))
            d = int(round(1 / f))
            if x[2] % d or x[3] % d:
                raise ShapeError(f"ladder violation: {x[2]}x{x[3]} not divisible by {d}")
            return (x[0], x[1], x[2] // d, x[3] // d)
        if k == "avgpool":
            ceil = a.get("ceil", False)
            h = ops._pool_windows(x[2], a["kernel"], a["stride"], ceil)
            w = ops._pool_windows(x[3], a["kernel"], a["stride"], ceil)
            if h < 1 or w < 1:
                raise ShapeError(f"input {x[2]}x{x[3]} too small to pool")
            return (x[0], x[1], h, w)
        if k == "maxpool":
            return (x[0], x[1], (x[2] - a["kernel"]) // a["stride"] + 1, (x[3] - a["kernel"]) // a["stride"] + 1)
        if k == "gap":
            return (x[0], x[1], 1, 1)
        if k == "flatten":
            return (x[0], x[1] * x[2] * x[3], 1, 1)
        if k == "linear":
            if x[1] * x[2] * x[3] != a["in_features"]:
                raise ShapeError(f"expects {a['in_features']} features, got {x[1] * x[2] * x[3]}")
            return (x[0], a["out_features"], 1, 1)
        if k == "chpad":
            if a["channels"] < x[1]:
                raise ShapeError(f"cannot pad {x[1]} channels down to {a['channels']}")
            return (x[0], a["channels"], x[2], x[3])
        if k == "pad":
            m = a["multiple"]
            return (x[0], x[1], x[2] + (-x[2] % m), x[3] + (-x[3] % m))
    except ShapeError as err:
        raise ShapeError(f"node {node.name!r} ({k}): {err}") from None
    raise ValueError(f"unknown node kind {k!r}")


def node_elementwise_ops(node: LayerNode, in_shapes: list[Shape], out: Shape) -> int:
    """Non-MAC arithmetic, reported in a secondary column."""
    n_out = math.prod(out)
    k = node.kind
    if k in ("bn", "relu"):
        return n_out
    if k in ("sum", "mul"):
        return n_out * (len(in_shapes) - 1)
    if k == "resize":
        return n_out if in_shapes[0] != out else 0
    if k in ("avgpool", "maxpool", "gap"):
        return math.prod(in_shapes[0])
    return 0


def node_macs(node: LayerNode, out: Shape) -> int:
    a = node.attrs
    if node.kind == "conv":
        return a["kernel"] ** 2 * a["in_channels"] * a["out_channels"] * out[0] * out[2] * out[3]
    if node.kind == "linear":
        return a["in_features"] * a["out_features"] * out[0]
    return 0


# ---------------------------------------------------------------------------
# parameters and execution


def init_params(graph: Graph, seed: int = 0) -> tuple[dict[str, Tensor], dict[str, np.ndarray]]:
    """He-uniform (fan-in) conv/linear weights, unit gamma, zero beta and biases.

    Parameters are drawn in node order from one seeded generator, so identical
    graphs and seeds give bit-identical parameters.
    """
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    buffers: dict[str, np.ndarray] = {}
    for node in graph.nodes:
        for pname, shape in node.param_shapes().items():
            suffix = pname.rsplit(".", 1)[1]
            if suffix == "weight":
                fan_in = math.prod(shape[1:])
                bound = math.sqrt(6.0 / fan_in)
                data = rng.uniform(-bound, bound, size=shape)
            elif suffix == "gamma":
                data = np.ones(shape)
            else:
                data = np.zeros(shape)
            params[pname] = Tensor(data, name=pname, requires_grad=True)
        if node.kind == "bn":
            c = node.attrs["channels"]
            buffers[f"{node.name}.running_mean"] = np.zeros(c)
            buffers[f"{node.name}.running_var"] = np.ones(c)
    return params, buffers


def execute(graph: Graph, params: Mapping[str, Tensor], buffers: Mapping[str, np.ndarray],
            *xs: Tensor, training: bool = False) -> list[Tensor]:
    """Run the graph forward. In training mode BN uses batch statistics and updates ``buffers``."""
    if len(xs) != len(graph.inputs):
        raise ValueError(f"graph takes {len(graph.inputs)} inputs, got {len(xs)}")
    values: dict[str, Tensor] = {}
    for name, x in zip(graph.inputs, xs):
        want = graph.node(name).attrs["channels"]
        if x.ndim != 4 or x.shape[1] != want:
            raise ShapeError(f"input {name!r} has shape {x.shape}, graph expects {want} channels")
        values[name] = x
    for node in graph.nodes:
        if node.kind == "input":
            continue
        args = [values[i] for i in node.inputs]
        values[node.name] = _run_node(node, args, params, buffers, training)
    return [values[o] for o in graph.outputs]


def _run_node(node, args, params, buffers, training) -> Tensor:
    k, a, name = node.kind, node.attrs, node.name
    if k == "conv":
        return ops.conv2d(args[0], node.conv_spec(), params[f"{name}.weight"], params.get(f"{name}.bias"))
    if k == "bn":
        state = ops.BatchNormState(params[f"{name}.gamma"], params[f"{name}.beta"],
                                   buffers[f"{name}.running_mean"], buffers[f"{name}.running_var"],
                                   training=training)
        return ops.batch_norm(args[0], state)
    if k == "relu":
        return ops.relu(args[0])
    if k == "identity":
        return args[0]
    if k == "sum":
        return ops.sum_n(args)
    if k == "mul":
        return ops.mul_n(args)
    if k == "concat":
        return ops.concat_channels(args)
    if k == "resize":
        x = args[0]
        if "like" in a:
            h, w = args[1].shape[2], args[1].shape[3]
        elif a["factor"] >= 1:
            h, w = x.shape[2] * int(a["factor"]), x.shape[3] * int(a["factor"])
        else:
            d = int(round(1 / a["factor"]))
            h, w = x.shape[2] // d, x.shape[3] // d
        return ops.bilinear_resize(x, h, w)
    if k == "avgpool":
        return ops.avg_pool(args[0], a["kernel"], a["stride"], a.get("ceil", False))
    if k == "maxpool":
        return ops.max_pool(args[0], a["kernel"], a["stride"])
    if k == "gap":
        return ops.avg_pool_global(args[0])
    if k == "flatten":
        return ops.flatten(args[0])
    if k == "linear":
        x = args[0] if args[0].ndim == 2 else ops.flatten(args[0])
        return ops.linear(x, params[f"{name}.weight"], params.get(f"{name}.bias"))
    if k == "pad":
        return ops.pad_to_multiple(args[0], a["multiple"])
    if k == "chpad":
        return ops.pad_channels(args[0], a["channels"])
    raise ValueError(f"unknown node kind {k!r}")
