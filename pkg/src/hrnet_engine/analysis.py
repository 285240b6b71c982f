"""Static analysis of built graphs: shapes, parameter counts, FLOPs, reports."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .graph import Graph, Shape, node_elementwise_ops, node_macs, node_output_shape
from .tensor import ShapeError

REPORT_SCHEMA = "hrnet-complexity-report/1"
# headline GFLOPs use binary giga: MAC counts divided by 1024**3
GIGA = 1024 ** 3


def check_input_size(graph: Graph, h: int, w: int) -> None:
    if h < 1 or w < 1:
        raise ShapeError(f"input size must be positive, got {h}x{w}")
    if graph.pad_multiple > 1:
        return
    m = graph.min_multiple
    if h % m or w % m:
        raise ShapeError(f"ladder violation: input {h}x{w} is not divisible by {m}; "
                         f"the four resolutions would not halve exactly")


def infer_shapes(graph: Graph, input_dims: tuple[int, int, int, int] | list[Shape]) -> dict[str, Shape]:
    """Annotate every node with its output dims; fails fast on the first inconsistency."""
    dims_list = [tuple(input_dims)] if isinstance(input_dims[0], int) else [tuple(d) for d in input_dims]
    if len(dims_list) != len(graph.inputs):
        raise ValueError(f"graph has {len(graph.inputs)} inputs, got {len(dims_list)} shapes")
    shapes: dict[str, Shape] = {}
    for name, dims in zip(graph.inputs, dims_list):
        if len(dims) != 4 or min(dims) < 1:
            raise ShapeError(f"input dims must be 4 positive ints, got {dims}")
        want = graph.node(name).attrs["channels"]
        if dims[1] != want:
            raise ShapeError(f"input {name!r} has {dims[1]} channels, graph expects {want}")
        shapes[name] = dims
    if len(graph.inputs) == 1:
        check_input_size(graph, dims_list[0][2], dims_list[0][3])
    for node in graph.nodes:
        if node.kind == "input":
            continue
        shapes[node.name] = node_output_shape(node, [shapes[i] for i in node.inputs])
    return shapes


def module_path(name: str) -> str:
    """Coarse grouping used in reports: stem, stage1..4, fusions, transitions, head, task."""
    parts = name.split(".")
    if ".fuse." in f".{name}." or any(p == "fuse" for p in parts):
        return "fusions"
    if parts[0].startswith("transition") or any(p == "transition" for p in parts):
        return "transitions"
    if parts[0] in ("pad", "pyramid"):
        return "head"
    return parts[0]


@dataclass
class Row:
    name: str
    kind: str
    shape: Shape | None
    params: int
    flops: int
    elementwise: int

    @property
    def group(self) -> str:
        return module_path(self.name)


@dataclass
class ComplexityReport:
    rows: list[Row]
    input_dims: tuple[int, ...] | None
    config_digest: str = ""
    label: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_flops(self) -> int:
        return sum(r.flops for r in self.rows)

    @property
    def total_elementwise(self) -> int:
        return sum(r.elementwise for r in self.rows)

    @property
    def gflops(self) -> float:
        return self.total_flops / GIGA

    def by_group(self) -> dict[str, dict[str, int]]:
        groups: dict[str, dict[str, int]] = {}
        for r in self.rows:
            g = groups.setdefault(r.group, {"params": 0, "flops": 0, "elementwise": 0, "nodes": 0})
            g["params"] += r.params
            g["flops"] += r.flops
            g["elementwise"] += r.elementwise
            g["nodes"] += 1
        return dict(sorted(groups.items()))

    def to_dict(self, rows: bool = True) -> dict:
        d = {
            "schema": REPORT_SCHEMA,
            "label": self.label,
            "config_digest": self.config_digest,
            "input_dims": list(self.input_dims) if self.input_dims else None,
            "totals": {
                "params": self.total_params,
                "flops": self.total_flops,
                "gflops": round(self.gflops, 6),
                "gflops_decimal": round(self.total_flops / 1e9, 6),
                "elementwise_ops": self.total_elementwise,
                "nodes": len(self.rows),
            },
            "groups": self.by_group(),
        }
        d.update(self.extra)
        if rows:
            d["rows"] = [
                {"name": r.name, "kind": r.kind, "shape": list(r.shape) if r.shape else None,
                 "params": r.params, "flops": r.flops, "elementwise": r.elementwise}
                for r in self.rows
            ]
        return d

    def to_json(self, rows: bool = True) -> str:
        return json.dumps(self.to_dict(rows), indent=2, sort_keys=False)

    def to_text(self, rows: bool = False) -> str:
        lines = []
        size = "x".join(str(d) for d in self.input_dims) if self.input_dims else "-"
        lines.append(f"# {self.label or 'model'}  config={self.config_digest}  input={size}")
        if rows:
            lines.append(f"{'node':<48} {'kind':<8} {'shape':<22} {'params':>12} {'MACs':>16}")
            for r in self.rows:
                shape = "x".join(map(str, r.shape)) if r.shape else "-"
                lines.append(f"{r.name:<48} {r.kind:<8} {shape:<22} {r.params:>12,} {r.flops:>16,}")
            lines.append("")
        lines.append(f"{'group':<16} {'nodes':>6} {'params':>14} {'GFLOPs':>10} {'elementwise':>14}")
        for g, v in self.by_group().items():
            lines.append(f"{g:<16} {v['nodes']:>6} {v['params']:>14,} {v['flops'] / GIGA:>10.3f} {v['elementwise']:>14,}")
        lines.append(f"{'total':<16} {len(self.rows):>6} {self.total_params:>14,} {self.gflops:>10.3f} "
                     f"{self.total_elementwise:>14,}")
        lines.append(f"params={self.total_params / 1e6:.2f}M  GFLOPs={self.gflops:.2f}")
        return "\n".join(lines)


def count_params(graph: Graph, label: str = "", digest: str = "") -> ComplexityReport:
    rows = [Row(n.name, n.kind, None, n.num_params, 0, 0) for n in graph.nodes]
    return ComplexityReport(rows, None, digest, label)


def count_flops(graph: Graph, input_dims, label: str = "", digest: str = "") -> ComplexityReport:
    """Multiply-accumulates of conv and linear layers (1 MAC = 1 FLOP) plus an elementwise column."""
    shapes = infer_shapes(graph, input_dims)
    rows = []
    for n in graph.nodes:
        out = shapes[n.name]
        ins = [shapes[i] for i in n.inputs]
        rows.append(Row(n.name, n.kind, out, n.num_params, node_macs(n, out),
                        node_elementwise_ops(n, ins, out) if ins else 0))
    dims = tuple(input_dims) if isinstance(input_dims[0], int) else None
    return ComplexityReport(rows, dims, digest, label)


@dataclass
class ReportDiff:
    groups: dict[str, dict[str, int]]
    params_delta: int
    flops_delta: int
    # nodes present on both sides whose output shape differs
    shape_changes: list[tuple[str, Shape | None, Shape | None]]
    added: list[str]
    removed: list[str]

    @property
    def structurally_equal(self) -> bool:
        return self.params_delta == 0 and not self.shape_changes

    def to_text(self) -> str:
        lines = [f"{'group':<16} {'params delta':>14} {'MACs delta':>16}"]
        for g, v in self.groups.items():
            lines.append(f"{g:<16} {v['params']:>+14,} {v['flops']:>+16,}")
        lines.append(f"{'total':<16} {self.params_delta:>+14,} {self.flops_delta:>+16,}")
        lines.append(f"shape changes: {len(self.shape_changes)}  nodes added: {len(self.added)}  "
                     f"removed: {len(self.removed)}")
        for name, sa, sb in self.shape_changes[:20]:
            lines.append(f"  {name}: {sa} -> {sb}")
        return "\n".join(lines)


def compare_reports(a: ComplexityReport, b: ComplexityReport) -> ReportDiff:
    """Per-group deltas ``b - a``; shapes are compared on the nodes both graphs share."""
    ga, gb = a.by_group(), b.by_group()
    zero = {"params": 0, "flops": 0}
    groups = {}
    for g in sorted(set(ga) | set(gb)):
        x, y = ga.get(g, zero), gb.get(g, zero)
        groups[g] = {"params": y["params"] - x["params"], "flops": y["flops"] - x["flops"]}
    sa = {r.name: r.shape for r in a.rows}
    sb = {r.name: r.shape for r in b.rows}
    changes = [(n, sa[n], sb[n]) for n in sorted(set(sa) & set(sb)) if sa[n] != sb[n]]
    added = sorted(set(sb) - set(sa))
    removed = sorted(set(sa) - set(sb))
    return ReportDiff(groups, b.total_params - a.total_params, b.total_flops - a.total_flops,
                      changes, added, removed)


def output_shapes(graph: Graph, input_dims) -> list[Shape]:
    shapes = infer_shapes(graph, input_dims)
    return [shapes[o] for o in graph.outputs]
