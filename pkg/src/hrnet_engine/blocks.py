"""Residual units, the multi-resolution fusion unit and the modularized block.

Units are frozen descriptions. ``emit`` writes their layers into a
:class:`~hrnet_engine.graph.GraphBuilder`; the ``*_forward`` helpers build a
standalone graph for one unit and run it, which is what the tests poke at.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Mapping

import numpy as np

from .graph import GraphBuilder, Graph, execute
from .tensor import ShapeError, Tensor

Combine = Literal["sum", "multiply"]
Downsample = Literal["strided-conv", "bilinear"]
UpsampleOrder = Literal["conv-first", "resize-first"]


@dataclass(frozen=True)
class BasicResidualUnit:
    width: int

    @property
    def in_channels(self) -> int:
        return self.width

    @property
    def out_channels(self) -> int:
        return self.width

    @property
    def num_params(self) -> int:
        return 2 * 9 * self.width ** 2 + 2 * 2 * self.width

    def emit(self, b: GraphBuilder, prefix: str, src: str) -> str:
        if b.channels[src] != self.width:
            raise ShapeError(f"{prefix}: input has {b.channels[src]} channels, unit width is {self.width}")
        y = b.conv_bn(f"{prefix}.a", src, self.width)
        y = b.conv_bn(f"{prefix}.b", y, self.width, act=False)
        y = b.add(f"{prefix}.add", "sum", (y, src), self.width)
        return b.relu(f"{prefix}.out", y)


@dataclass(frozen=True)
class BottleneckUnit:
    in_channels: int
    width: int
    stride: int = 1
    expansion: int = 4

    @property
    def out_channels(self) -> int:
        return self.expansion * self.width

    @property
    def has_projection(self) -> bool:
        return self.stride != 1 or self.in_channels != self.out_channels

    @property
    def num_params(self) -> int:
        w, o = self.width, self.out_channels
        n = self.in_channels * w + 9 * w * w + w * o + 2 * (w + w + o)
        if self.has_projection:
            n += self.in_channels * o + 2 * o
        return n

    def emit(self, b: GraphBuilder, prefix: str, src: str) -> str:
        if b.channels[src] != self.in_channels:
            raise ShapeError(f"{prefix}: input has {b.channels[src]} channels, unit expects {self.in_channels}")
        y = b.conv_bn(f"{prefix}.a", src, self.width, kernel=1)
        y = b.conv_bn(f"{prefix}.b", y, self.width, stride=self.stride)
        y = b.conv_bn(f"{prefix}.c", y, self.out_channels, kernel=1, act=False)
        short = src
        if self.has_projection:
            short = b.conv_bn(f"{prefix}.proj", src, self.out_channels, kernel=1, stride=self.stride, act=False)
        y = b.add(f"{prefix}.add", "sum", (y, short), self.out_channels)
        return b.relu(f"{prefix}.out", y)


@dataclass(frozen=True)
class FusionPath:
    src: int  # input resolution index x (1-based)
    dst: int  # output resolution index r
    in_width: int
    out_width: int

    @property
    def kind(self) -> str:
        if self.src == self.dst:
            return "identity"
        return "down" if self.src < self.dst else "up"

    @property
    def gap(self) -> int:
        return abs(self.dst - self.src)


@dataclass(frozen=True)
class FusionUnit:
    in_widths: tuple[int, ...]
    out_widths: tuple[int, ...]
    paths: tuple[FusionPath, ...]
    combine: Combine = "sum"
    downsample_kind: Downsample = "strided-conv"
    upsample_order: UpsampleOrder = "conv-first"

    @property
    def num_inputs(self) -> int:
        return len(self.in_widths)

    @property
    def num_outputs(self) -> int:
        return len(self.out_widths)

    def paths_to(self, r: int) -> list[FusionPath]:
        return [p for p in self.paths if p.dst == r]

    def path(self, x: int, r: int) -> FusionPath:
        for p in self.paths:
            if (p.src, p.dst) == (x, r):
                return p
        raise KeyError((x, r))

    def num_strided_convs(self, x: int, r: int) -> int:
        p = self.path(x, r)
        return p.gap if p.kind == "down" and self.downsample_kind == "strided-conv" else 0

    def emit(self, b: GraphBuilder, prefix: str, srcs: list[str], outputs: list[int] | None = None) -> list[str]:
        """Emit the unit; ``outputs`` restricts which resolutions are produced (all by default)."""
        if len(srcs) != self.num_inputs:
            raise ShapeError(f"{prefix}: expected {self.num_inputs} inputs, got {len(srcs)}")
        for i, (s, w) in enumerate(zip(srcs, self.in_widths)):
            if b.channels[s] != w:
                raise ShapeError(f"{prefix}: input {i + 1} has {b.channels[s]} channels, expected {w}")
        wanted = range(1, self.num_outputs + 1) if outputs is None else outputs
        outs = []
        for r in wanted:
            terms = [self._emit_path(b, f"{prefix}.p{p.src}{p.dst}", srcs[p.src - 1], p) for p in self.paths_to(r)]
            width = self.out_widths[r - 1]
            if len(terms) == 1:
                y = terms[0]
            else:
                y = b.add(f"{prefix}.out{r}.combine", "sum" if self.combine == "sum" else "mul", terms, width)
            outs.append(b.relu(f"{prefix}.out{r}.relu", y))
        return outs

    def _emit_path(self, b: GraphBuilder, prefix: str, src: str, p: FusionPath) -> str:
        if p.kind == "identity":
            return src
        if p.kind == "up":
            factor = 2 ** p.gap
            if self.upsample_order == "conv-first":
                y = b.conv_bn(prefix, src, p.out_width, kernel=1, act=False)
                return b.add(f"{prefix}.up", "resize", y, p.out_width, factor=factor)
            y = b.add(f"{prefix}.up", "resize", src, p.in_width, factor=factor)
            return b.conv_bn(prefix, y, p.out_width, kernel=1, act=False)
        if self.downsample_kind == "bilinear":
            # parameter-free: shrink spatially, then zero-fill the extra channels
            y = b.add(f"{prefix}.down", "resize", src, p.in_width, factor=1.0 / 2 ** p.gap)
            if p.out_width == p.in_width:
                return y
            if p.out_width < p.in_width:
                raise ShapeError(f"{prefix}: bilinear downsampling cannot narrow {p.in_width} -> {p.out_width}")
            return b.add(f"{prefix}.chpad", "chpad", y, p.out_width, channels=p.out_width)
        y = src
        for k in range(p.gap):
            last = k == p.gap - 1
            y = b.conv_bn(f"{prefix}.s{k}", y, p.out_width if last else p.in_width, stride=2, act=not last)
        return y


def build_fusion(in_widths, add_lower: bool = False, combine: Combine = "sum",
                 downsample_kind: Downsample = "strided-conv", upsample_order: UpsampleOrder = "conv-first",
                 light_transition: bool = False, out_widths=None) -> FusionUnit:
    """Fusion over ``len(in_widths)`` resolutions; ``add_lower`` appends a half-resolution output.

    The extra output is twice as wide as the lowest input. With ``light_transition`` it is
    fed by the lowest-resolution input only, otherwise by every input.
    """
    in_widths = tuple(int(w) for w in in_widths)
    if not in_widths:
        raise ValueError("build_fusion needs at least one input resolution")
    if combine not in ("sum", "multiply"):
        raise ValueError(f"unknown combine {combine!r}")
    if downsample_kind not in ("strided-conv", "bilinear"):
        raise ValueError(f"unknown downsample kind {downsample_kind!r}")
    if upsample_order not in ("conv-first", "resize-first"):
        raise ValueError(f"unknown upsample order {upsample_order!r}")
    n = len(in_widths)
    outs = tuple(in_widths) if out_widths is None else tuple(out_widths)
    if len(outs) != n:
        raise ValueError("out_widths must match the number of inputs")
    if add_lower:
        outs = outs + (2 * in_widths[-1],)
    paths = []
    for r in range(1, len(outs) + 1):
        sources = [n] if (r > n and light_transition) else range(1, n + 1)
        for x in sources:
            paths.append(FusionPath(x, r, in_widths[x - 1], outs[r - 1]))
    return FusionUnit(in_widths, outs, tuple(paths), combine, downsample_kind, upsample_order)


@dataclass(frozen=True)
class ModularizedBlock:
    widths: tuple[int, ...]
    units_per_branch: int = 4
    fusion: FusionUnit | None = None

    @property
    def num_branches(self) -> int:
        return len(self.widths)

    def emit(self, b: GraphBuilder, prefix: str, srcs: list[str], outputs: list[int] | None = None) -> list[str]:
        if len(srcs) != self.num_branches:
            raise ShapeError(f"{prefix}: expected {self.num_branches} branches, got {len(srcs)}")
        ys = []
        for r, (src, w) in enumerate(zip(srcs, self.widths), 1):
            y = src
            for u in range(self.units_per_branch):
                y = BasicResidualUnit(w).emit(b, f"{prefix}.branch{r}.unit{u}", y)
            ys.append(y)
        b.module("block", prefix, branches=self.num_branches, units_per_branch=self.units_per_branch,
                 widths=self.widths)
        if self.fusion is None:
            return ys
        outs = self.fusion.emit(b, f"{prefix}.fuse", ys, outputs)
        b.module("fusion", f"{prefix}.fuse", inputs=self.fusion.num_inputs, outputs=self.fusion.num_outputs,
                 paths=len(self.fusion.paths), nodes=tuple(n.name for n in b.nodes if n.name.startswith(f"{prefix}.fuse.")))
        return outs


# ---------------------------------------------------------------------------
# standalone execution of single units


def unit_graph(unit, in_widths) -> Graph:
    b = GraphBuilder(list(in_widths), input_name="x")
    if isinstance(unit, FusionUnit):
        outs = unit.emit(b, "fuse", list(b.inputs))
    else:
        outs = [unit.emit(b, "unit", b.inputs[0])]
    return b.finish(outs, prune=False)


def _check_ladder(inputs: list[Tensor]) -> None:
    h, w = inputs[0].shape[2], inputs[0].shape[3]
    for i, t in enumerate(inputs[1:], 1):
        d = 2 ** i
        if t.shape[2] * d != h or t.shape[3] * d != w:
            raise ShapeError(f"ladder violation: input {i + 1} is {t.shape[2]}x{t.shape[3]}, "
                             f"expected {h / d:g}x{w / d:g} (1/{d} of input 1)")


def fusion_forward(unit: FusionUnit, inputs: list[Tensor], params: Mapping[str, Tensor],
                   buffers: Mapping[str, np.ndarray], training: bool = False) -> list[Tensor]:
    """Run one fusion unit. Parameter names are those of :func:`unit_graph` (prefix ``fuse.``)."""
    if len(inputs) != unit.num_inputs:
        raise ShapeError(f"fusion expects {unit.num_inputs} inputs, got {len(inputs)}")
    _check_ladder(inputs)
    return execute(unit_graph(unit, unit.in_widths), params, buffers, *inputs, training=training)


def residual_forward(unit: BasicResidualUnit | BottleneckUnit, x: Tensor, params: Mapping[str, Tensor],
                     buffers: Mapping[str, np.ndarray], training: bool = False) -> Tensor:
    if x.shape[1] != unit.in_channels:
        raise ShapeError(f"residual unit expects {unit.in_channels} channels, got {x.shape[1]}")
    return execute(unit_graph(unit, [unit.in_channels]), params, buffers, x, training=training)[0]
