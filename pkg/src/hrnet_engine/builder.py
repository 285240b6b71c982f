"""ArchConfig -> Graph: stem, stage 1, multi-resolution stages 2-4 and heads."""

from __future__ import annotations

from .blocks import BottleneckUnit, ModularizedBlock, build_fusion
from .config import CLS_HEADS, ArchConfig, ConfigError
from .graph import Graph, GraphBuilder

STEM_WIDTH = 64
STAGE1_WIDTH = 64
CLS_INCRE_WIDTHS = (32, 64, 128, 256)
CLS_FEATURE_DIM = 2048
CII_BRANCH_DIM = 512


def build(config: ArchConfig) -> Graph:
    config.validate()
    b = GraphBuilder(3)
    src = b.inputs[0]
    if config.head == "V2p":
        src = b.add("pad", "pad", src, 3, multiple=32)

    y = b.conv_bn("stem.conv1", src, STEM_WIDTH, stride=2)
    y = b.conv_bn("stem.conv2", y, STEM_WIDTH, stride=2)
    b.module("stem", "stem")

    in_ch = STEM_WIDTH
    n_units = config.branch_units * config.stage_blocks[0]
    for u in range(n_units):
        unit = BottleneckUnit(in_ch, STAGE1_WIDTH)
        y = unit.emit(b, f"stage1.unit{u}", y)
        in_ch = unit.out_channels
    b.module("stage", "stage1", branches=1, blocks=config.stage_blocks[0], units=n_units)

    branches = _first_transition(b, config, y)
    for s in (2, 3, 4):
        branches = _stage(b, config, s, branches)

    outputs = _head(b, config, branches)
    return b.finish(outputs, pad_multiple=32 if config.head == "V2p" else 1)


def _first_transition(b: GraphBuilder, cfg: ArchConfig, y: str) -> list[str]:
    widths = cfg.widths
    outs = [b.conv_bn("transition1.branch1", y, widths[0])]
    n_new = 4 if cfg.maintain_from_start else 2
    for r in range(2, n_new + 1):
        z = y
        # r-1 stride-2 convs; all of them emit the target width
        for k in range(r - 1):
            z = b.conv_bn(f"transition1.branch{r}.s{k}", z, widths[r - 1], stride=2)
        outs.append(z)
    b.module("transition", "transition1", new_branches=n_new - 1)
    return outs


def _has_fusion(cfg: ArchConfig, stage: int, block: int) -> bool:
    last = block == cfg.stage_blocks[stage - 1] - 1
    if cfg.fusion_design == "c":
        return True
    if cfg.fusion_design == "b":
        return last
    return last and stage == 4


def _stage(b: GraphBuilder, cfg: ArchConfig, stage: int, branches: list[str]) -> list[str]:
    n_blocks = cfg.stage_blocks[stage - 1]
    for k in range(n_blocks):
        nbr = len(branches)
        widths = cfg.widths[:nbr]
        last = k == n_blocks - 1
        add_lower = last and stage < 4 and not cfg.maintain_from_start
        fusion = None
        if _has_fusion(cfg, stage, k):
            fusion = build_fusion(widths, add_lower=add_lower, combine=cfg.combine,
                                  downsample_kind=cfg.downsample_kind, upsample_order=cfg.upsample_order,
                                  light_transition=cfg.light_transition)
        block = ModularizedBlock(widths, cfg.branch_units, fusion)
        prefix = f"stage{stage}.block{k}"
        branches = block.emit(b, prefix, branches)
        if add_lower and fusion is None:
            # no fusion here, yet the next stage needs its new branch
            new = b.conv_bn(f"{prefix}.transition", branches[-1], 2 * widths[-1], stride=2)
            branches = branches + [new]
            b.module("transition", f"{prefix}.transition", new_branches=1)
    b.module("stage", f"stage{stage}", branches=len(cfg.widths[: len(branches)]), blocks=n_blocks)
    return branches


# ---------------------------------------------------------------------------
# heads


def _head(b: GraphBuilder, cfg: ArchConfig, branches: list[str]) -> list[str]:
    if cfg.head in ("V1", "V1h"):
        out = build_head_v1(b, branches, cfg, aligned=cfg.head == "V1h")
        return [_task_layer(b, out, cfg.num_outputs)]
    if cfg.head == "V2":
        return [_task_layer(b, build_head_v2(b, branches), cfg.num_outputs)]
    if cfg.head == "V2p":
        return build_head_v2p(b, build_head_v2(b, branches), cfg.pyramid_levels, cfg.pyramid_width)
    if cfg.head in CLS_HEADS:
        return [build_head_classification(b, branches, cfg.head, cfg.num_outputs)]
    raise ConfigError(f"unknown head {cfg.head!r}")


def _task_layer(b: GraphBuilder, src: str, k: int) -> str:
    if k == 0:
        return src
    return b.conv("task.final", src, k, kernel=1, bias=True)


def build_head_v1(b: GraphBuilder, branches: list[str], cfg: ArchConfig, aligned: bool = False) -> str:
    """High-resolution branch only; ``aligned`` (V1h) widens it to 15C with a 1x1 conv."""
    out = branches[0]
    if aligned:
        out = b.conv_bn("head.align", out, 15 * cfg.width_c, kernel=1)
    b.module("head", "head", variant="V1h" if aligned else "V1")
    return out


def build_head_v2(b: GraphBuilder, branches: list[str]) -> str:
    ups = [branches[0]]
    for r, src in enumerate(branches[1:], 2):
        ups.append(b.add(f"head.up{r}", "resize", src, b.channels[src], factor=2 ** (r - 1)))
    width = sum(b.channels[s] for s in branches)
    cat = b.add("head.concat", "concat", ups, width)
    out = b.conv_bn("head.mix", cat, width, kernel=1)
    b.module("head", "head", variant="V2", factors=tuple(2 ** i for i in range(len(branches))))
    return out


def build_head_v2p(b: GraphBuilder, v2_out: str, levels: int, width: int) -> list[str]:
    if levels < 1:
        raise ConfigError("pyramid_levels must be >= 1")
    outs = []
    y = v2_out
    for lvl in range(levels):
        if lvl:
            y = b.add(f"pyramid.pool{lvl}", "avgpool", y, b.channels[y], kernel=2, stride=2, ceil=True)
        outs.append(b.conv(f"pyramid.level{lvl}", y, width, kernel=1, bias=True))
    b.module("head", "pyramid", variant="V2p", levels=levels)
    return outs


def build_head_classification(b: GraphBuilder, branches: list[str], variant: str, num_classes: int) -> str:
    if num_classes < 1:
        raise ConfigError("classification head needs num_classes >= 1")
    if variant == "ClsDefault":
        incre = []
        for r, src in enumerate(branches, 1):
            unit = BottleneckUnit(b.channels[src], CLS_INCRE_WIDTHS[r - 1])
            incre.append(unit.emit(b, f"head.incre{r}", src))
        y = incre[0]
        for i, nxt in enumerate(incre[1:], 1):
            down = b.conv_bn(f"head.down{i}", y, b.channels[nxt], stride=2)
            y = b.add(f"head.merge{i}", "sum", (down, nxt), b.channels[nxt])
        feat = b.conv_bn("head.final", y, CLS_FEATURE_DIM, kernel=1)
        pooled = b.add("head.pool", "gap", feat, CLS_FEATURE_DIM)
    elif variant == "ClsCi":
        pooled_each = [b.add(f"head.pool{r}", "gap", s, b.channels[s]) for r, s in enumerate(branches, 1)]
        pooled = b.add("head.concat", "concat", pooled_each, sum(b.channels[s] for s in branches))
    elif variant == "ClsCii":
        ys = []
        n = len(branches)
        for r, src in enumerate(branches, 1):
            y = src
            for k in range(n - r):
                c = b.channels[y]
                y = BottleneckUnit(c, c // 2, stride=2).emit(b, f"head.branch{r}.down{k}", y)
            c = b.channels[y]
            y = BottleneckUnit(c, CII_BRANCH_DIM // 4).emit(b, f"head.branch{r}.expand", y)
            ys.append(y)
        cat = b.add("head.concat", "concat", ys, CII_BRANCH_DIM * n)
        pooled = b.add("head.pool", "gap", cat, CII_BRANCH_DIM * n)
    else:
        raise ConfigError(f"unknown classification head {variant!r}")
    dim = b.channels[pooled]
    flat = b.add("head.flatten", "flatten", pooled, dim)
    b.module("head", "head", variant=variant, feature_dim=dim)
    return b.add("task.classifier", "linear", flat, num_classes, in_features=dim, out_features=num_classes)
