"""Command-line entry point: build, report, gradcheck, ablate, train-toy, presets.

Exit codes: 0 success, 1 verification failure (including shape/ladder errors and
out-of-tolerance totals), 2 usage or config error.

Input sizes are written ``HxW`` in the order the published tables use, so
``--input 256x192`` is 256 pixels tall and 192 wide.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import yaml

from . import analysis
from .builder import build
from .config import CLS_HEADS, FIELDS, HEADS, PRESET_WIDTHS, ArchConfig, ConfigError, from_dict, load_config
from .tensor import ShapeError

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

# task output count implied by each head when none is given: COCO keypoints,
# Cityscapes classes, ImageNet classes; the pyramid head has no task layer
HEAD_OUTPUTS = {"V1": 17, "V1h": 17, "V2": 19, "V2p": 0, **{h: 1000 for h in CLS_HEADS}}

ABLATIONS = {
    "fusion-a": {"fusion_design": "a"},
    "fusion-b": {"fusion_design": "b"},
    "fusion-c": {"fusion_design": "c"},
    "multiply": {"combine": "multiply"},
    "bilinear-down": {"downsample_kind": "bilinear"},
    "resize-first": {"upsample_order": "resize-first"},
    "light-transition": {"light_transition": True},
    "maintain": {"maintain_from_start": True},
    "v1h": {"head": "V1h"},
}


class UsageError(Exception):
    pass


def parse_size(text: str) -> tuple[int, int]:
    """``"256x192"`` -> (256, 192) as (height, width)."""
    parts = text.lower().replace("×", "x").split("x")
    if len(parts) != 2:
        raise UsageError(f"input size must look like 256x192, got {text!r}")
    try:
        h, w = (int(p) for p in parts)
    except ValueError:
        raise UsageError(f"input size must be two integers, got {text!r}") from None
    if h < 1 or w < 1:
        raise UsageError(f"input size must be positive, got {text!r}")
    return h, w


def parse_head(text: str) -> str:
    for h in HEADS:
        if h.lower() == text.lower():
            return h
    raise UsageError(f"unknown head {text!r}; choose from {', '.join(HEADS)}")


def _parse_set(items: list[str]) -> dict:
    out = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key = key.strip().replace("-", "_")
        if key not in FIELDS:
            raise UsageError(f"unknown config key {key!r}")
        out[key] = yaml.safe_load(value)
    return out


def config_from_args(args) -> ArchConfig:
    """Preset or config file, then --head / --num-outputs / --set overrides."""
    if getattr(args, "config", None) and getattr(args, "preset", None):
        raise UsageError("give either --preset or --config, not both")
    if getattr(args, "config", None):
        base = load_config(args.config).to_dict()
    else:
        name = (getattr(args, "preset", None) or "w32").lower()
        if name not in PRESET_WIDTHS:
            raise UsageError(f"unknown preset {name!r}; choose from {', '.join(PRESET_WIDTHS)}")
        base = ArchConfig(width_c=PRESET_WIDTHS[name]).to_dict()
    if getattr(args, "head", None):
        base["head"] = parse_head(args.head)
        if getattr(args, "num_outputs", None) is None and not getattr(args, "config", None):
            base["num_outputs"] = HEAD_OUTPUTS[base["head"]]
    elif not getattr(args, "config", None):
        base["num_outputs"] = HEAD_OUTPUTS[base["head"]]
    if getattr(args, "num_outputs", None) is not None:
        base["num_outputs"] = args.num_outputs
    base.update(_parse_set(getattr(args, "set", None)))
    return from_dict(base)


def _label(args, cfg: ArchConfig) -> str:
    src = Path(args.config).stem if getattr(args, "config", None) else (args.preset or "w32").lower()
    return f"{src}/{cfg.head}"


def _write(path: str | None, text: str) -> None:
    if path:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text if text.endswith("\n") else text + "\n")


def _within(value: float, expected: float, tol: float) -> bool:
    return abs(value - expected) <= tol * abs(expected)


# ---------------------------------------------------------------------------
# subcommands


def cmd_presets(args) -> int:
    print(f"{'preset':<8} {'C':>4}  branch widths")
    for name, c in PRESET_WIDTHS.items():
        print(f"{name:<8} {c:>4}  {', '.join(str(w) for w in ArchConfig(width_c=c).widths)}")
    return EXIT_OK


def cmd_build(args) -> int:
    cfg = config_from_args(args)
    graph = build(cfg)
    report = analysis.count_params(graph, _label(args, cfg), cfg.digest())
    summary = {
        "label": report.label,
        "config_digest": cfg.digest(),
        "config": cfg.to_dict(),
        "nodes": len(graph.nodes),
        "params": report.total_params,
        "fusion_units": len(graph.modules_of("fusion")),
        "blocks": len(graph.modules_of("block")),
        "outputs": list(graph.outputs),
    }
    print(f"{report.label}  config={cfg.digest()}  nodes={summary['nodes']}  params={report.total_params:,}  "
          f"fusions={summary['fusion_units']}  blocks={summary['blocks']}")
    if args.input:
        h, w = parse_size(args.input)
        for name, shape in zip(graph.outputs, analysis.output_shapes(graph, (1, 3, h, w))):
            print(f"  output {name}: {'x'.join(map(str, shape))}")
    if args.output:
        _write(args.output, json.dumps(summary, indent=2))
    return EXIT_OK


def cmd_report(args) -> int:
    cfg = config_from_args(args)
    h, w = parse_size(args.input)
    graph = build(cfg)
    report = analysis.count_flops(graph, (1, 3, h, w), _label(args, cfg), cfg.digest())
    report.extra["outputs"] = {n: list(s) for n, s in zip(graph.outputs, analysis.output_shapes(graph, (1, 3, h, w)))}
    print(report.to_text(rows=args.rows))
    if args.output:
        _write(args.output, report.to_json() if args.output.endswith(".json") else report.to_text(rows=True))
    ok = True
    if args.expect_params is not None:
        good = _within(report.total_params, args.expect_params, args.params_tol)
        ok &= good
        print(f"{'PASS' if good else 'FAIL'}  params {report.total_params:,} vs expected {args.expect_params:,.0f} "
              f"(tol {args.params_tol:.0%})")
    if args.expect_gflops is not None:
        good = _within(report.gflops, args.expect_gflops, args.flops_tol)
        ok &= good
        print(f"{'PASS' if good else 'FAIL'}  GFLOPs {report.gflops:.3f} vs expected {args.expect_gflops} "
              f"(tol {args.flops_tol:.0%})")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_gradcheck(args) -> int:
    from .gradcheck import check_deep, check_primitives

    try:
        results = check_primitives(args.seed, args.primitive)
    except KeyError as err:
        raise UsageError(str(err.args[0])) from None
    if not args.primitive and not args.skip_deep:
        results += check_deep(args.seed, samples=args.samples)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed (seed {args.seed})")
    return EXIT_FAIL if failed else EXIT_OK


def cmd_ablate(args) -> int:
    base = config_from_args(args)
    h, w = parse_size(args.input)
    names = [v.strip() for v in args.variants.split(",") if v.strip()]
    for v in names:
        if v not in ABLATIONS:
            raise UsageError(f"unknown variant {v!r}; choose from {', '.join(ABLATIONS)}")
    dims = (1, 3, h, w)
    ref_graph = build(base)
    ref = analysis.count_flops(ref_graph, dims, "base", base.digest())
    rows = []
    print(f"{'variant':<18} {'fusions':>7} {'params':>14} {'GFLOPs':>9} {'d params':>12} {'d GFLOPs':>9} "
          f"{'shape changes':>13}")
    print(f"{'base':<18} {len(ref_graph.modules_of('fusion')):>7} {ref.total_params:>14,} {ref.gflops:>9.3f} "
          f"{0:>+12,} {0:>+9.3f} {0:>13}")
    for v in names:
        cfg = base.replace(**ABLATIONS[v])
        graph = build(cfg)
        rep = analysis.count_flops(graph, dims, v, cfg.digest())
        diff = analysis.compare_reports(ref, rep)
        fusions = len(graph.modules_of("fusion"))
        rows.append({"variant": v, "fusion_units": fusions, "params": rep.total_params, "flops": rep.total_flops,
                     "params_delta": diff.params_delta, "flops_delta": diff.flops_delta,
                     "shape_changes": len(diff.shape_changes), "added_nodes": len(diff.added),
                     "removed_nodes": len(diff.removed)})
        print(f"{v:<18} {fusions:>7} {rep.total_params:>14,} {rep.gflops:>9.3f} {diff.params_delta:>+12,} "
              f"{diff.flops_delta / analysis.GIGA:>+9.3f} {len(diff.shape_changes):>13}")
    if args.output:
        _write(args.output, json.dumps({"base": base.to_dict(), "input": [h, w], "variants": rows}, indent=2))
    return EXIT_OK


def cmd_train_toy(args) -> int:
    from .training import DivergenceError, SyntheticKeypoints, evaluate_oks, toy_config, train_toy

    overrides = _parse_set(args.set)
    cfg = load_config(args.config) if args.config else toy_config(**overrides)
    if args.config and overrides:
        cfg = cfg.replace(**overrides)
    data = SyntheticKeypoints(size=args.size, blob_sigma=args.blob_sigma, noise=args.noise)
    try:
        result = train_toy(cfg, data, steps=args.steps, lr=args.lr, optimizer=args.optimizer, seed=args.seed,
                           n_train=args.n_train)
    except DivergenceError as err:
        print(f"FAIL  {err}")
        return EXIT_FAIL
    result.write_trace(args.trace)
    score = evaluate_oks(result, data, n=args.eval_samples)
    print(f"seed={args.seed} steps={args.steps} lr={args.lr} config={cfg.digest()}")
    print(f"initial_loss={result.losses[0]:.6g} final_loss={result.losses[-1]:.6g} "
          f"reduction={result.reduction:.3g}x")
    print(f"held_out_oks={score:.4f} (n={args.eval_samples})")
    print(f"trace written to {args.trace}")
    ok = True
    if args.expect_reduction is not None and not result.reduction >= args.expect_reduction:
        print(f"FAIL  loss reduction {result.reduction:.3g}x < {args.expect_reduction}x")
        ok = False
    if args.expect_oks is not None and not score >= args.expect_oks:
        print(f"FAIL  OKS {score:.4f} < {args.expect_oks}")
        ok = False
    return EXIT_OK if ok else EXIT_FAIL


# ---------------------------------------------------------------------------
# argument parsing


def _config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--preset", help="named preset (w18 ... w96); default w32")
    p.add_argument("--config", help="YAML config file with ArchConfig keys")
    p.add_argument("--head", help=f"representation head: {', '.join(HEADS)}")
    p.add_argument("--num-outputs", type=int, help="keypoints / classes (default depends on the head)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config field")


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hrnet", description=__doc__.split("\n\n")[0],
                                     epilog="Input sizes are HxW, height first: --input 256x192 is 256 tall, 192 wide.")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("presets", help="list named presets")

    p = sub.add_parser("build", help="build a network and print its structure summary")
    _config_flags(p)
    p.add_argument("--input", help="optional HxW input size for output shapes")
    p.add_argument("--output", help="write the summary as JSON")

    p = sub.add_parser("report", help="parameter and FLOPs report at an input size")
    _config_flags(p)
    p.add_argument("--input", required=True, help="input size HxW, e.g. 256x192")
    p.add_argument("--output", help="report file (.json for the structured schema, text otherwise)")
    p.add_argument("--rows", action="store_true", help="print per-node rows")
    p.add_argument("--expect-params", type=float)
    p.add_argument("--expect-gflops", type=float)
    p.add_argument("--params-tol", type=float, default=0.02, help="relative tolerance (default 0.02)")
    p.add_argument("--flops-tol", type=float, default=0.05, help="relative tolerance (default 0.05)")

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--primitive", help="only primitives with this name (e.g. conv2d)")
    p.add_argument("--samples", type=int, default=25, help="sampled parameters for the deep check")
    p.add_argument("--skip-deep", action="store_true")

    p = sub.add_parser("ablate", help="structural comparison of fusion variants")
    _config_flags(p)
    p.add_argument("--input", default="256x192")
    p.add_argument("--variants", default="fusion-a,fusion-b,fusion-c,multiply,bilinear-down",
                   help=f"comma list from: {', '.join(ABLATIONS)}")
    p.add_argument("--output", help="write the comparison as JSON")

    p = sub.add_parser("train-toy", help="train the toy network on synthetic keypoints")
    p.add_argument("--config", help="YAML config (default: C=4, blocks 1,1,1,1, V1, one keypoint)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    p.add_argument("--n-train", type=int, default=64)
    p.add_argument("--size", type=int, default=32, help="square image side")
    p.add_argument("--blob-sigma", type=float, default=2.0)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--eval-samples", type=int, default=64)
    p.add_argument("--trace", default="loss_trace.txt", help="step,value loss trace output")
    p.add_argument("--expect-reduction", type=float)
    p.add_argument("--expect-oks", type=float)
    return parser


COMMANDS = {
    "presets": cmd_presets,
    "build": cmd_build,
    "report": cmd_report,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
    "train-toy": cmd_train_toy,
}


def main(argv: list[str] | None = None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, FileNotFoundError, yaml.YAMLError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except ShapeError as err:
        print(f"shape error: {err}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
