"""Acceptance criteria 1-7, one PASS/FAIL line each.

Run directly (``python tests/test_acceptance.py``) for the lines alone, or through
pytest, where the lines are repeated in the terminal summary.
"""

from __future__ import annotations

import hashlib
import math
import time

import numpy as np
import pytest

from hrnet_engine.analysis import compare_reports, count_flops
from hrnet_engine.builder import build
from hrnet_engine.config import ArchConfig
from hrnet_engine.gradcheck import DEEP_TOL, PRIMITIVE_TOL, check_deep, check_primitives
from hrnet_engine.tasks import KeypointSet, decode_channel, decode_keypoints, make_gaussian_targets, oks
from hrnet_engine.training import evaluate_oks, toy_config, train_toy

PARAMS_TOL = 0.02
FLOPS_TOL = 0.05
RATIO_TOL = 1e-6
TOY_STEPS = 300
TOY_LR = 1e-3
TOY_SEED = 0
TOY_EVAL = 64
MIN_REDUCTION = 10.0
MIN_OKS = 0.5

# (label, config, input HxW, expected params, expected GFLOPs or None)
MODELS = [
    ("HRNetV1-W32", ArchConfig(width_c=32, head="V1", num_outputs=17), (256, 192), 28.5e6, 7.10),
    ("HRNetV1-W32@384", ArchConfig(width_c=32, head="V1", num_outputs=17), (384, 288), None, 16.0),
    ("HRNetV1-W48", ArchConfig(width_c=48, head="V1", num_outputs=17), (256, 192), 63.6e6, 14.6),
    ("HRNetV2-W48-seg", ArchConfig(width_c=48, head="V2", num_outputs=19), (1024, 2048), 65.9e6, 696.2),
    ("HRNet-W18-C", ArchConfig(width_c=18, head="ClsDefault", num_outputs=1000), (224, 224), 21.3e6, 3.99),
    ("HRNet-W30-C", ArchConfig(width_c=30, head="ClsDefault", num_outputs=1000), (224, 224), 37.7e6, None),
    ("HRNet-W40-C", ArchConfig(width_c=40, head="ClsDefault", num_outputs=1000), (224, 224), 57.6e6, None),
]

LINES: dict[int, str] = {}
# fingerprints of every artifact, keyed by criterion, for the determinism rerun
ARTIFACTS: dict[int, str] = {}


def _digest(*parts) -> str:
    h = hashlib.sha256()
    for p in parts:
        h.update(p if isinstance(p, bytes) else repr(p).encode())
    return h.hexdigest()[:16]


def _record(n: int, passed: bool, detail: str) -> bool:
    LINES[n] = f"criterion {n}: {'PASS' if passed else 'FAIL'}  {detail}"
    print(LINES[n])
    return passed


def _within(value, expected, tol):
    return abs(value - expected) <= tol * abs(expected)


def _reports():
    return {label: count_flops(build(cfg), (1, 3, h, w), label, cfg.digest()) for label, cfg, (h, w), _, _ in MODELS}


def run_criterion_1():
    reps = _reports()
    bad, parts = [], []
    for label, _, _, params, _ in MODELS:
        if params is None:
            continue
        got = reps[label].total_params
        parts.append(f"{label}={got / 1e6:.2f}M")
        if not _within(got, params, PARAMS_TOL):
            bad.append(f"{label} {got:,} vs {params:,.0f}")
    ARTIFACTS[1] = _digest(*(reps[k].to_json() for k in sorted(reps)))
    return _record(1, not bad, "; ".join(bad) if bad else " ".join(parts))


def run_criterion_2():
    reps = _reports()
    bad, parts = [], []
    for label, _, _, _, gflops in MODELS:
        if gflops is None:
            continue
        got = reps[label].gflops
        parts.append(f"{label}={got:.2f}")
        if not _within(got, gflops, FLOPS_TOL):
            bad.append(f"{label} {got:.3f} vs {gflops}")
    ratio = reps["HRNetV1-W32@384"].total_flops / reps["HRNetV1-W32"].total_flops
    if abs(ratio - 2.25) >= RATIO_TOL:
        bad.append(f"ratio {ratio!r} != 2.25")
    parts.append(f"ratio={ratio:.9f}")
    ARTIFACTS[2] = _digest(*(reps[k].to_json() for k in sorted(reps)))
    return _record(2, not bad, "; ".join(bad) if bad else " ".join(parts))


def _strided_fusion_total(graph) -> int:
    return sum(n.num_params for n in graph.nodes
               if ".fuse." in n.name and ".s" in n.name and n.kind in ("conv", "bn"))


def run_criterion_3():
    dims = (1, 3, 256, 192)
    counts = {d: len(build(ArchConfig(fusion_design=d)).modules_of("fusion")) for d in "cba"}
    base_g = build(ArchConfig())
    base = count_flops(base_g, dims)
    mult = compare_reports(base, count_flops(build(ArchConfig(combine="multiply")), dims))
    bil = compare_reports(base, count_flops(build(ArchConfig(downsample_kind="bilinear")), dims))
    closed = -_strided_fusion_total(base_g)
    bad = []
    if counts != {"c": 8, "b": 3, "a": 1}:
        bad.append(f"fusion counts {counts}")
    if mult.shape_changes or mult.params_delta or mult.flops_delta:
        bad.append("multiply changes shapes or totals")
    if bil.shape_changes:
        bad.append(f"bilinear changes {len(bil.shape_changes)} shapes")
    if bil.params_delta != closed:
        bad.append(f"bilinear delta {bil.params_delta} != {closed}")
    ARTIFACTS[3] = _digest(counts, mult.params_delta, bil.params_delta, bil.flops_delta, closed)
    detail = f"fusions c/b/a={counts['c']}/{counts['b']}/{counts['a']} bilinear dparams={bil.params_delta:,}"
    return _record(3, not bad, "; ".join(bad) if bad else detail)


def run_criterion_4():
    start = time.perf_counter()
    prims = check_primitives(0)
    deep = check_deep(0, samples=25)
    elapsed = time.perf_counter() - start
    worst_p = max(r.max_rel_error for r in prims)
    worst_d = max(r.max_rel_error for r in deep)
    bad = [r.name for r in prims if not r.max_rel_error < PRIMITIVE_TOL]
    bad += [r.name for r in deep if not r.max_rel_error < DEEP_TOL]
    if elapsed >= 120:
        bad.append(f"runtime {elapsed:.0f}s")
    ARTIFACTS[4] = _digest(*((r.name, r.max_rel_error) for r in prims + deep))
    detail = f"{len(prims)} primitives max {worst_p:.1e}; deep 25 params max {worst_d:.1e}; {elapsed:.1f}s"
    return _record(4, not bad, ("failed: " + ", ".join(bad)) if bad else detail)


def run_criterion_5():
    rng = np.random.default_rng(0)
    truth = KeypointSet(rng.uniform(0, 100, (17, 2)), [2] * 17, scale=50.0)
    identical = oks(truth, truth)
    size, lo = 128, 8 * 4
    worst = 0.0
    for _ in range(200):
        kps = KeypointSet(rng.uniform(lo, size - 1 - lo, (1, 2)), [2])
        (pred,) = decode_keypoints(make_gaussian_targets(kps, (size, size)))
        worst = max(worst, float(np.abs(pred.points - kps.points).max()))
    hm = np.zeros((4, 5))
    hm[1, 2], hm[1, 3], hm[0, 2] = 1.0, 0.5, 0.2
    x, y, _ = decode_channel(hm)
    (pt,) = decode_keypoints(hm[None, None])
    bad = []
    if identical != 1.0:
        bad.append(f"OKS(identical)={identical!r}")
    if worst > 2.0:
        bad.append(f"round trip {worst:.3f}px")
    if (x, y) != (2.25, 1.0) or pt.points.tolist() != [[9.0, 4.0]]:
        bad.append(f"worked example gave {(x, y)} -> {pt.points.tolist()}")
    ARTIFACTS[5] = _digest(identical, worst, x, y)
    detail = f"OKS=1.0 exactly; round trip worst {worst:.3f}px per coordinate; (2.25,1.0)->(9,4)"
    return _record(5, not bad, "; ".join(bad) if bad else detail)


def run_criterion_6():
    start = time.perf_counter()
    result = train_toy(toy_config(), steps=TOY_STEPS, lr=TOY_LR, seed=TOY_SEED)
    score = evaluate_oks(result, n=TOY_EVAL)
    elapsed = time.perf_counter() - start
    reduction = result.reduction
    ARTIFACTS[6] = _digest(np.array(result.losses).tobytes(), score)
    bad = []
    if not reduction >= MIN_REDUCTION:
        bad.append(f"loss reduction {reduction:.1f}x < {MIN_REDUCTION:g}x")
    if not score >= MIN_OKS:
        bad.append(f"held-out OKS {score:.3f} < {MIN_OKS}")
    if not math.isfinite(result.losses[-1]) or elapsed >= 600:
        bad.append(f"runtime {elapsed:.0f}s")
    detail = (f"loss {result.losses[0]:.3f} -> {result.losses[-1]:.4f} ({reduction:.0f}x), "
              f"held-out OKS {score:.3f}, {elapsed:.0f}s")
    return _record(6, not bad, detail + ("; " + "; ".join(bad) if bad else ""))


RUNNERS = {1: run_criterion_1, 2: run_criterion_2, 3: run_criterion_3, 4: run_criterion_4,
           5: run_criterion_5, 6: run_criterion_6}


def run_criterion_7():
    """Rerun 1-6 and compare every report, check list and loss trace fingerprint."""
    first = dict(ARTIFACTS)
    for n, fn in RUNNERS.items():
        if n not in first:
            fn()
            first[n] = ARTIFACTS[n]
    saved = dict(LINES)
    for fn in RUNNERS.values():
        fn()
    LINES.clear()
    LINES.update(saved)
    differ = [n for n in RUNNERS if ARTIFACTS[n] != first[n]]
    detail = "differs: " + ", ".join(map(str, differ)) if differ else "reports, checks and traces bit-identical across reruns"
    return _record(7, not differ, detail)


@pytest.mark.parametrize("n", [1, 2, 3, 4, 5])
def test_criterion(n):
    assert RUNNERS[n](), LINES[n]


@pytest.mark.slow
def test_criterion_6_learning():
    assert run_criterion_6(), LINES[6]


@pytest.mark.slow
def test_criterion_7_determinism():
    assert run_criterion_7(), LINES[7]


if __name__ == "__main__":
    for fn in list(RUNNERS.values()) + [run_criterion_7]:
        fn()
    print("\n".join(LINES[n] for n in sorted(LINES)))
