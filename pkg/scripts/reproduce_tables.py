"""Print parameter and GFLOPs totals for the published model rows next to the reference figures."""

import argparse
import json

from hrnet_engine.analysis import count_flops
from hrnet_engine.builder import build
from hrnet_engine.config import ArchConfig

# (label, config, input HxW, reference params in M, reference GFLOPs)
ROWS = [
    ("HRNetV1-W32", ArchConfig(width_c=32, num_outputs=17), (256, 192), 28.5, 7.10),
    ("HRNetV1-W32", ArchConfig(width_c=32, num_outputs=17), (384, 288), 28.5, 16.0),
    ("HRNetV1-W48", ArchConfig(width_c=48, num_outputs=17), (256, 192), 63.6, 14.6),
    ("HRNetV1-W48", ArchConfig(width_c=48, num_outputs=17), (384, 288), 63.6, 32.9),
    ("HRNetV2-W48", ArchConfig(width_c=48, head="V2", num_outputs=19), (1024, 2048), 65.9, 696.2),
    ("HRNet-W18-C", ArchConfig(width_c=18, head="ClsDefault", num_outputs=1000), (224, 224), 21.3, 3.99),
    ("HRNet-W30-C", ArchConfig(width_c=30, head="ClsDefault", num_outputs=1000), (224, 224), 37.7, 7.55),
    ("HRNet-W40-C", ArchConfig(width_c=40, head="ClsDefault", num_outputs=1000), (224, 224), 57.6, 11.8),
]


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--json", help="also write the rows to this file")
    args = ap.parse_args()
    out = []
    print(f"{'model':<14} {'input':>10} {'params':>9} {'ref':>6} {'diff':>7} {'GFLOPs':>8} {'ref':>7} {'diff':>7}")
    for label, cfg, (h, w), ref_p, ref_g in ROWS:
        rep = count_flops(build(cfg), (1, 3, h, w), label, cfg.digest())
        p = rep.total_params / 1e6
        print(f"{label:<14} {f'{h}x{w}':>10} {p:>8.2f}M {ref_p:>6.1f} {p / ref_p - 1:>+7.2%} "
              f"{rep.gflops:>8.2f} {ref_g:>7.2f} {rep.gflops / ref_g - 1:>+7.2%}")
        out.append({"model": label, "input": [h, w], "params": rep.total_params, "gflops": rep.gflops,
                    "ref_params_m": ref_p, "ref_gflops": ref_g})
    if args.json:
        with open(args.json, "w") as f:
            json.dump(out, f, indent=2)


if __name__ == "__main__":
    main()
