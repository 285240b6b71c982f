"""Train the toy network on synthetic keypoints and report loss reduction and held-out OKS per seed."""

import argparse
import time

from hrnet_engine.training import SyntheticKeypoints, evaluate_oks, toy_config, train_toy


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", default="0", help="comma-separated seeds")
    ap.add_argument("--steps", type=int, default=300)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--n-train", type=int, default=64)
    ap.add_argument("--trace-prefix", help="write <prefix><seed>.txt loss traces")
    args = ap.parse_args()
    data = SyntheticKeypoints()
    for seed in (int(s) for s in args.seeds.split(",")):
        start = time.perf_counter()
        result = train_toy(toy_config(), data, steps=args.steps, lr=args.lr, seed=seed, n_train=args.n_train)
        score = evaluate_oks(result, data)
        if args.trace_prefix:
            result.write_trace(f"{args.trace_prefix}{seed}.txt")
        print(f"seed={seed} loss {result.losses[0]:.4f} -> {result.losses[-1]:.4f} "
              f"({result.reduction:.0f}x) held-out OKS {score:.3f} [{time.perf_counter() - start:.0f}s]")


if __name__ == "__main__":
    main()
