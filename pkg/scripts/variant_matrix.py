"""Compare every attention variant, plus SSA ablations, on the reversal dataset.

    python scripts/variant_matrix.py --out results/matrix --epochs 10 --stages 3

Writes matrix.csv and reports.json under --out and prints the table.
"""
import argparse
import logging

from ssan import bench


def build_configs(args) -> list[bench.RunConfig]:
    base = dict(epochs=args.epochs, stages=args.stages, n_per_class=args.n, seed=args.seed)
    cfgs = [bench.RunConfig(variant=v, name=v, **base) for v in bench.VARIANTS]
    if args.ablations:
        cfgs += [
            bench.RunConfig(variant="ssa", name="ssa-no-channel", spatial_attention=False, **base),
            bench.RunConfig(variant="ssa", name="ssa-no-temporal-conv", temporal_attention=False,
                            **base),
            bench.RunConfig(variant="ssa", name="ssa-separate-value", shared_value=False, **base),
        ]
    return cfgs


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="results/matrix")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--stages", type=int, nargs="+", default=[3])
    p.add_argument("--n", type=int, default=500, help="clips per class")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--ablations", action="store_true")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    rows = bench.run_matrix(build_configs(args), args.out, jobs=args.jobs)
    print(f"\n{'variant':<24}{'params':>9}{'MACs':>13}{'top1':>8}")
    for r in rows:
        top1 = f"{r['top1']:.3f}" if r["top1"] != "" else "err"
        print(f"{r['variant']:<24}{r['params']:>9,}{r['macs']:>13,}{top1:>8}")


if __name__ == "__main__":
    main()
