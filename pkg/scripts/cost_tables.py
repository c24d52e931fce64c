"""Parameter and MAC budgets: MobileNet-V2 at full scale and the toy variants.

    python scripts/cost_tables.py [--classes 174] [--frames 8]
"""
import argparse

from ssan import bench, cost


def mobilenet_rows(classes: int, frames: int) -> list[tuple[str, cost.CostReport]]:
    shape = (1, frames, 3, 224, 224)
    out = [("mobilenet_v2", cost.cost_report(cost.mobilenet_v2(classes), shape))]
    for r in (4, 8, 16):
        spec = cost.mobilenet_v2(classes, with_ssa=True, ssa_reduction=r)
        out.append((f"mobilenet_v2+ssa (inner C/{r})", cost.cost_report(spec, shape)))
    return out


def toy_rows(frames: int) -> list[tuple[str, cost.CostReport]]:
    out = []
    for v in bench.VARIANTS:
        for stages in ([3], [2, 3]):
            cfg = bench.RunConfig(variant=v, stages=stages, frames=frames)
            if v == "baseline" and stages != [3]:
                continue
            name = v if v == "baseline" else f"{v} @ {stages}"
            out.append((name, cost.cost_report(cfg.arch(), (1, frames, 1, cfg.size, cfg.size))))
    return out


def print_table(title: str, rows) -> None:
    print(f"\n{title}")
    print(f"{'model':<32}{'params':>12}{'MACs':>16}{'attn products':>16}")
    for name, rep in rows:
        print(f"{name:<32}{rep.total_params:>12,}{rep.total_macs:>16,}"
              f"{rep.attention_product_macs:>16,}")


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--classes", type=int, default=174)
    p.add_argument("--frames", type=int, default=8)
    args = p.parse_args()
    print_table(f"MobileNet-V2, {args.classes} classes, {args.frames} frames of 224x224",
                mobilenet_rows(args.classes, args.frames))
    print_table("toy backbone, 4 frames of 32x32", toy_rows(4))


if __name__ == "__main__":
    main()
