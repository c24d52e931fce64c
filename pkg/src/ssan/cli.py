"""Command line entry point: ``ssan <command> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import bench, cost, net, synth


def _cmd_gradcheck(args) -> int:
    report = bench.gradcheck_suite(seed=args.seed)
    print(report.to_text())
    return 0 if report.passed else 1


def _cmd_cost(args) -> int:
    if args.arch == "mobilenet_v2":
        spec = cost.mobilenet_v2(args.classes, with_ssa=args.with_ssa)
    else:
        attention = {"type": "ssa"} if args.with_ssa else None
        spec = net.toy_arch(args.classes, attention=attention)
    report = cost.cost_report(spec, (1, args.frames, spec.in_channels, spec.height, spec.width))
    if args.json:
        report.to_json(args.json)
    if args.csv:
        report.to_csv(args.csv)
    print(f"arch:        {report.arch}")
    print(f"input:       {'x'.join(map(str, report.input_shape))}")
    print(f"params:      {report.total_params:,} ({report.total_params / 1e6:.3f}M)")
    print(f"MACs:        {report.total_macs:,} ({report.total_macs / 1e9:.3f}G)")
    if report.attention_product_macs:
        print(f"  in attention matrix products: {report.attention_product_macs / 1e9:.3f}G")
    return 0


def _cmd_train(args) -> int:
    cfg = bench.RunConfig.from_json(args.config)
    _, report = bench.train(cfg)
    path = bench.write_report(report, args.out)
    print(f"{cfg.label}: top1 {report.final_top1:.4f}  ({report.wall_clock_s:.1f}s) -> {path}")
    return 0


def _load_matrix(path: str) -> list[bench.RunConfig]:
    data = json.loads(Path(path).read_text())
    if isinstance(data, dict):
        # {"base": {...shared fields...}, "runs": [{...overrides...}, ...]}
        base = data.get("base", {})
        return [bench.RunConfig.from_dict({**base, **run}) for run in data.get("runs", [])]
    return [bench.RunConfig.from_dict(d) for d in data]


def _cmd_matrix(args) -> int:
    cfgs = _load_matrix(args.config)
    rows = bench.run_matrix(cfgs, args.out, jobs=args.jobs)
    for r in rows:
        top1 = f"{r['top1']:.4f}" if r["top1"] != "" else "-"
        print(f"{r['variant']:<20} params {r['params']:>8} macs {r['macs']:>12} top1 {top1} {r['error']}")
    return 1 if any(r["error"] for r in rows) else 0


def _cmd_synth(args) -> int:
    ds = synth.make_dataset(args.n, args.frames, args.size, args.size, args.seed)
    path = synth.export_dataset(ds, args.out)
    print(f"wrote {len(ds.train) + len(ds.val)} clips, index at {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ssan", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gradcheck", help="finite-difference check of every op and block")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=_cmd_gradcheck)

    c = sub.add_parser("cost", help="parameter and MAC counts")
    c.add_argument("--arch", choices=["mobilenet_v2", "toy"], default="mobilenet_v2")
    c.add_argument("--classes", type=int, default=174)
    c.add_argument("--frames", type=int, default=8)
    c.add_argument("--with-ssa", action="store_true")
    c.add_argument("--json", metavar="PATH")
    c.add_argument("--csv", metavar="PATH")
    c.set_defaults(func=_cmd_cost)

    t = sub.add_parser("train", help="train one RunConfig")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.set_defaults(func=_cmd_train)

    m = sub.add_parser("matrix", help="train several variants on one dataset")
    m.add_argument("--config", required=True,
                   help="JSON list of RunConfigs, or {'base': {...}, 'runs': [...]}")
    m.add_argument("--out", required=True)
    m.add_argument("--jobs", type=int, default=1)
    m.set_defaults(func=_cmd_matrix)

    s = sub.add_parser("synth", help="export the synthetic reversal dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=500, help="clips per class per split")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--frames", type=int, default=4)
    s.add_argument("--size", type=int, default=32)
    s.set_defaults(func=_cmd_synth)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError, bench.TrainingDiverged) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
