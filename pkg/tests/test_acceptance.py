"""Acceptance criteria, one test each.

Every test records a single PASS/FAIL line; the lines are repeated in the
terminal summary. Criterion 5 trains seven models and takes about 11 minutes
on one core.
"""
import json
import subprocess
import sys
import time

import numpy as np

from ssan import attn, bench, net
from ssan.attn import NlConfig, SsaConfig
from ssan.tensor import Tensor
from test_attn import (SSA_VARIANTS, random_weights, reversal_witness_hits, spatial_oracle,
                       temporal_oracle, _permute_positions)

RESULTS: list[str] = []

# attention at the last stage only keeps the seven runs inside the time budget
SEPARATION = dict(n_per_class=500, clip_length=4, frames=4, size=32, stages=[3], epochs=10)
SEEDS = (0, 1, 2)


def record(number: int, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'}  criterion {number}: {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


def _cli(*args):
    start = time.perf_counter()
    out = subprocess.run([sys.executable, "-m", "ssan", *args], capture_output=True, text=True,
                         check=True)
    return out.stdout, time.perf_counter() - start


def test_criterion_1_mobilenet_cost(tmp_path):
    _, dt = _cli("cost", "--arch", "mobilenet_v2", "--classes", "174", "--frames", "8",
                 "--json", str(tmp_path / "plain.json"))
    _, dt_ssa = _cli("cost", "--arch", "mobilenet_v2", "--classes", "174", "--frames", "8",
                     "--with-ssa", "--json", str(tmp_path / "ssa.json"))
    plain = json.loads((tmp_path / "plain.json").read_text())
    ssa = json.loads((tmp_path / "ssa.json").read_text())
    params, macs = plain["total_params"], plain["total_macs"]
    delta = ssa["total_params"] - params
    ok = (abs(params - 2.4e6) <= 0.05 * 2.4e6 and abs(macs - 2.5e9) <= 0.10 * 2.5e9
          and delta <= 0.15e6 and max(dt, dt_ssa) < 1.0)
    record(1, ok, f"params {params / 1e6:.3f}M, MACs {macs / 1e9:.3f}G, ssa delta "
                  f"{delta / 1e6:.3f}M, slowest call {max(dt, dt_ssa):.2f}s")


def test_criterion_2_gradient_suite():
    start = time.perf_counter()
    report = bench.gradcheck_suite(seed=0)
    dt = time.perf_counter() - start
    worst = max(report.rows, key=lambda r: r.max_rel_error)
    ok = report.passed and report.tolerance == 1e-4 and dt < 120
    record(2, ok, f"{len(report.rows)} targets, worst {worst.target} {worst.max_rel_error:.2e}, "
                  f"{dt:.1f}s")


def test_criterion_3_oracle_equivalence():
    rng = np.random.default_rng(300)
    nl_err = 0.0
    for _ in range(20):
        w = random_weights(attn.init_nl, NlConfig(4, 2), rng)
        x = Tensor(rng.standard_normal((2, 1, 4, 3, 3)))
        y3 = attn.nl_block(x, NlConfig(4, 2, "spatiotemporal-3D"), w).data
        y2 = attn.nl_block(x, NlConfig(4, 2, "spatial-2D"), w).data
        nl_err = max(nl_err, np.abs(y3 - y2).max())
    s_err = t_err = 0.0
    for i in range(50):
        opts = SSA_VARIANTS[i % len(SSA_VARIANTS)]
        c = int(rng.integers(1, 6))
        cfg = SsaConfig(c, int(rng.integers(1, c + 1)), **opts)
        w = random_weights(attn.init_ssa, cfg, rng)
        x = rng.standard_normal((int(rng.integers(1, 3)), int(rng.integers(1, 5)), c,
                                 int(rng.integers(1, 4)), int(rng.integers(1, 4))))
        s_err = max(s_err, np.abs(attn.spatial_attention(Tensor(x), cfg, w).data
                                  - spatial_oracle(x, cfg, w)).max())
        xh = rng.standard_normal(x.shape[:2] + (cfg.inner_dim,) + x.shape[3:])
        t_err = max(t_err, np.abs(attn.temporal_attention(Tensor(xh), cfg, w).data
                                  - temporal_oracle(xh, cfg, w)).max())
    ok = max(nl_err, s_err, t_err) <= 1e-10
    record(3, ok, f"3D(T=1) vs 2D {nl_err:.1e}, spatial {s_err:.1e}, temporal {t_err:.1e} "
                  f"over 50 instances")


def test_criterion_4_identity_at_init():
    rng = np.random.default_rng(400)
    cfg = SsaConfig(8, 4)
    x = Tensor(rng.standard_normal((2, 4, 8, 5, 5)))
    block_ok = np.array_equal(attn.ssa_forward(x, cfg, attn.init_ssa(cfg, rng)).data, x.data)
    clips = rng.standard_normal((3, 4, 1, 16, 16))
    plain = net.build_backbone(net.toy_arch(5, size=16), 7)
    with_ssa = net.build_backbone(net.toy_arch(5, size=16, attention={"type": "ssa"}), 7)
    logits_ok = np.array_equal(net.forward_classify(plain, clips).data,
                               net.forward_classify(with_ssa, clips).data)
    record(4, block_ok and logits_ok, f"ssa_forward(x) == x: {block_ok}; backbone logits "
                                      f"identical: {logits_ok}")


def test_criterion_5_temporal_separation(tmp_path):
    cfgs = [bench.RunConfig(variant="baseline", name="baseline", **SEPARATION)]
    for variant in ("ssa", "nl-2d"):
        cfgs += [bench.RunConfig(variant=variant, name=f"{variant}/seed{s}", seed=s, **SEPARATION)
                 for s in SEEDS]
    start = time.perf_counter()
    rows = bench.run_matrix(cfgs, tmp_path)
    dt = time.perf_counter() - start
    top1 = {r["variant"]: r["top1"] for r in rows}
    if any(r["error"] for r in rows):
        record(5, False, "runs failed: " + "; ".join(r["error"] for r in rows if r["error"]))
    ssa = [top1[f"ssa/seed{s}"] for s in SEEDS]
    nl = [top1[f"nl-2d/seed{s}"] for s in SEEDS]
    ok = (0.4 <= top1["baseline"] <= 0.6 and min(ssa) >= 0.9
          and all(a > b for a, b in zip(ssa, nl)) and dt <= 900)
    record(5, ok, f"baseline {top1['baseline']:.3f}, ssa {[round(v, 3) for v in ssa]}, "
                  f"nl-2d {[round(v, 3) for v in nl]}, {dt:.0f}s")


def test_criterion_6_equivariance():
    rng = np.random.default_rng(600)
    worst = 0.0
    cfg3 = NlConfig(3, 2, "spatiotemporal-3D")
    cfg2 = NlConfig(3, 2, "spatial-2D")
    cfg1 = NlConfig(3, 2, "temporal-1D")
    pos = SsaConfig(3, 2, enable_channel_branch=False)
    chan = SsaConfig(4, 3)
    for _ in range(20):
        w = random_weights(attn.init_nl, cfg3, rng)
        x = rng.standard_normal((1, 3, 3, 2, 2))
        flat = lambda a: a.transpose(0, 2, 1, 3, 4).reshape(1, 3, -1)
        perm = rng.permutation(12)
        xp = flat(x)[:, :, perm].reshape(1, 3, 3, 2, 2).transpose(0, 2, 1, 3, 4)
        y, yp = attn.nl_block(Tensor(x), cfg3, w).data, attn.nl_block(Tensor(xp), cfg3, w).data
        worst = max(worst, np.abs(flat(yp) - flat(y)[:, :, perm]).max())

        w = random_weights(attn.init_nl, cfg2, rng)
        x = rng.standard_normal((2, 3, 3, 2, 3))
        perms = [rng.permutation(6) for _ in range(3)]
        y = attn.nl_block(Tensor(x), cfg2, w).data
        yp = attn.nl_block(Tensor(_permute_positions(x, perms)), cfg2, w).data
        worst = max(worst, np.abs(yp - _permute_positions(y, perms)).max())

        w = random_weights(attn.init_ssa, pos, rng)
        y = attn.spatial_attention(Tensor(x), pos, w).data
        yp = attn.spatial_attention(Tensor(_permute_positions(x, perms)), pos, w).data
        worst = max(worst, np.abs(yp - _permute_positions(y, perms)).max())

        w = random_weights(attn.init_nl, cfg1, rng)
        x = rng.standard_normal((2, 4, 3, 2, 2))
        fperm = rng.permutation(4)
        y = attn.nl_block(Tensor(x), cfg1, w).data
        worst = max(worst, np.abs(attn.nl_block(Tensor(x[:, fperm]), cfg1, w).data - y[:, fperm]).max())

        w = random_weights(attn.init_ssa, chan, rng)
        x = rng.standard_normal((1, 2, 4, 3, 3))
        perms = [rng.permutation(9) for _ in range(2)]
        _, mc = attn.spatial_maps(Tensor(x), chan, w)
        _, mcp = attn.spatial_maps(Tensor(_permute_positions(x, perms)), chan, w)
        worst = max(worst, np.abs(mcp.data - mc.data).max())
    hits = reversal_witness_hits(20)
    record(6, worst <= 1e-10 and hits >= 19,
           f"max equivariance error {worst:.1e} over 5 properties x 20 instances; "
           f"reversal witness {hits}/20")


def test_criterion_7_deterministic_train(tmp_path):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"variant": "ssa", "n_per_class": 8, "size": 16, "epochs": 2,
                               "widths": [4, 8, 8]}))
    _cli("train", "--config", str(cfg), "--out", str(tmp_path / "a"))
    _cli("train", "--config", str(cfg), "--out", str(tmp_path / "b"))
    a = (tmp_path / "a" / "report.json").read_bytes()
    b = (tmp_path / "b" / "report.json").read_bytes()
    record(7, a == b, f"two CLI train runs give {'identical' if a == b else 'different'} "
                      f"report.json ({len(a)} bytes)")
