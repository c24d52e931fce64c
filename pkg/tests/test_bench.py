import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ssan import bench, cost, net, synth
from ssan import tensor as tn
from ssan.bench import PlateauSchedule, RunConfig
from ssan.cli import main
from ssan.tensor import Tensor

TINY = dict(n_per_class=3, size=8, widths=[4, 4, 8], epochs=2, batch_size=4)


def tiny(**kw) -> RunConfig:
    return RunConfig(**{**TINY, **kw})


def separable_dataset(n=6, size=8) -> synth.Dataset:
    """Class 1 clips are bright in the top half, class 0 in the bottom half."""
    rng = np.random.default_rng(0)
    clips = 0.1 * rng.standard_normal((2 * n, 4, 1, size, size))
    labels = np.repeat([0, 1], n)
    clips[labels == 1, :, :, : size // 2] += 1.0
    clips[labels == 0, :, :, size // 2:] += 1.0
    split = synth.Split(clips, labels, np.arange(2 * n))
    return synth.Dataset(split, split, n, 4, size, size, 0)


# -- RunConfig ----------------------------------------------------------------------


@pytest.mark.parametrize("bad", [dict(lr=-0.1), dict(lr=float("nan")), dict(warmup_fraction=1.0),
                                 dict(decay_factor=1.0), dict(decay_factor=0.0),
                                 dict(variant="resnet"), dict(epochs=0), dict(clip_grad_norm=-1.0)])
def test_invalid_config_rejected(bad):
    with pytest.raises(ValueError):
        RunConfig(**bad)


def test_unknown_config_field_rejected():
    with pytest.raises(ValueError, match="unknown"):
        RunConfig.from_dict({"variant": "ssa", "learning_rate": 0.1})


def test_defaults_follow_recipe():
    cfg = RunConfig()
    assert (cfg.lr, cfg.momentum, cfg.weight_decay) == (0.01, 0.9, 5e-4)
    assert cfg.batch_size == 16 and cfg.epochs <= 30


# -- optimiser and schedule ---------------------------------------------------------


def test_nesterov_step_matches_hand_computation():
    p = Tensor(np.array([1.0, -2.0]))
    opt = bench.NesterovSGD([p], momentum=0.5, weight_decay=0.1)
    g = np.array([0.2, 0.4])
    opt.step({p.id: g}, lr=0.1)
    g1 = g + 0.1 * np.array([1.0, -2.0])
    v = g1
    expect = np.array([1.0, -2.0]) - 0.1 * (g1 + 0.5 * v)
    np.testing.assert_allclose(p.data, expect, rtol=0, atol=1e-15)


def test_zero_lr_leaves_weights_unchanged():
    cfg = tiny(lr=0.0, weight_decay=0.0, epochs=3)
    ds = synth.make_dataset(cfg.n_per_class, cfg.clip_length, cfg.size, cfg.size, cfg.data_seed)
    before = net.build_backbone(cfg.arch(), cfg.seed)
    net.rescale_to_unit_rms(before, bench._init_batch(ds.train, cfg))
    model, report = bench.train(cfg, ds)
    for a, b in zip(before.parameters(), model.parameters()):
        assert np.array_equal(a.data, b.data)
    assert report.epochs_run == 3


def test_loss_decreases_on_separable_batch():
    ds = separable_dataset()
    cfg = RunConfig(variant="baseline", size=8, widths=[4, 4, 8], epochs=5, batch_size=12,
                    pair_batches=False, warmup_fraction=0.0)
    _, report = bench.train(cfg, ds)
    assert all(b < a for a, b in zip(report.train_loss, report.train_loss[1:]))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_names_epoch():
    with pytest.raises(bench.TrainingDiverged, match="epoch 1"):
        bench.train(tiny(lr=1e6, clip_grad_norm=0.0, warmup_fraction=0.0, epochs=1))


def test_warmup_strictly_increasing_then_flat():
    s = PlateauSchedule(0.1, warmup_steps=10, decay_factor=0.1)
    lrs = [s.lr(i) for i in range(15)]
    assert all(b > a for a, b in zip(lrs[:10], lrs[1:10]))
    assert lrs[9] == lrs[10] == lrs[14] == 0.1


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.0, 2.0), min_size=1, max_size=30),
       st.floats(0.01, 0.9), st.integers(1, 4))
def test_schedule_decays_by_exact_factor(losses, factor, patience):
    s = PlateauSchedule(0.5, 0, factor, patience)
    for v in losses:
        before = s.lr(0)
        decayed = s.epoch_end(v)
        after = s.lr(0)
        assert after == (before * factor if decayed else before)


def test_schedule_decays_after_patience_bad_epochs():
    s = PlateauSchedule(1.0, 0, 0.1, patience=3)
    assert [s.epoch_end(v) for v in [1.0, 1.0, 1.0, 1.0]] == [False, False, False, True]
    assert s.lr(0) == pytest.approx(0.1, abs=0)


# -- evaluation ---------------------------------------------------------------------


class FixedModel:
    def __init__(self, fn, k):
        self.fn, self.num_classes = fn, k


@pytest.fixture
def fixed_forward(monkeypatch):
    monkeypatch.setattr(net, "forward_classify", lambda m, clips: Tensor(m.fn(clips)))


def balanced_split(n=10, k=2, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % k
    return synth.Split(rng.standard_normal((n, 2, 1, 2, 2)), labels, np.arange(n))


def test_oracle_predictor(fixed_forward):
    split = balanced_split()
    lookup = {c.tobytes(): y for c, y in zip(split.clips, split.labels)}
    m = FixedModel(lambda x: np.eye(2)[[lookup[c.tobytes()] for c in x]], 2)
    assert bench.evaluate(m, split) == (1.0, 1.0)


def test_constant_predictor(fixed_forward):
    m = FixedModel(lambda x: np.zeros((len(x), 2)), 2)
    assert bench.evaluate(m, balanced_split())[0] == 0.5


def test_ties_break_to_lowest_class():
    hits = bench.topk_correct(np.zeros((3, 4)), np.array([0, 1, 3]), 1)
    assert hits.tolist() == [True, False, False]


def test_top5_contains_top1_with_174_classes():
    spec = net.toy_arch(174, size=8, widths=(4, 4, 8), attention={"type": "ssa"})
    m = net.build_backbone(spec, 0)
    rng = np.random.default_rng(7)
    for p in m.parameters():  # a random model rather than the zero-logit init
        p.data = p.data + rng.standard_normal(p.data.shape)
    labels = np.arange(348) % 174
    split = synth.Split(rng.standard_normal((348, 4, 1, 8, 8)), labels, np.arange(348))
    logits = bench.predict(m, split)
    hit1 = bench.topk_correct(logits, labels, 1)
    hit5 = bench.topk_correct(logits, labels, 5)
    assert np.all(hit5[hit1])
    top1, top5 = bench.evaluate(m, split)
    assert top5 >= top1


def test_empty_dataset_rejected():
    empty = synth.Split(np.zeros((0, 4, 1, 8, 8)), np.zeros(0, dtype=int), np.zeros(0))
    with pytest.raises(ValueError):
        bench.evaluate(net.build_backbone(net.toy_arch(2, size=8), 0), empty)


# -- training reports and batching ----------------------------------------------------


def test_report_is_bit_identical_across_runs():
    _, a = bench.train(tiny())
    _, b = bench.train(tiny())
    assert a == b
    assert a.to_json() == b.to_json()


def test_report_fields():
    _, r = bench.train(tiny())
    assert len(r.train_loss) == len(r.val_top1) == len(r.lr) == 2
    assert r.final_top5 == 1.0 and "convention" in r.top5_note
    assert r.cost["total_params"] == cost.count_params(tiny().arch())
    assert r.wall_clock_s > 0


def test_write_report_splits_timing(tmp_path):
    _, r = bench.train(tiny(epochs=1))
    path = bench.write_report(r, tmp_path)
    assert "wall_clock_s" not in json.loads(path.read_text())
    assert json.loads((tmp_path / "timing.json").read_text())["wall_clock_s"] > 0


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_paired_order_keeps_twins_adjacent(seed):
    split = synth.make_dataset(5, 2, 8, 8, seed=seed % 7).train
    order = bench._epoch_order(split, np.random.default_rng(seed), True)
    assert sorted(order.tolist()) == list(range(len(split)))
    seeds = split.seeds[order]
    assert np.array_equal(seeds[0::2], seeds[1::2])


# -- variant matrix -------------------------------------------------------------------


def test_empty_matrix(tmp_path):
    assert bench.run_matrix([], tmp_path) == []
    assert (tmp_path / "matrix.csv").read_text().strip() == ",".join(bench.MATRIX_COLUMNS)


def test_matrix_rows_match_cost_and_repeat(tmp_path):
    cfgs = [tiny(variant=v, epochs=1) for v in ("baseline", "ssa", "ssa", "nl-2d")]
    rows = bench.run_matrix(cfgs, tmp_path)
    assert len(rows) == len(cfgs)
    assert rows[1] == rows[2]
    for cfg, row in zip(cfgs, rows):
        rep = cost.cost_report(cfg.arch(), (1, cfg.frames, 1, cfg.size, cfg.size))
        assert (row["params"], row["macs"]) == (rep.total_params, rep.total_macs)
    written = list(csv.DictReader(open(tmp_path / "matrix.csv")))
    assert [r["variant"] for r in written] == ["baseline", "ssa", "ssa", "nl-2d"]
    assert len(json.loads((tmp_path / "reports.json").read_text())) == 4


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_matrix_failure_stays_in_its_row(tmp_path):
    cfgs = [tiny(lr=1e6, clip_grad_norm=0.0, warmup_fraction=0.0, epochs=1, name="bad"), tiny(epochs=1, name="ok")]
    rows = bench.run_matrix(cfgs, tmp_path)
    assert "TrainingDiverged" in rows[0]["error"]
    assert rows[1]["error"] == "" and rows[1]["top1"] != ""


def test_matrix_requires_shared_dataset(tmp_path):
    with pytest.raises(ValueError):
        bench.run_matrix([tiny(), tiny(data_seed=1)], tmp_path)


# -- gradcheck suite ------------------------------------------------------------------


@pytest.fixture(scope="module")
def quick_suite():
    return bench.gradcheck_suite(seed=0, op_trials=2, block_trials=1)


def test_gradcheck_rows_cover_targets(quick_suite):
    assert [r.target for r in quick_suite.rows] == bench.gradcheck_targets()
    assert quick_suite.passed


def test_gradcheck_catches_broken_softmax(monkeypatch):
    monkeypatch.setattr(tn, "_softmax_rows_grad", lambda y, g: 1.1 * (g - (g * y).sum(-1, keepdims=True)) * y)
    report = bench.gradcheck_suite(seed=0, op_trials=2, block_trials=1)
    bad = {r.target for r in report.rows if not r.passed}
    assert "tensor.softmax_rows" in bad
    assert "tensor.matmul" not in bad
    assert not report.passed
    assert "FAIL" in report.to_text()


# -- command line ---------------------------------------------------------------------


def test_cli_cost(capsys, tmp_path):
    assert main(["cost", "--arch", "mobilenet_v2", "--classes", "174", "--frames", "8",
                 "--json", str(tmp_path / "c.json")]) == 0
    assert "params:" in capsys.readouterr().out
    assert json.loads((tmp_path / "c.json").read_text())["total_params"] == \
        cost.count_params(cost.mobilenet_v2(174))


def test_cli_train_and_matrix(tmp_path, capsys):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({**TINY, "epochs": 1}))
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "run")]) == 0
    assert (tmp_path / "run" / "report.json").exists()
    mat = tmp_path / "m.json"
    mat.write_text(json.dumps({"base": {**TINY, "epochs": 1},
                               "runs": [{"variant": "baseline"}, {"variant": "ssa"}]}))
    assert main(["matrix", "--config", str(mat), "--out", str(tmp_path / "mat")]) == 0
    assert len(list(csv.DictReader(open(tmp_path / "mat" / "matrix.csv")))) == 2


def test_cli_bad_config_exits_2(tmp_path):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"variant": "nope"}))
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path)]) == 2


def test_cli_synth(tmp_path):
    assert main(["synth", "--out", str(tmp_path), "--n", "2", "--frames", "2", "--size", "8"]) == 0
    assert len(synth.load_exported(tmp_path / "index.json")) == 8


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31), st.floats(0.01, 10.0))
def test_clip_grad_norm(seed, max_norm):
    rng = np.random.default_rng(seed)
    grads = {i: rng.standard_normal((3, 2)) * rng.uniform(0.01, 5) for i in range(3)}
    before = {i: g.copy() for i, g in grads.items()}
    norm = bench.clip_grad_norm(grads, max_norm)
    after = np.sqrt(sum((g ** 2).sum() for g in grads.values()))
    assert after <= max_norm * (1 + 1e-12)
    if norm <= max_norm:
        assert all(np.array_equal(grads[i], before[i]) for i in grads)
    else:  # direction kept
        np.testing.assert_allclose(grads[0] * norm / max_norm, before[0], rtol=1e-12)
