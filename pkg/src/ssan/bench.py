"""Training, evaluation, variant comparison and the gradient-check suite."""
from __future__ import annotations

import csv
import json
import logging
import math
import platform
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import attn, cost, net, synth
from . import tensor as tn
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

VARIANTS = ("baseline", "nl-1d", "nl-2d", "nl-3d", "nl-2d+1d", "ssa")
_NL_MODES = {
    "nl-1d": "temporal-1D",
    "nl-2d": "spatial-2D",
    "nl-3d": "spatiotemporal-3D",
    "nl-2d+1d": "stacked-2D+1D",
}


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class RunConfig:
    variant: str = "ssa"
    name: str = ""
    # ablation toggles: SA adds the channel branch, TA uses temporal convs for
    # the temporal query/key, SVE shares the spatial value embedding
    spatial_attention: bool = True
    temporal_attention: bool = True
    shared_value: bool = True
    # divide attention similarities by sqrt of their contraction length
    scaled_similarity: bool = False
    stages: list[int] = field(default_factory=lambda: [2, 3])
    epochs: int = 20
    batch_size: int = 16
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    warmup_fraction: float = 0.05
    decay_factor: float = 0.1
    patience: int = 3
    plateau_threshold: float = 1e-4
    # global gradient-norm ceiling; 0 disables clipping
    clip_grad_norm: float = 1.0
    seed: int = 0
    # keep each clip and its reversed twin in the same batch
    pair_batches: bool = True
    # dataset
    n_per_class: int = 500
    clip_length: int = 4
    frames: int = 4
    size: int = 32
    data_seed: int = 0
    widths: list[int] = field(default_factory=lambda: [8, 16, 32])
    conv_bias: bool = False
    # rescale convs to unit output RMS on the first training batch before training
    unit_rms_init: bool = True

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if not self.lr >= 0:  # lr == 0 is kept for null-update checks
            raise ValueError(f"lr must be non-negative, got {self.lr}")
        if not 0 <= self.warmup_fraction < 1:
            raise ValueError(f"warmup_fraction must lie in [0, 1), got {self.warmup_fraction}")
        if not 0 < self.decay_factor < 1:
            raise ValueError(f"decay_factor must lie in (0, 1), got {self.decay_factor}")
        if self.clip_grad_norm < 0:
            raise ValueError(f"clip_grad_norm must be >= 0, got {self.clip_grad_norm}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        self.stages = [int(s) for s in self.stages]
        self.widths = [int(w) for w in self.widths]

    @property
    def label(self) -> str:
        return self.name or self.variant

    @property
    def dataset_key(self) -> tuple:
        return (self.n_per_class, self.clip_length, self.size, self.data_seed)

    def attention(self) -> dict | None:
        if self.variant == "baseline":
            return None
        if self.variant == "ssa":
            return {"type": "ssa", "enable_channel_branch": self.spatial_attention,
                    "temporal_kernel": 3 if self.temporal_attention else 1,
                    "shared_value": self.shared_value, "scaled": self.scaled_similarity}
        return {"type": "nl", "mode": _NL_MODES[self.variant], "scaled": self.scaled_similarity}

    def arch(self, num_classes: int = 2) -> net.ArchSpec:
        return net.toy_arch(num_classes, in_channels=1, size=self.size, widths=self.widths,
                            attention=self.attention(), stages=self.stages,
                            conv_bias=self.conv_bias)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown RunConfig fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path: str | Path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class RunReport:
    config: dict
    seed: int
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_top1: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    final_top1: float = float("nan")
    final_top5: float = float("nan")
    top5_note: str = ""
    cost: dict = field(default_factory=dict)
    environment: dict = field(default_factory=dict)
    # timing varies run to run, so it stays out of equality and to_dict()
    wall_clock_s: float = field(default=0.0, compare=False)

    @property
    def epochs_run(self) -> int:
        return len(self.train_loss)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("wall_clock_s")
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


# -- optimisation ------------------------------------------------------------------


class NesterovSGD:
    """SGD with Nesterov momentum; weight decay enters as an L2 gradient term."""

    def __init__(self, params: Sequence[Tensor], momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads: dict[int, np.ndarray], lr: float) -> None:
        mu = self.momentum
        for p, v in zip(self.params, self.velocity):
            g = grads.get(p.id)
            g = np.zeros_like(p.data) if g is None else g
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v *= mu
            v += g
            p.data = p.data - lr * (g + mu * v)


def clip_grad_norm(grads: dict[int, np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place so their joint L2 norm is at most ``max_norm``.
    Returns the norm before clipping."""
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    if norm > max_norm:
        f = max_norm / norm
        for g in grads.values():
            g *= f
    return norm


class PlateauSchedule:
    """Linear warmup over the first ``warmup_steps`` steps, then the rate is
    held and multiplied by ``decay_factor`` whenever the validation loss has
    not improved by ``threshold`` for ``patience`` epochs in a row."""

    def __init__(self, base_lr: float, warmup_steps: int, decay_factor: float,
                 patience: int = 3, threshold: float = 1e-4):
        self.current = base_lr
        self.warmup_steps = warmup_steps
        self.decay_factor = decay_factor
        self.patience = patience
        self.threshold = threshold
        self.best = math.inf
        self.bad_epochs = 0
        self.decays = 0

    def lr(self, step: int) -> float:
        if step < self.warmup_steps:
            return self.current * (step + 1) / self.warmup_steps
        return self.current

    def epoch_end(self, val_loss: float) -> bool:
        if val_loss < self.best - self.threshold:
            self.best = val_loss
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        if self.bad_epochs >= self.patience:
            self.current = self.current * self.decay_factor
            self.bad_epochs = 0
            self.decays += 1
            return True
        return False


# -- evaluation --------------------------------------------------------------------


def topk_correct(logits: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    """Per-row hit flags; among equal logits the lower class index ranks first."""
    order = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    return (order == labels[:, None]).any(axis=1)


def _frames(split: synth.Split, idx: np.ndarray, frames: int, mode: str, rng) -> np.ndarray:
    clips = split.clips[idx]
    length = clips.shape[1]
    if length == frames:
        return clips
    picks = np.stack([net.sample_segments(length, frames, mode, rng) for _ in idx])
    return clips[np.arange(len(idx))[:, None], picks]


def predict(m: net.Model, split: synth.Split, frames: int | None = None,
            batch_size: int = 64) -> np.ndarray:
    frames = frames or split.clips.shape[1]
    out = []
    for lo in range(0, len(split), batch_size):
        idx = np.arange(lo, min(lo + batch_size, len(split)))
        out.append(net.forward_classify(m, _frames(split, idx, frames, "center", None)).data)
    return np.concatenate(out) if out else np.zeros((0, m.num_classes))


def evaluate(m: net.Model, dataset: synth.Split, frames: int | None = None,
             batch_size: int = 64) -> tuple[float, float]:
    """(top1, top5) with centre segment sampling. With fewer than 5 classes
    top-5 is 1.0."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    logits = predict(m, dataset, frames, batch_size)
    top1 = float(topk_correct(logits, dataset.labels, 1).mean())
    top5 = float(topk_correct(logits, dataset.labels, 5).mean())
    return top1, top5


def _val_loss_and_top1(m, split, frames, batch_size=64):
    logits = predict(m, split, frames, batch_size)
    loss = tn.cross_entropy(Tensor._wrap(logits), split.labels).item()
    return loss, float(topk_correct(logits, split.labels, 1).mean())


def _epoch_order(split: synth.Split, rng: np.random.Generator, paired: bool) -> np.ndarray:
    """Shuffled clip order; with ``paired`` twins sharing a seed stay adjacent.

    Twins differ only in frame order, so batching them together cancels the
    order-blind part of the gradient and leaves the temporal signal.
    """
    n = len(split)
    if not paired:
        return rng.permutation(n)
    _, first, inverse = np.unique(split.seeds, return_index=True, return_inverse=True)
    groups = [[] for _ in first]
    for i, g in enumerate(inverse):
        groups[g].append(i)
    order = rng.permutation(len(groups))
    return np.array([i for g in order for i in groups[g]], dtype=np.int64)


def _init_batch(split: synth.Split, cfg: RunConfig) -> np.ndarray:
    # a fixed slice keeps the init a pure function of config and data
    idx = np.arange(min(len(split), 4 * cfg.batch_size))
    return _frames(split, idx, cfg.frames, "center", None)


def environment() -> dict:
    return {"python": platform.python_version(), "numpy": np.__version__,
            "machine": platform.machine()}


# -- training ----------------------------------------------------------------------


def train(cfg: RunConfig, dataset: synth.Dataset | None = None) -> tuple[net.Model, RunReport]:
    """Train the configured variant on the synthetic reversal dataset."""
    start = time.perf_counter()
    if dataset is None:
        dataset = synth.make_dataset(cfg.n_per_class, cfg.clip_length, cfg.size, cfg.size,
                                     cfg.data_seed)
    spec = cfg.arch(num_classes=2)
    model = net.build_backbone(spec, cfg.seed)
    if cfg.unit_rms_init:
        net.rescale_to_unit_rms(model, _init_batch(dataset.train, cfg))
    params = model.parameters()
    opt = NesterovSGD(params, cfg.momentum, cfg.weight_decay)
    train_split = dataset.train
    n = len(train_split)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    sched = PlateauSchedule(cfg.lr, round(cfg.warmup_fraction * cfg.epochs * steps_per_epoch),
                            cfg.decay_factor, cfg.patience, cfg.plateau_threshold)
    rng = np.random.default_rng([cfg.seed, 1])
    report = RunReport(config=asdict(cfg), seed=cfg.seed, environment=environment())
    report.cost = {k: v for k, v in cost.cost_report(
        spec, (1, cfg.frames, 1, cfg.size, cfg.size)).to_dict().items() if k != "breakdown"}

    step = 0
    for epoch in range(cfg.epochs):
        perm = _epoch_order(train_split, rng, cfg.pair_batches)
        losses = []
        epoch_lr = sched.lr(step)
        for lo in range(0, n, cfg.batch_size):
            idx = perm[lo:lo + cfg.batch_size]
            clips = _frames(train_split, idx, cfg.frames, "random", rng)
            with Tape() as tape:
                logits = model.forward(Tensor._wrap(clips))
                loss = tn.cross_entropy(logits, train_split.labels[idx])
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(f"non-finite training loss {value} in epoch {epoch + 1}")
            grads = tn.backward(tape, loss)
            if cfg.clip_grad_norm:
                clip_grad_norm(grads, cfg.clip_grad_norm)
            for p in params:
                p.grad = None
            opt.step(grads, sched.lr(step))
            losses.append(value)
            step += 1
        val_loss, val_top1 = _val_loss_and_top1(model, dataset.val, cfg.frames)
        if not math.isfinite(val_loss):
            raise TrainingDiverged(f"non-finite validation loss in epoch {epoch + 1}")
        report.train_loss.append(float(np.mean(losses)))
        report.val_loss.append(val_loss)
        report.val_top1.append(val_top1)
        report.lr.append(epoch_lr)
        log.info("%s epoch %d: train %.4f val %.4f top1 %.3f", cfg.label, epoch + 1,
                 report.train_loss[-1], val_loss, val_top1)
        sched.epoch_end(val_loss)

    report.final_top1, report.final_top5 = evaluate(model, dataset.val, cfg.frames)
    if model.num_classes < 5:
        report.top5_note = f"top-5 is 1.0 by convention with {model.num_classes} classes"
    report.wall_clock_s = time.perf_counter() - start
    return model, report


def write_report(report: RunReport, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "report.json"
    path.write_text(report.to_json())
    (out / "timing.json").write_text(json.dumps({"wall_clock_s": report.wall_clock_s}))
    return path


# -- variant matrix ----------------------------------------------------------------

MATRIX_COLUMNS = ["variant", "params", "macs", "top1", "error"]


def _matrix_row(cfg: RunConfig, dataset) -> tuple[dict, RunReport | None]:
    spec = cfg.arch(num_classes=2)
    rep = cost.cost_report(spec, (1, cfg.frames, 1, cfg.size, cfg.size))
    row = {"variant": cfg.label, "params": rep.total_params, "macs": rep.total_macs,
           "top1": "", "error": ""}
    try:
        _, report = train(cfg, dataset)
    except Exception as exc:  # one failing row must not sink the others
        log.exception("run %s failed", cfg.label)
        row["error"] = f"{type(exc).__name__}: {exc}"
        return row, None
    row["top1"] = report.final_top1
    return row, report


def run_matrix(cfgs: Sequence[RunConfig], out_dir: str | Path, jobs: int = 1) -> list[dict]:
    """Train every config on one shared dataset; write ``matrix.csv`` and
    ``reports.json`` to ``out_dir`` and return the CSV rows."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfgs = list(cfgs)
    if cfgs and len({c.dataset_key for c in cfgs}) != 1:
        raise ValueError("all configs in a matrix must share the dataset parameters")
    results: list[tuple[dict, RunReport | None]] = []
    if cfgs:
        c0 = cfgs[0]
        dataset = synth.make_dataset(c0.n_per_class, c0.clip_length, c0.size, c0.size, c0.data_seed)
        if jobs > 1:
            from concurrent.futures import ProcessPoolExecutor

            with ProcessPoolExecutor(max_workers=jobs) as pool:
                results = list(pool.map(_matrix_row, cfgs, [dataset] * len(cfgs)))
        else:
            results = [_matrix_row(c, dataset) for c in cfgs]
    rows = [r for r, _ in results]
    with open(out / "matrix.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=MATRIX_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    bundle = [{"variant": r["variant"], "error": r["error"],
               "report": rep.to_dict() if rep is not None else None} for r, rep in results]
    (out / "reports.json").write_text(json.dumps(bundle, indent=2))
    return rows


# -- gradient-check suite ------------------------------------------------------------


@dataclass
class GradRow:
    target: str
    max_rel_error: float
    checks: int
    passed: bool


@dataclass
class GradcheckReport:
    rows: list[GradRow]
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.rows)

    def to_text(self) -> str:
        lines = [f"{'target':<28} {'max rel err':>12} {'checks':>7}  result"]
        for r in self.rows:
            lines.append(f"{r.target:<28} {r.max_rel_error:12.3e} {r.checks:7d}  "
                         f"{'PASS' if r.passed else 'FAIL'}")
        lines.append(f"overall: {'PASS' if self.passed else 'FAIL'} (tolerance {self.tolerance:g})")
        return "\n".join(lines)


def _probe(out: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar ``sum(out * weights)`` so every output entry gets a distinct cotangent."""
    return tn.sum_all(tn.mul(out, Tensor._wrap(weights)))


def check_function(build: Callable[[list[Tensor]], Tensor], inputs: list[np.ndarray],
                   rng: np.random.Generator, step: float = 1e-5) -> tuple[float, int]:
    """Finite-difference check of ``build`` with respect to each input in turn."""
    consts = [Tensor(a) for a in inputs]
    probe_w = rng.standard_normal(build(consts).shape)
    worst, n = 0.0, 0
    for i, a in enumerate(inputs):
        def f(x, i=i):
            args = list(consts)
            args[i] = x
            return _probe(build(args), probe_w)

        worst = max(worst, tn.finite_diff_check(f, Tensor(a), step))
        n += 1
    return worst, n


def _op_targets() -> dict[str, Callable[[np.random.Generator], tuple[Callable, list[np.ndarray]]]]:
    def dims(rng, k):
        return [int(d) for d in rng.integers(1, 5, size=k)]

    def t_matmul(rng):
        r, k, s = dims(rng, 3)
        return (lambda a: tn.matmul(a[0], a[1])), [rng.standard_normal((r, k)), rng.standard_normal((k, s))]

    def t_batched_matmul(rng):
        g, r, k, s = dims(rng, 4)
        return (lambda a: tn.matmul(a[0], a[1])), [rng.standard_normal((g, r, k)),
                                                   rng.standard_normal((g, k, s))]

    def t_softmax(rng):
        r, s = dims(rng, 2)
        return (lambda a: tn.softmax_rows(a[0])), [rng.standard_normal((r, s + 1))]

    def t_add(rng):
        shape = dims(rng, 3)
        return (lambda a: tn.add(a[0], a[1])), [rng.standard_normal(shape), rng.standard_normal(shape)]

    def t_sub(rng):
        shape = dims(rng, 2)
        return (lambda a: tn.sub(a[0], a[1])), [rng.standard_normal(shape), rng.standard_normal(shape)]

    def t_mul(rng):
        shape = dims(rng, 3)
        return (lambda a: tn.mul(a[0], a[1])), [rng.standard_normal(shape), rng.standard_normal(shape)]

    def t_scale(rng):
        return (lambda a: tn.scale(a[0], -1.7)), [rng.standard_normal(dims(rng, 2))]

    def t_sum(rng):
        return (lambda a: tn.sum_all(a[0])), [rng.standard_normal(dims(rng, 3))]

    def t_mean(rng):
        return (lambda a: tn.mean(a[0], (1, 2))), [rng.standard_normal(dims(rng, 4))]

    def t_reshape_transpose(rng):
        a, b, c = dims(rng, 3)
        return (lambda x: tn.reshape(tn.transpose(x[0], (2, 0, 1)), (c, a * b))), \
            [rng.standard_normal((a, b, c))]

    def t_relu(rng):
        x = rng.standard_normal(dims(rng, 3))
        x[np.abs(x) < 1e-3] = 0.5  # keep probes away from the kink
        return (lambda a: tn.relu(a[0])), [x]

    def t_pointwise(rng):
        n, c, co, h = dims(rng, 4)
        return (lambda a: tn.conv_pointwise(a[0], a[1], a[2])), [
            rng.standard_normal((n, c, h, h + 1)), rng.standard_normal((co, c)), rng.standard_normal(co)]

    def t_temporal(rng):
        b, t, c, co = dims(rng, 4)
        return (lambda a: tn.conv_temporal(a[0], a[1], a[2])), [
            rng.standard_normal((b, t, c, 2, 2)), rng.standard_normal((co, c, 3)), rng.standard_normal(co)]

    def t_conv2d(rng):
        n, co = dims(rng, 2)
        groups = int(rng.choice([1, 2]))
        c = 2 * int(rng.integers(1, 3))
        co = groups * co
        stride = int(rng.integers(1, 3))
        return (lambda a: tn.conv2d(a[0], a[1], a[2], stride=stride, padding=1, groups=groups)), [
            rng.standard_normal((n, c, 5, 4)), rng.standard_normal((co, c // groups, 3, 3)),
            rng.standard_normal(co)]

    def t_avgpool(rng):
        n, c = dims(rng, 2)
        return (lambda a: tn.avgpool2d(a[0], 2)), [rng.standard_normal((n, c, 4, 6))]

    def t_affine(rng):
        n, c = dims(rng, 2)
        return (lambda a: tn.channel_affine(a[0], a[1], a[2])), [
            rng.standard_normal((n, c, 2, 3)), rng.standard_normal(c), rng.standard_normal(c)]

    def t_linear(rng):
        n, i, o = dims(rng, 3)
        return (lambda a: tn.linear(a[0], a[1], a[2])), [
            rng.standard_normal((n, i)), rng.standard_normal((o, i)), rng.standard_normal(o)]

    def t_cross_entropy(rng):
        n, k = dims(rng, 2)
        labels = rng.integers(0, k + 1, size=n)
        return (lambda a: tn.scale(tn.cross_entropy(a[0], labels), 1.0)), [rng.standard_normal((n, k + 1))]

    def t_composite(rng):
        r, k = dims(rng, 2)
        return (lambda a: tn.matmul(tn.softmax_rows(tn.add(a[0], a[1])), a[2])), [
            rng.standard_normal((r, k)), rng.standard_normal((r, k)), rng.standard_normal((k, r))]

    return {
        "tensor.matmul": t_matmul,
        "tensor.matmul_batched": t_batched_matmul,
        "tensor.softmax_rows": t_softmax,
        "tensor.add": t_add,
        "tensor.sub": t_sub,
        "tensor.mul": t_mul,
        "tensor.scale": t_scale,
        "tensor.sum_all": t_sum,
        "tensor.mean": t_mean,
        "tensor.reshape_transpose": t_reshape_transpose,
        "tensor.relu": t_relu,
        "tensor.conv_pointwise": t_pointwise,
        "tensor.conv_temporal": t_temporal,
        "tensor.conv2d": t_conv2d,
        "tensor.avgpool2d": t_avgpool,
        "tensor.channel_affine": t_affine,
        "tensor.linear": t_linear,
        "tensor.cross_entropy": t_cross_entropy,
        "tensor.matmul_softmax_add": t_composite,
    }


BLOCK_SHAPE = (1, 3, 4, 3, 3)  # B, T, C, H, W


def _block_check(forward: Callable[[Tensor, dict], Tensor], weights: dict[str, Tensor],
                 x: np.ndarray, rng: np.random.Generator) -> tuple[float, int]:
    names = list(weights)

    def build(args):
        return forward(args[0], dict(zip(names, args[1:])))

    return check_function(build, [x] + [weights[k].data for k in names], rng)


def _block_targets() -> dict[str, Callable[[np.random.Generator], tuple[float, int]]]:
    c = BLOCK_SHAPE[2]

    def nl(mode):
        def run(rng):
            cfg = attn.NlConfig(c, 2, mode)
            w = attn.init_nl(cfg, rng, requires_grad=False, zero_wz=False)
            return _block_check(lambda x, ww: attn.nl_block(x, cfg, ww), w,
                                rng.standard_normal(BLOCK_SHAPE), rng)
        return run

    def ssa_part(part):
        def run(rng):
            cfg = attn.SsaConfig(c, 2)
            w = attn.init_ssa(cfg, rng, requires_grad=False, zero_wz=False)
            x = rng.standard_normal(BLOCK_SHAPE)
            if part == "temporal":
                x = rng.standard_normal(BLOCK_SHAPE[:2] + (2,) + BLOCK_SHAPE[3:])
            fn = {"spatial": attn.spatial_attention, "temporal": attn.temporal_attention,
                  "ssa": attn.ssa_forward}[part]
            return _block_check(lambda xx, ww: fn(xx, cfg, ww), w, x, rng)
        return run

    def micro(rng):
        return _micro_model_check(rng)

    return {
        "attn.nl_block[temporal-1D]": nl("temporal-1D"),
        "attn.nl_block[spatial-2D]": nl("spatial-2D"),
        "attn.nl_block[spatiotemporal-3D]": nl("spatiotemporal-3D"),
        "attn.nl_block[stacked-2D+1D]": nl("stacked-2D+1D"),
        "attn.spatial_attention": ssa_part("spatial"),
        "attn.temporal_attention": ssa_part("temporal"),
        "attn.ssa_forward": ssa_part("ssa"),
        "net.micro_model": micro,
    }


def micro_arch() -> net.ArchSpec:
    """Two convs, one SSA block and a head on 2-channel 6x6 frames."""
    L = net.LayerSpec
    return net.ArchSpec(2, 6, 6, [
        L("pointwise-conv2d", 2, 4, stage=1),
        L("attn-insert", 4, 4, stage=1, attention={"type": "ssa", "inner_dim": 2}),
        L("conv2d", 4, 4, kernel=3, stage=1),
        L("relu", stage=1),
        L("global-avgpool"),
        L("linear", 4, 3),
    ], name="micro")


def _micro_model_check(rng) -> tuple[float, int]:
    model = net.build_backbone(micro_arch(), int(rng.integers(2 ** 31)))
    for p in model.params[1].values():  # give the zero-initialised W_z real values
        p.data = rng.uniform(-0.5, 0.5, size=p.shape)
    names = model.named_parameters()
    x = rng.standard_normal((1, 3, 2, 6, 6))
    labels = np.array([int(rng.integers(3))])
    worst, n = 0.0, 0
    base = [t.data.copy() for _, t in names]

    def loss_wrt_input(x_t):
        return tn.cross_entropy(model.forward(x_t), labels)

    worst = max(worst, tn.finite_diff_check(loss_wrt_input, Tensor(x)))
    n += 1
    for (pname, _), value in zip(names, base):
        layer_i, key = pname.split(".", 1)
        holder = model.params[int(layer_i)]

        def loss_wrt_param(p_t, holder=holder, key=key):
            original = holder[key]
            holder[key] = p_t
            try:
                return tn.cross_entropy(model.forward(Tensor(x)), labels)
            finally:
                holder[key] = original

        worst = max(worst, tn.finite_diff_check(loss_wrt_param, Tensor(value)))
        n += 1
    return worst, n


def gradcheck_targets() -> list[str]:
    return list(_op_targets()) + list(_block_targets())


def gradcheck_suite(seed: int = 0, op_trials: int = 20, block_trials: int = 3,
                    tolerance: float = 1e-4) -> GradcheckReport:
    """Finite-difference check of every registered op and block.

    Tensor ops get ``op_trials`` random instances each; attention blocks and
    the micro model ``block_trials``. A row passes when its worst relative
    error is below ``tolerance``.
    """
    rows = []
    for i, (name, make) in enumerate(_op_targets().items()):
        rng = np.random.default_rng([seed, 0, i])
        worst, checks = 0.0, 0
        for _ in range(op_trials):
            build, inputs = make(rng)
            e, n = check_function(build, inputs, rng)
            worst, checks = max(worst, e), checks + n
        rows.append(GradRow(name, worst, checks, worst < tolerance))
    for i, (name, run) in enumerate(_block_targets().items()):
        rng = np.random.default_rng([seed, 1, i])
        worst, checks = 0.0, 0
        for _ in range(block_trials):
            e, n = run(rng)
            worst, checks = max(worst, e), checks + n
        rows.append(GradRow(name, worst, checks, worst < tolerance))
    return GradcheckReport(rows, tolerance)
