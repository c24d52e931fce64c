"""Synthetic clips whose class is carried only by frame order.

A class-0 clip shows a bar or a dot moving left to right. The class-1 clip
with the same seed is that clip played backwards, so both classes have the
same frames and only a model that looks at their order can beat chance.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DOT_RADIUS = 2.0
BAR_HALF_WIDTH = 1.0


@dataclass(frozen=True)
class ClipSpec:
    label: int  # 0: moves right, 1: the reversed clip
    kind: str  # "bar" or "dot"
    start: tuple[float, float]  # (x, y) of the object centre in frame 0 of the class-0 clip
    speed: float  # pixels per frame along x
    noise: float
    seed: int

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")
        if self.kind not in ("bar", "dot"):
            raise ValueError(f"kind must be 'bar' or 'dot', got {self.kind!r}")
        if not 0.0 <= self.noise <= 0.1:
            raise ValueError(f"noise amplitude must lie in [0, 0.1], got {self.noise}")


def _extent(kind: str) -> float:
    return DOT_RADIUS if kind == "dot" else BAR_HALF_WIDTH


def _check_trajectory(spec: ClipSpec, t: int, h: int, w: int) -> None:
    r = _extent(spec.kind)
    x0, y0 = spec.start
    xs = (x0, x0 + spec.speed * (t - 1))
    if min(xs) < r or max(xs) > w - 1 - r:
        raise ValueError(f"trajectory x in [{min(xs)}, {max(xs)}] leaves the {w}-wide frame")
    if spec.kind == "dot" and not r <= y0 <= h - 1 - r:
        raise ValueError(f"dot row {y0} leaves the {h}-high frame")


def _render(kind: str, cx: float, cy: float, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    if kind == "dot":
        mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= DOT_RADIUS ** 2
    else:
        mask = np.abs(xx - cx) <= BAR_HALF_WIDTH
    return mask.astype(np.float64)


def generate_clip(spec: ClipSpec, t: int, h: int, w: int) -> tuple[np.ndarray, int]:
    """Render ``spec`` as a T x 1 x H x W clip in [0, 1]."""
    _check_trajectory(spec, t, h, w)
    x0, y0 = spec.start
    frames = np.stack([_render(spec.kind, x0 + spec.speed * i, y0, h, w) for i in range(t)])
    if spec.noise > 0:
        noise_rng = np.random.default_rng([spec.seed, 1])
        frames = frames + noise_rng.uniform(-spec.noise, spec.noise, size=frames.shape)
    frames = np.clip(frames, 0.0, 1.0)[:, None]
    if spec.label == 1:
        frames = frames[::-1].copy()
    return frames, spec.label


def random_clip_spec(seed: int, t: int, h: int, w: int, label: int = 0) -> ClipSpec:
    """Feasible ClipSpec drawn from ``seed``; the label does not affect the draw."""
    rng = np.random.default_rng([seed, 0])
    kind = "dot" if rng.random() < 0.5 else "bar"
    r = _extent(kind)
    max_speed = (w - 1 - 2 * r) / max(t - 1, 1)
    speed = float(rng.uniform(min(2.0, max_speed), min(4.0, max_speed)))
    x0 = float(rng.uniform(r, w - 1 - r - speed * (t - 1)))
    y0 = float(rng.uniform(DOT_RADIUS, h - 1 - DOT_RADIUS))
    noise = float(rng.uniform(0.0, 0.1))
    return ClipSpec(label, kind, (x0, y0), speed, noise, int(seed))


@dataclass
class Split:
    clips: np.ndarray  # N x T x 1 x H x W
    labels: np.ndarray
    seeds: np.ndarray

    def __len__(self):
        return len(self.labels)


@dataclass
class Dataset:
    train: Split
    val: Split
    n_per_class: int
    frames: int
    height: int
    width: int
    seed: int


def _make_split(seeds, t, h, w) -> Split:
    clips, labels, out_seeds = [], [], []
    for s in seeds:
        for label in (0, 1):
            clip, y = generate_clip(random_clip_spec(int(s), t, h, w, label), t, h, w)
            clips.append(clip)
            labels.append(y)
            out_seeds.append(int(s))
    return Split(np.stack(clips), np.array(labels, dtype=np.int64), np.array(out_seeds))


def make_dataset(n_per_class: int, t: int = 4, h: int = 32, w: int = 32, seed: int = 0) -> Dataset:
    """Train and val splits of ``2 * n_per_class`` clips each.

    Every seed yields a clip and its reversal, both in the same split; the
    two splits use disjoint seeds.
    """
    if n_per_class < 1:
        raise ValueError(f"n_per_class must be >= 1, got {n_per_class}")
    rng = np.random.default_rng(seed)
    seeds = rng.choice(2 ** 31, size=2 * n_per_class, replace=False)
    return Dataset(_make_split(seeds[:n_per_class], t, h, w),
                   _make_split(seeds[n_per_class:], t, h, w),
                   n_per_class, t, h, w, seed)


def export_dataset(ds: Dataset, out_dir: str | Path) -> Path:
    """Write each clip as raw little-endian float64 plus ``index.json``."""
    out = Path(out_dir)
    entries = []
    for name in ("train", "val"):
        split: Split = getattr(ds, name)
        (out / name).mkdir(parents=True, exist_ok=True)
        for i in range(len(split)):
            rel = f"{name}/{i:06d}.f64"
            split.clips[i].astype("<f8").tofile(out / rel)
            entries.append({"path": rel, "label": int(split.labels[i]),
                            "seed": int(split.seeds[i]), "split": name})
    index = {
        "shape": [ds.frames, 1, ds.height, ds.width],
        "dtype": "<f8",
        "n_per_class": ds.n_per_class,
        "seed": ds.seed,
        "clips": entries,
    }
    path = out / "index.json"
    path.write_text(json.dumps(index, indent=1))
    return path


def load_exported(index_path: str | Path) -> list[tuple[np.ndarray, int, int]]:
    index_path = Path(index_path)
    index = json.loads(index_path.read_text())
    shape = tuple(index["shape"])
    return [(np.fromfile(index_path.parent / e["path"], dtype="<f8").reshape(shape),
             e["label"], e["seed"]) for e in index["clips"]]
