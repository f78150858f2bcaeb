"""Deterministic synthetic procedural sequences.

Three progressive-construction tasks stand in for real tutorial data:

* ``stroke`` — a random polyline revealed one anti-aliased segment per frame;
* ``fill``   — a convex polygon outline whose interior fills inward in
  equal-area rings;
* ``blocks`` — axis-aligned rectangles stacked bottom-up, one per frame.

Every frame is a superset of the previous one (composition by elementwise
max), values live in [0, 1], and regeneration from a seed is bit-identical.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from psdt import pgm
from psdt.layout import compose, serpentine_order

TASK_KINDS = ("stroke", "fill", "blocks")

_GRID_BY_K = {4: (2, 2), 9: (3, 3)}


@dataclass(frozen=True)
class SequenceSample:
    frames: tuple[np.ndarray, ...]     # K frames, (f, f) in [0, 1]
    task: str
    seed: int

    @property
    def k(self) -> int:
        return len(self.frames)


@dataclass(frozen=True)
class DatasetManifest:
    counts: dict[str, int]             # samples per task, task order = id order
    k_frames: int = 4
    frame_size: int = 16
    global_seed: int = 0
    train_fraction: float = 0.9

    def __post_init__(self):
        if self.k_frames not in _GRID_BY_K:
            raise ValueError(f"k_frames must be 4 or 9, got {self.k_frames}")
        for task in self.counts:
            if task not in TASK_KINDS:
                raise ValueError(f"unknown task kind {task!r}")
        if not 0.0 < self.train_fraction <= 1.0:
            raise ValueError("train_fraction must be in (0, 1]")

    @property
    def task_names(self) -> tuple[str, ...]:
        return tuple(self.counts)

    @property
    def grid(self) -> tuple[int, int]:
        return _GRID_BY_K[self.k_frames]

    def train_count(self, task: str) -> int:
        return int(round(self.counts[task] * self.train_fraction))


def sample_seed(global_seed: int, task_index: int, sample_index: int) -> int:
    """Stable, well-mixed 64-bit per-sample seed."""
    ss = np.random.SeedSequence([global_seed, task_index, sample_index])
    return int(ss.generate_state(1, np.uint64)[0])


# ---------------------------------------------------------------------------
# rasterization helpers
# ---------------------------------------------------------------------------

def _segment_layer(f: int, p0, p1) -> np.ndarray:
    """Anti-aliased 1px segment: intensity 1.25 - d clipped to [0, 1] where d
    is pixel-center distance to the segment."""
    ys, xs = np.mgrid[0:f, 0:f].astype(np.float64)
    p0 = np.asarray(p0, dtype=np.float64)
    p1 = np.asarray(p1, dtype=np.float64)
    d = p1 - p0
    len2 = float(d @ d)
    if len2 == 0.0:
        dist = np.hypot(ys - p0[0], xs - p0[1])
    else:
        u = ((ys - p0[0]) * d[0] + (xs - p0[1]) * d[1]) / len2
        u = np.clip(u, 0.0, 1.0)
        dist = np.hypot(ys - (p0[0] + u * d[0]), xs - (p0[1] + u * d[1]))
    return np.clip(1.25 - dist, 0.0, 1.0)


def _convex_hull(points: np.ndarray) -> np.ndarray:
    """Andrew monotone chain; points (n, 2) -> hull vertices CCW."""
    pts = sorted(map(tuple, points))

    def cross2(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    def half(seq):
        out = []
        for p in seq:
            while len(out) >= 2 and cross2(out[-2], out[-1], p) <= 0:
                out.pop()
            out.append(p)
        return out

    lower = half(pts)
    upper = half(reversed(pts))
    return np.asarray(lower[:-1] + upper[:-1], dtype=np.float64)


# ---------------------------------------------------------------------------
# generators
# ---------------------------------------------------------------------------

def gen_stroke(seed: int, k: int, f: int) -> SequenceSample:
    """Polyline of k segments revealed one per frame."""
    rng = np.random.default_rng(seed)
    lo, hi = 1.5, f - 2.5
    current = rng.uniform(lo, hi, size=2)
    canvas = np.zeros((f, f))
    frames = []
    for _ in range(k):
        for attempt in range(200):
            nxt = rng.uniform(lo, hi, size=2)
            if np.hypot(*(nxt - current)) < 3.0:
                continue
            layer = _segment_layer(f, current, nxt)
            merged = np.maximum(canvas, layer)
            if (merged > 0.5).sum() > (canvas > 0.5).sum():
                break
        else:
            raise RuntimeError(f"stroke generator stalled (seed {seed})")
        canvas = merged
        current = nxt
        frames.append(canvas.copy())
    return SequenceSample(tuple(frames), "stroke", seed)


def gen_fill(seed: int, k: int, f: int) -> SequenceSample:
    """Convex polygon outline, then interior filled inward in k-1 rings of
    roughly equal pixel area."""
    ys, xs = np.mgrid[0:f, 0:f].astype(np.float64)
    center = np.array([f / 2.0, f / 2.0])
    for attempt in range(50):
        rng = np.random.default_rng([seed, attempt])
        n_pts = int(rng.integers(6, 10))
        ang = np.sort(rng.uniform(0.0, 2 * np.pi, size=n_pts))
        rad = rng.uniform(0.30 * f, 0.46 * f, size=n_pts)
        pts = center + np.stack([rad * np.sin(ang), rad * np.cos(ang)], axis=1)
        hull = _convex_hull(pts)
        n = len(hull)
        if n < 3:
            continue

        # inward distance to the boundary, orientation fixed via the centroid
        centroid = hull.mean(axis=0)
        inside = np.full((f, f), np.inf)
        for i in range(n):
            a, b = hull[i], hull[(i + 1) % n]
            e = b - a
            norm = np.hypot(*e)
            signed = ((ys - a[0]) * e[1] - (xs - a[1]) * e[0]) / norm
            at_centroid = ((centroid[0] - a[0]) * e[1] - (centroid[1] - a[1]) * e[0]) / norm
            inside = np.minimum(inside, np.sign(at_centroid) * signed)
        outline = np.zeros((f, f))
        for i in range(n):
            outline = np.maximum(outline, _segment_layer(f, hull[i], hull[(i + 1) % n]))

        # quantile the rings over pixels the outline has not already covered,
        # so every ring adds new coverage
        interior = (inside > 0.4) & ~(outline > 0.5)
        dists = inside[interior]
        if dists.size >= max(2 * (k - 1), 8):
            break
    else:
        raise RuntimeError(f"fill generator stalled (seed {seed})")

    frames = [outline.copy()]
    canvas = outline.copy()
    for ring in range(1, k):
        q = np.quantile(dists, ring / (k - 1))
        layer = np.where(interior & (inside <= q), 0.9, 0.0)
        canvas = np.maximum(canvas, layer)
        frames.append(canvas.copy())
    return SequenceSample(tuple(frames), "fill", seed)


def gen_blocks(seed: int, k: int, f: int) -> SequenceSample:
    """k rectangles stacked bottom-up, one added per frame."""
    rng = np.random.default_rng(seed)
    usable = f - 2
    props = rng.dirichlet(np.full(k, 2.0))
    heights = np.maximum(2, np.floor(props * usable).astype(int))
    while heights.sum() > usable:
        heights[np.argmax(heights)] -= 1

    canvas = np.zeros((f, f))
    frames = []
    y = f - 1
    for i in range(k):
        h = int(heights[i])
        w = int(rng.integers(max(3, f // 3), f - 1))
        x = int(rng.integers(1, f - w))
        shade = rng.uniform(0.55, 1.0)
        canvas[y - h + 1:y + 1, x:x + w] = shade
        y -= h
        frames.append(canvas.copy())
    return SequenceSample(tuple(frames), "blocks", seed)


_GENERATORS = {"stroke": gen_stroke, "fill": gen_fill, "blocks": gen_blocks}


def generate(task: str, seed: int, k: int, f: int) -> SequenceSample:
    try:
        gen = _GENERATORS[task]
    except KeyError:
        raise ValueError(f"unknown task kind {task!r}") from None
    return gen(seed, k, f)


# ---------------------------------------------------------------------------
# quality proxies
# ---------------------------------------------------------------------------

def coverage(frame: np.ndarray) -> float:
    """Fraction of pixels with value > 0.5."""
    return float((np.asarray(frame) > 0.5).mean())


def monotonicity(frames, delta: float = 0.01) -> float:
    """Fraction of adjacent frame pairs with non-decreasing coverage (up to
    a delta slack). 1.0 for every generated dataset sample."""
    cov = [coverage(fr) for fr in frames]
    if len(cov) < 2:
        return 1.0
    ok = sum(1 for a, b in zip(cov, cov[1:]) if b >= a - delta)
    return ok / (len(cov) - 1)


# ---------------------------------------------------------------------------
# dataset assembly
# ---------------------------------------------------------------------------

def iter_samples(manifest: DatasetManifest):
    """Yield (sample, split) for the whole dataset in a fixed order."""
    for ti, task in enumerate(manifest.task_names):
        n_train = manifest.train_count(task)
        for i in range(manifest.counts[task]):
            seed = sample_seed(manifest.global_seed, ti, i)
            sample = generate(task, seed, manifest.k_frames, manifest.frame_size)
            yield sample, ("train" if i < n_train else "val")


def gen_dataset(manifest: DatasetManifest, out_dir) -> dict:
    """Write serpentine-composed grids as PGM plus a manifest index.

    Returns the written index dict. Bit-identical on regeneration.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows, cols = manifest.grid
    order = serpentine_order(rows, cols)
    records = []
    for sample, split in iter_samples(manifest):
        grid = compose(list(sample.frames), order)
        fname = f"{sample.task}_{sample.seed}.pgm"
        pgm.write_pgm(out / fname, grid)
        records.append({
            "file": fname,
            "task": sample.task,
            "task_id": manifest.task_names.index(sample.task),
            "seed": sample.seed,
            "split": split,
        })
    index = {
        "counts": dict(manifest.counts),
        "task_names": list(manifest.task_names),
        "k_frames": manifest.k_frames,
        "frame_size": manifest.frame_size,
        "global_seed": manifest.global_seed,
        "train_fraction": manifest.train_fraction,
        "grid": [rows, cols],
        "serpentine_order": [list(c) for c in order.cells],
        "samples": records,
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(index, fh, indent=1, sort_keys=True)
    return index


def load_dataset(data_dir):
    """Load a generated dataset: returns (index, grids, task_ids, splits)
    with grids stacked (n, H, W) floats in [0, 1]."""
    root = Path(data_dir)
    path = root / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no dataset manifest at {path}")
    index = json.loads(path.read_text())
    grids, task_ids, splits = [], [], []
    for rec in index["samples"]:
        grids.append(pgm.read_pgm(root / rec["file"]))
        task_ids.append(rec["task_id"])
        splits.append(rec["split"])
    return index, np.stack(grids), np.asarray(task_ids, dtype=np.int64), np.asarray(splits)
