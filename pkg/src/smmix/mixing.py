"""CutMix, Mixup and max-min attention region mixing.

All regions are token aligned: a region of ``h x w`` tokens covers
``h*P x w*P`` pixels. Pairing is by batch reversal: output ``i`` keeps image
``i`` as the target (background) and takes its pasted region, or its blend
partner, from image ``B-1-i`` (the source).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Literal

import numpy as np

DeltaMode = Literal["uniform", "fixed", "unit"]
MixMode = Literal["smmix", "mixup", "cutmix", "none"]

DELTA_RANGES = {"uniform": (0.25, 0.75), "unit": (0.0, 1.0)}
MAX_DELTA_RESAMPLES = 8
MIXUP_ALPHA = 0.8
CUTMIX_ALPHA = 1.0


class MixError(ValueError):
    pass


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Counter-based (Philox) generator keyed by ``seed`` and a stream path.

    Distinct stream paths give independent generators, so each consumer
    (shuffling, mixing, init) can be split off the run seed reproducibly.
    """
    ss = np.random.SeedSequence([int(seed), *map(int, stream)])
    return np.random.Generator(np.random.Philox(ss))


@dataclass
class MixPlan:
    """Geometry of one paste. Corners are top-left grid indices."""

    source_index: int
    target_index: int
    h: int
    w: int
    source_top_left: tuple[int, int]
    target_top_left: tuple[int, int]
    rows: int
    cols: int
    delta: float | None = None

    def __post_init__(self):
        if not (0 <= self.h <= self.rows and 0 <= self.w <= self.cols):
            raise MixError(f"region {self.h}x{self.w} does not fit grid {self.rows}x{self.cols}")
        for name, (t, l) in (("source", self.source_top_left), ("target", self.target_top_left)):
            if not (0 <= t <= self.rows - self.h and 0 <= l <= self.cols - self.w):
                raise MixError(f"{name} region at {(t, l)} leaves the {self.rows}x{self.cols} grid")

    @property
    def source_center(self) -> tuple[int, int]:
        return self.source_top_left[0] + self.h // 2, self.source_top_left[1] + self.w // 2

    @property
    def target_center(self) -> tuple[int, int]:
        return self.target_top_left[0] + self.h // 2, self.target_top_left[1] + self.w // 2

    @property
    def area(self) -> int:
        return self.h * self.w

    @property
    def lambda_m(self) -> Fraction:
        """Exact area ratio of the pasted source region, h·w / (rows·cols)."""
        return Fraction(self.h * self.w, self.rows * self.cols)

    @property
    def mask(self) -> np.ndarray:
        """(rows, cols) bool grid, True where the source region sits in the output."""
        m = np.zeros((self.rows, self.cols), dtype=bool)
        t, l = self.target_top_left
        m[t:t + self.h, l:l + self.w] = True
        return m

    def to_record(self) -> str:
        return json.dumps({
            "source_index": self.source_index,
            "target_index": self.target_index,
            "delta": self.delta,
            "h": self.h,
            "w": self.w,
            "source_center": list(self.source_center),
            "target_center": list(self.target_center),
            "lambda_m": float(self.lambda_m),
        })


@dataclass
class MixedBatch:
    images: np.ndarray  # (B, C, H, W)
    labels: np.ndarray  # (B, C) mixed soft labels
    y_a: np.ndarray  # (B, C) source labels
    y_b: np.ndarray  # (B, C) target labels
    lambdas: np.ndarray  # (B,) weight of the source label
    mode: MixMode
    plans: list[MixPlan] | None = None
    source_indices: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.source_indices is None:
            self.source_indices = pair_indices(len(self.images))


def pair_indices(batch_size: int) -> np.ndarray:
    return np.arange(batch_size)[::-1].copy()


def _check_batch(images: np.ndarray, labels: np.ndarray) -> None:
    if len(images) < 2:
        raise MixError(f"mixing needs a batch of at least 2 images, got {len(images)}")
    if len(labels) != len(images):
        raise MixError(f"{len(images)} images but {len(labels)} label rows")


# -- side ratio --------------------------------------------------------

def sample_side_ratio(rng: np.random.Generator, mode: DeltaMode = "uniform") -> float:
    if mode == "fixed":
        return 0.5
    if mode not in DELTA_RANGES:
        raise MixError(f"unknown delta mode {mode!r}")
    lo, hi = DELTA_RANGES[mode]
    while True:
        d = float(rng.uniform(lo, hi))
        if d > lo:  # open interval
            return d


def region_size(delta: float, rows: int, cols: int) -> tuple[int, int]:
    return int(np.floor(delta * rows)), int(np.floor(delta * cols))


def sample_region_size(rng: np.random.Generator, rows: int, cols: int,
                       mode: DeltaMode = "uniform") -> tuple[float, int, int]:
    """Draw δ and the token region it implies; empty or full regions are redrawn."""
    for _ in range(MAX_DELTA_RESAMPLES + 1):
        delta = sample_side_ratio(rng, mode)
        h, w = region_size(delta, rows, cols)
        if 0 < h < rows and 0 < w < cols:
            return delta, h, w
    h, w = region_size(0.5, rows, cols)
    return 0.5, max(h, 1), max(w, 1)


# -- window search -----------------------------------------------------

def window_sums(alpha: np.ndarray, h: int, w: int) -> np.ndarray:
    """Sum over every h x w window; entry (t, l) is the window with top-left (t, l).

    Uses a zero-padded 2-D prefix sum, so the cost is O(rows * cols).
    """
    a = np.asarray(alpha, dtype=np.float64)
    rows, cols = a.shape
    if not (1 <= h <= rows and 1 <= w <= cols):
        raise MixError(f"window {h}x{w} does not fit grid {rows}x{cols}")
    ps = np.zeros((rows + 1, cols + 1))
    ps[1:, 1:] = a.cumsum(axis=0).cumsum(axis=1)
    return ps[h:, w:] - ps[:-h, w:] - ps[h:, :-w] + ps[:-h, :-w]


def _first_extreme(sums: np.ndarray, largest: bool, scale: float) -> tuple[int, int]:
    # prefix-sum differences carry rounding noise; treat near-equal windows as
    # tied and resolve ties by the smallest row-major top-left index
    tol = 16 * np.finfo(np.float64).eps * max(scale, np.finfo(np.float64).tiny) * sums.size
    best = sums.max() if largest else sums.min()
    hit = sums >= best - tol if largest else sums <= best + tol
    flat = int(np.flatnonzero(hit.reshape(-1))[0])
    return divmod(flat, sums.shape[1])


def best_window(alpha: np.ndarray, h: int, w: int, largest: bool) -> tuple[int, int]:
    """Top-left corner of the max (or min) window."""
    sums = window_sums(alpha, h, w)
    return _first_extreme(sums, largest, float(np.abs(alpha).sum()))


def to_center(top_left: tuple[int, int], h: int, w: int) -> tuple[int, int]:
    return top_left[0] + h // 2, top_left[1] + w // 2


def to_top_left(center: tuple[int, int], h: int, w: int) -> tuple[int, int]:
    return center[0] - h // 2, center[1] - w // 2


def select_regions(alpha_src: np.ndarray, alpha_tgt: np.ndarray, h: int, w: int
                   ) -> tuple[tuple[int, int], tuple[int, int]]:
    """Centers of the source's max-score window and the target's min-score window."""
    src = best_window(alpha_src, h, w, largest=True)
    tgt = best_window(alpha_tgt, h, w, largest=False)
    return to_center(src, h, w), to_center(tgt, h, w)


# -- pasting -----------------------------------------------------------

def paste_regions(images: np.ndarray, plans: list[MixPlan], patch_size: int) -> np.ndarray:
    """Copy each plan's source window onto its target window (pure copy)."""
    out = images.copy()
    p = patch_size
    for plan in plans:
        st, sl = plan.source_top_left
        tt, tl = plan.target_top_left
        hp, wp = plan.h * p, plan.w * p
        out[plan.target_index, :, tt * p:tt * p + hp, tl * p:tl * p + wp] = \
            images[plan.source_index, :, st * p:st * p + hp, sl * p:sl * p + wp]
    return out


def mix_labels(labels: np.ndarray, source: np.ndarray, lambdas: np.ndarray) -> np.ndarray:
    lam = np.asarray(lambdas, dtype=np.float64)[:, None]
    return lam * labels[source] + (1.0 - lam) * labels


def _from_plans(images, labels, plans, patch_size, mode) -> MixedBatch:
    source = np.array([p.source_index for p in plans])
    lambdas = np.array([float(p.lambda_m) for p in plans])
    mixed = paste_regions(images, plans, patch_size)
    return MixedBatch(mixed, mix_labels(labels, source, lambdas), labels[source], labels,
                      lambdas, mode, plans, source)


def apply_smmix(images: np.ndarray, labels: np.ndarray, alphas: np.ndarray, rng: np.random.Generator,
                patch_size: int, delta_mode: DeltaMode = "uniform", delta: float | None = None
                ) -> MixedBatch:
    """Max-min attention region mixing for a batch.

    ``alphas`` is (B, rows, cols) image attention scores of the unmixed images.
    One δ is drawn per batch; every pair gets its own source/target windows.
    """
    images = np.asarray(images)
    labels = np.asarray(labels, dtype=np.float64)
    _check_batch(images, labels)
    alphas = np.asarray(alphas, dtype=np.float64)
    if len(alphas) != len(images):
        raise MixError(f"{len(images)} images but {len(alphas)} attention grids")
    rows, cols = alphas.shape[1:]
    if images.shape[-2:] != (rows * patch_size, cols * patch_size):
        raise MixError(f"images {images.shape[-2:]} do not match a {rows}x{cols} grid of {patch_size}px patches")
    if delta is None:
        delta, h, w = sample_region_size(rng, rows, cols, delta_mode)
    else:
        h, w = region_size(delta, rows, cols)
    source = pair_indices(len(images))
    plans = []
    for i, s in enumerate(source):
        src = best_window(alphas[s], h, w, largest=True)
        tgt = best_window(alphas[i], h, w, largest=False)
        plans.append(MixPlan(int(s), i, h, w, src, tgt, rows, cols, delta))
    return _from_plans(images, labels, plans, patch_size, "smmix")


def cutmix_plans(batch_size: int, rows: int, cols: int, rng: np.random.Generator,
                 lam: float | None = None) -> list[MixPlan]:
    """Random token-aligned boxes at the same location in source and target.

    λ ~ Beta(1, 1) sets the intended source area; the box is clipped at the
    border, so the realised area ratio is recomputed from the box.
    """
    if lam is None:
        lam = float(rng.beta(CUTMIX_ALPHA, CUTMIX_ALPHA))
    h = int(round(np.sqrt(lam) * rows))
    w = int(round(np.sqrt(lam) * cols))
    source = pair_indices(batch_size)
    plans = []
    for i, s in enumerate(source):
        cy = int(rng.integers(rows))
        cx = int(rng.integers(cols))
        t0, t1 = np.clip([cy - h // 2, cy - h // 2 + h], 0, rows)
        l0, l1 = np.clip([cx - w // 2, cx - w // 2 + w], 0, cols)
        corner = (int(t0), int(l0))
        plans.append(MixPlan(int(s), i, int(t1 - t0), int(l1 - l0), corner, corner, rows, cols))
    return plans


def apply_cutmix(images: np.ndarray, labels: np.ndarray, rng: np.random.Generator, patch_size: int,
                 lam: float | None = None, plans: list[MixPlan] | None = None) -> MixedBatch:
    images = np.asarray(images)
    labels = np.asarray(labels, dtype=np.float64)
    _check_batch(images, labels)
    rows, cols = images.shape[-2] // patch_size, images.shape[-1] // patch_size
    if plans is None:
        plans = cutmix_plans(len(images), rows, cols, rng, lam)
    return _from_plans(images, labels, plans, patch_size, "cutmix")


def apply_mixup(images: np.ndarray, labels: np.ndarray, rng: np.random.Generator,
                lam: float | None = None, alpha: float = MIXUP_ALPHA) -> MixedBatch:
    """Convex blend lam * x_source + (1 - lam) * x_target, same for labels."""
    images = np.asarray(images)
    labels = np.asarray(labels, dtype=np.float64)
    _check_batch(images, labels)
    if lam is None:
        lam = float(rng.beta(alpha, alpha))
    source = pair_indices(len(images))
    mixed = (lam * images[source] + (1.0 - lam) * images).astype(images.dtype, copy=False)
    lambdas = np.full(len(images), lam)
    return MixedBatch(mixed, mix_labels(labels, source, lambdas), labels[source], labels,
                      lambdas, "mixup", None, source)


def no_mix(images: np.ndarray, labels: np.ndarray) -> MixedBatch:
    labels = np.asarray(labels, dtype=np.float64)
    idx = np.arange(len(images))
    return MixedBatch(np.asarray(images), labels, labels, labels, np.zeros(len(images)),
                      "none", None, idx)
