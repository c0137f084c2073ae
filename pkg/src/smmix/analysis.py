"""Diagnostics on mixed images: region attention averages, mixed top-k
accuracy, and attention heat-map export."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from . import autodiff as ad
from . import mixing
from .mixing import MixPlan
from .vit import AttentionScoreGrid, VisionTransformer, image_attention_scores


class AnalysisError(ValueError):
    pass


@dataclass(frozen=True)
class RegionIndexSets:
    """Flat token indices of the pasted (source) region and the rest (target)."""

    source: np.ndarray
    target: np.ndarray
    n: int

    def __post_init__(self):
        s = np.asarray(self.source, dtype=np.int64)
        t = np.asarray(self.target, dtype=np.int64)
        object.__setattr__(self, "source", s)
        object.__setattr__(self, "target", t)
        if len(s) == 0 or len(t) == 0:
            raise AnalysisError(f"both regions must be non-empty (got {len(s)} source, {len(t)} target)")
        both = np.concatenate([s, t])
        if len(both) != self.n or not np.array_equal(np.sort(both), np.arange(self.n)):
            raise AnalysisError(f"index sets do not partition {self.n} tokens")

    @property
    def n_s(self) -> int:
        return len(self.source)

    @property
    def n_t(self) -> int:
        return len(self.target)

    @classmethod
    def from_mask(cls, mask: np.ndarray) -> "RegionIndexSets":
        flat = np.asarray(mask, dtype=bool).reshape(-1)
        return cls(np.flatnonzero(flat), np.flatnonzero(~flat), flat.size)

    @classmethod
    def from_plan(cls, plan: MixPlan) -> "RegionIndexSets":
        return cls.from_mask(plan.mask)


@dataclass(frozen=True)
class RegionAttentionStats:
    ss: float  # source queries -> source keys
    st: float  # source queries -> target keys
    ts: float
    tt: float

    def as_tuple(self) -> tuple[float, float, float, float]:
        return self.ss, self.st, self.ts, self.tt


def head_average(attention: np.ndarray, has_class_token: bool = False) -> np.ndarray:
    """(heads, N', N') or (N', N') -> (N, N) over image tokens only."""
    a = np.asarray(attention, dtype=np.float64)
    if a.ndim == 3:
        a = a.mean(axis=0)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise AnalysisError(f"expected a square attention matrix, got shape {a.shape}")
    return a[1:, 1:] if has_class_token else a


def region_attention_stats(attention: np.ndarray, regions: RegionIndexSets,
                           has_class_token: bool = False) -> RegionAttentionStats:
    """Average attention between the two regions, normalised by the pair counts."""
    a = head_average(attention, has_class_token)
    if a.shape[0] != regions.n:
        raise AnalysisError(f"attention covers {a.shape[0]} tokens, regions cover {regions.n}")
    s, t = regions.source, regions.target
    ns, nt = regions.n_s, regions.n_t
    return RegionAttentionStats(
        ss=float(a[np.ix_(s, s)].sum() / (ns * ns)),
        st=float(a[np.ix_(s, t)].sum() / (ns * nt)),
        ts=float(a[np.ix_(t, s)].sum() / (nt * ns)),
        tt=float(a[np.ix_(t, t)].sum() / (nt * nt)),
    )


def row_identity_residuals(stats: RegionAttentionStats, regions: RegionIndexSets) -> tuple[float, float]:
    """|N_s·ss + N_t·st − 1| and |N_s·ts + N_t·tt − 1|; zero for row-stochastic attention."""
    ns, nt = regions.n_s, regions.n_t
    return abs(ns * stats.ss + nt * stats.st - 1.0), abs(ns * stats.ts + nt * stats.tt - 1.0)


# -- mixed validation set ----------------------------------------------

@dataclass
class MixedSet:
    images: np.ndarray  # (M, C, H, W)
    y_a: np.ndarray  # source class index
    y_b: np.ndarray  # target class index
    plans: list[MixPlan]
    mode: str


def _partners(labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """For each image, a random partner index with a different label."""
    labels = np.asarray(labels)
    out = np.empty(len(labels), dtype=np.int64)
    for i, y in enumerate(labels):
        pool = np.flatnonzero(labels != y)
        if len(pool) == 0:
            raise AnalysisError("every image has the same label; no y_A != y_B pairs exist")
        out[i] = pool[rng.integers(len(pool))]
    return out


def build_mixed_set(model: VisionTransformer, images: np.ndarray, labels: np.ndarray, mode: str,
                    seed: int = 0, chunk: int = 100, delta_mode: str = "uniform") -> MixedSet:
    """Mix every image (as target) with a partner of another class (as source).

    ``smmix`` uses ``model``'s own attention scores on the clean images;
    ``cutmix`` uses random boxes, redrawn while any box is empty or covers
    the whole image. One region size is drawn per chunk.
    """
    if mode not in ("smmix", "cutmix"):
        raise AnalysisError(f"mixed set needs a region mixing mode, got {mode!r}")
    labels = np.asarray(labels, dtype=np.int64)
    rng = mixing.make_rng(seed, 7)
    partners = _partners(labels, rng)
    cfg = model.cfg
    eye = np.eye(cfg.num_classes)
    out_images, plans = [], []
    for start in range(0, len(images), chunk):
        tgt = np.arange(start, min(start + chunk, len(images)))
        src = partners[tgt]
        # reversal pairing: position i (target) takes from position 2m-1-i
        order = np.concatenate([tgt, src[::-1]])
        batch = images[order].astype(model.dtype, copy=False)
        onehot = eye[labels[order]]
        if mode == "smmix":
            with ad.no_grad():
                out = model(batch)
            alphas = image_attention_scores(out.attention[cfg.attn_block], cfg)
            mixed = mixing.apply_smmix(batch, onehot, alphas, rng, cfg.patch_size, delta_mode)
        else:
            # a mixed image needs tokens of both classes: redraw empty or full boxes
            while True:
                mixed = mixing.apply_cutmix(batch, onehot, rng, cfg.patch_size)
                if all(0 < p.h * p.w < p.rows * p.cols for p in mixed.plans[:len(tgt)]):
                    break
        m = len(tgt)
        out_images.append(mixed.images[:m])
        plans.extend(mixed.plans[:m])
    return MixedSet(np.concatenate(out_images), labels[partners], labels, plans, mode)


def mixed_top_k_from_logits(logits: np.ndarray, y_a: np.ndarray, y_b: np.ndarray) -> dict[str, float]:
    """top1: argmax in {y_A, y_B}; top2: the two best classes are exactly {y_A, y_B}."""
    logits = np.asarray(logits)
    y_a = np.asarray(y_a, dtype=np.int64)
    y_b = np.asarray(y_b, dtype=np.int64)
    if np.any(y_a == y_b):
        raise AnalysisError(f"{int(np.sum(y_a == y_b))} items have y_A == y_B")
    if len(y_a) == 0:
        return {"top1": float("nan"), "top2": float("nan"), "n": 0}
    order = np.argsort(-logits, axis=1, kind="stable")
    first, second = order[:, 0], order[:, 1]
    top1 = (first == y_a) | (first == y_b)
    top2 = ((first == y_a) & (second == y_b)) | ((first == y_b) & (second == y_a))
    return {"top1": float(top1.mean()), "top2": float(top2.mean()), "n": int(len(y_a))}


def mixed_top_k_accuracy(model: VisionTransformer, mixed: MixedSet, batch_size: int = 250) -> dict[str, float]:
    from .train import predict_logits
    return mixed_top_k_from_logits(predict_logits(model, mixed.images, batch_size), mixed.y_a, mixed.y_b)


def attention_stats_for_set(model: VisionTransformer, mixed: MixedSet, block: int | None = None,
                            batch_size: int = 100) -> list[RegionAttentionStats]:
    """Region statistics of each mixed image at ``block`` (default: the score block)."""
    cfg = model.cfg
    block = cfg.attn_block if block is None else block
    if not 1 <= block <= cfg.depth:
        raise AnalysisError(f"block {block} outside 1..{cfg.depth}")
    stats = []
    for start in range(0, len(mixed.images), batch_size):
        with ad.no_grad():
            out = model(mixed.images[start:start + batch_size].astype(model.dtype, copy=False),
                        record_blocks=[block])
        for k, attn in enumerate(out.attention[block]):
            regions = RegionIndexSets.from_plan(mixed.plans[start + k])
            stats.append(region_attention_stats(attn, regions, cfg.use_class_token))
    return stats


def write_stats_csv(path: str | Path, stats: Iterable[RegionAttentionStats]) -> Path:
    """One row per image plus a final ``mean`` row."""
    path = Path(path)
    stats = list(stats)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["image", "ss", "st", "ts", "tt"])
        for i, s in enumerate(stats):
            w.writerow([i, *map(repr, s.as_tuple())])
        if stats:
            mean = np.mean([s.as_tuple() for s in stats], axis=0)
            w.writerow(["mean", *map(repr, map(float, mean))])
    return path


# -- image files -------------------------------------------------------

def write_pnm(path: str | Path, image: np.ndarray) -> Path:
    """Binary PGM for (H, W) or PPM for (H, W, 3) uint8 data."""
    img = np.asarray(image)
    if img.dtype != np.uint8:
        raise AnalysisError(f"PNM export needs uint8 pixels, got {img.dtype}")
    if img.ndim == 2:
        magic = b"P5"
    elif img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    else:
        raise AnalysisError(f"cannot write image of shape {img.shape}")
    path = Path(path)
    with open(path, "wb") as f:
        f.write(magic + f"\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(img).tobytes())
    return path


def read_pnm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        fields.append(raw[pos:end])
        pos = end
    pos += 1  # single whitespace before the raster
    magic, w, h = fields[0], int(fields[1]), int(fields[2])
    if magic not in (b"P5", b"P6"):
        raise AnalysisError(f"{path}: unsupported PNM magic {magic!r}")
    shape = (h, w) if magic == b"P5" else (h, w, 3)
    return np.frombuffer(raw, dtype=np.uint8, count=int(np.prod(shape)), offset=pos).reshape(shape)


def to_uint8_image(chw: np.ndarray) -> np.ndarray:
    """(C, H, W) floats in [0, 1] -> (H, W) or (H, W, 3) uint8."""
    img = np.clip(np.rint(np.asarray(chw, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    return img[0] if img.shape[0] == 1 else np.moveaxis(img, 0, -1)


def export_attention_map(alpha: AttentionScoreGrid | np.ndarray, path: str | Path,
                         scale: int = 1) -> tuple[Path, Path]:
    """Min-max normalised 8-bit PGM of α (each token ``scale`` px wide) and a CSV of raw values."""
    a = np.asarray(alpha.alpha if isinstance(alpha, AttentionScoreGrid) else alpha, dtype=np.float64)
    if a.ndim != 2 or not np.all(np.isfinite(a)):
        raise AnalysisError("α must be a finite 2-D grid")
    lo, hi = a.min(), a.max()
    norm = (a - lo) / (hi - lo) if hi > lo else np.zeros_like(a)
    img = np.rint(norm * 255.0).astype(np.uint8)
    if scale > 1:
        img = np.kron(img, np.ones((scale, scale), dtype=np.uint8))
    path = Path(path)
    pgm = write_pnm(path.with_suffix(".pgm"), img)
    csv_path = path.with_suffix(".csv")
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f)
        for row in a:
            w.writerow([repr(float(v)) for v in row])
    return pgm, csv_path


def read_attention_csv(path: str | Path) -> np.ndarray:
    with open(path, newline="") as f:
        return np.array([[float(v) for v in row] for row in csv.reader(f)])
