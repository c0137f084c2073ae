"""SMMix training objective: classification, fine-grained and consistency terms."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Literal

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .mixing import MixedBatch, MixPlan


KLDirection = Literal["forward", "reverse"]


class ObjectiveError(ValueError):
    pass


@dataclass(frozen=True)
class LossSwitches:
    """Which loss terms are active.

    ``kl_direction="forward"`` computes D_KL(Y_M || mixture); ``"reverse"``
    swaps the arguments for ablation.
    """

    cls: bool = True
    fine: bool = True
    con: bool = True
    kl_direction: KLDirection = "forward"


# Table-style ablation grid: (mix mode, fine-grained, consistency).
ABLATION_GRID: tuple[tuple[str, bool, bool], ...] = (
    ("cutmix", False, False),
    ("smmix", False, False),
    ("cutmix", False, True),
    ("smmix", True, False),
    ("smmix", False, True),
    ("smmix", True, True),
)


@dataclass
class RegionAggregates:
    x_bar_a: Tensor  # mean token inside the pasted region, (B, d) or (d,)
    x_bar_b: Tensor  # mean token outside it
    inside: np.ndarray
    outside: np.ndarray


@dataclass
class LossBreakdown:
    l_cls: Tensor
    l_fine: Tensor
    l_con: Tensor
    l_total: Tensor

    def values(self) -> dict[str, float]:
        return {k: float(getattr(self, k).data) for k in ("l_cls", "l_fine", "l_con", "l_total")}


def _zero(dtype) -> Tensor:
    return Tensor(np.zeros((), dtype=dtype))


def region_weights(plans: list[MixPlan], dtype=np.float64) -> np.ndarray:
    """(B, 2, N) averaging weights: row 0 over the region, row 1 over the rest."""
    out = []
    for plan in plans:
        m = plan.mask.reshape(-1)
        inside = int(m.sum())
        outside = m.size - inside
        if inside == 0 or outside == 0:
            raise ObjectiveError(
                f"region of {inside} tokens leaves {outside} outside; both sides must be non-empty")
        out.append(np.stack([m / inside, ~m / outside]))
    return np.asarray(out, dtype=dtype)


def aggregate_region_tokens(tokens: Tensor, plans: MixPlan | list[MixPlan]) -> RegionAggregates:
    """Mean output token inside and outside each plan's pasted region.

    ``tokens`` is (N, d) with a single plan, or (B, N, d) with one plan per row.
    """
    single = isinstance(plans, MixPlan)
    plans = [plans] if single else list(plans)
    n = tokens.shape[-2]
    for plan in plans:
        if plan.rows * plan.cols != n:
            raise ObjectiveError(f"plan grid {plan.rows}x{plan.cols} does not match {n} tokens")
    weights = region_weights(plans, tokens.dtype)
    if single:
        pooled = Tensor(weights[0]) @ tokens
        a, b = pooled[0], pooled[1]
    else:
        pooled = Tensor(weights) @ tokens
        a, b = pooled[:, 0, :], pooled[:, 1, :]
    inside = np.array([p.area for p in plans])
    return RegionAggregates(a, b, inside, n - inside)


def fine_grained_loss(agg: RegionAggregates, classify: Callable[[Tensor], Tensor],
                      y_a: np.ndarray, y_b: np.ndarray) -> Tensor:
    """½ (CE(F(x̄_A), y_A) + CE(F(x̄_B), y_B)) with the shared head F."""
    xa, xb = agg.x_bar_a, agg.x_bar_b
    if xa.ndim == 1:
        xa, xb = xa.reshape(1, -1), xb.reshape(1, -1)
        y_a, y_b = np.atleast_2d(y_a), np.atleast_2d(y_b)
    la = ad.cross_entropy_soft(classify(xa), y_a)
    lb = ad.cross_entropy_soft(classify(xb), y_b)
    return (la + lb) * 0.5


def mixture(probs_a: np.ndarray, probs_b: np.ndarray, lambdas) -> np.ndarray:
    lam = np.asarray(lambdas, dtype=np.float64).reshape(-1, 1)
    return lam * np.asarray(probs_a, dtype=np.float64) + (1.0 - lam) * np.asarray(probs_b, dtype=np.float64)


def consistency_loss(probs_m: Tensor, probs_a: np.ndarray, probs_b: np.ndarray, lambdas,
                     direction: KLDirection = "forward") -> Tensor:
    """KL between the mixed-image prediction and the λ-mixture of the unmixed ones.

    The unmixed predictions are plain arrays: no gradient reaches them.
    """
    if isinstance(probs_a, Tensor) or isinstance(probs_b, Tensor):
        raise ObjectiveError("unmixed predictions must be detached arrays")
    target = mixture(probs_a, probs_b, lambdas).astype(probs_m.dtype)
    ad.check_distribution(target, "consistency target mixture")
    if direction == "forward":
        return ad.kl_divergence(probs_m, target)
    if direction == "reverse":
        return ad.kl_divergence(target, probs_m)
    raise ObjectiveError(f"unknown KL direction {direction!r}")


def total_loss(batch: MixedBatch, logits: Tensor, tokens: Tensor,
               classify: Callable[[Tensor], Tensor], unmixed_probs: np.ndarray | None = None,
               switches: LossSwitches = LossSwitches()) -> LossBreakdown:
    """L_total = L_cls + L_fine + L_con with per-term switches.

    The fine-grained term needs max-min region plans (smmix mode); the
    consistency term needs the unmixed predictions of the same batch and a
    region mixing mode (smmix or cutmix). Mixup and unmixed batches only
    carry the classification term.
    """
    dtype = logits.dtype
    l_cls = ad.cross_entropy_soft(logits, batch.labels.astype(dtype)) if switches.cls else _zero(dtype)
    l_fine = _zero(dtype)
    l_con = _zero(dtype)
    regional = batch.mode in ("smmix", "cutmix")
    if batch.mode == "smmix" and not batch.plans:
        raise ObjectiveError("smmix batch carries no mix plans")
    if switches.fine and batch.mode == "smmix":
        agg = aggregate_region_tokens(tokens, batch.plans)
        l_fine = fine_grained_loss(agg, classify, batch.y_a.astype(dtype), batch.y_b.astype(dtype))
    if switches.con and regional:
        if unmixed_probs is None:
            raise ObjectiveError("consistency term needs the unmixed predictions")
        src = batch.source_indices
        probs_m = ad.softmax(logits)
        l_con = consistency_loss(probs_m, unmixed_probs[src], unmixed_probs, batch.lambdas,
                                 switches.kl_direction)
    l_total = l_cls + l_fine + l_con
    return LossBreakdown(l_cls, l_fine, l_con, l_total)
