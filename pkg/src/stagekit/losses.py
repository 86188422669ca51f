"""Differentiable training objectives: soft Dice loss and the T-staging loss.

The T-staging loss combines an image-level cross-entropy on the maximum
invasion probability with a batch-pooled invasion-ratio term:

    term1 = mean_cases -mu * [g * log(p_stg) + (1 - g) * log(1 - p_stg)]
    term2 = (sum p_inv_t2 + alpha) / (sum p_inv_t2 + sum p_inv_t3 + alpha)

where p_stg = max_i p_cancer_i * (1 - p_rectum_i) per case, and the term2
sums pool over all voxels of all stage-supervised cases in the batch.
Pooling is what gives the ratio its intended pressure: the numerator only
collects invasion from UNDER_T2 cases while the denominator is shared, so
T2 invasion is pushed down exactly when the batch carries enough OVER_T3
invasion mass (sum p_inv_t3 - sum p_inv_t2 > alpha).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .volgrid import StageLabel

PROB_EPS = 1e-7  # log arguments are clamped to [PROB_EPS, 1 - PROB_EPS]
DICE_EPS = 1e-6
SMOOTH_TAU = 50.0


def _stage_g(stage) -> float:
    if isinstance(stage, StageLabel):
        return float(stage.g)
    return float(stage)


def dice_loss(p: torch.Tensor, g: torch.Tensor, eps: float = DICE_EPS) -> torch.Tensor:
    """Soft Dice loss, 1 - (2*sum(p*g)+eps)/(sum(p)+sum(g)+eps).

    A leading channel axis (when p is 4-D) is treated as independent classes
    and the per-class losses are averaged.
    """
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {tuple(p.shape)} vs {tuple(g.shape)}")
    g = g.to(p.dtype)
    if p.dim() == 4:
        dims = tuple(range(1, 4))
    else:
        dims = tuple(range(p.dim()))
    inter = (p * g).sum(dim=dims)
    denom = p.sum(dim=dims) + g.sum(dim=dims)
    return (1.0 - (2.0 * inter + eps) / (denom + eps)).mean()


def staging_probability(
    p_cancer: torch.Tensor,
    p_rectum: torch.Tensor,
    smooth: bool = False,
    tau: float = SMOOTH_TAU,
) -> torch.Tensor:
    """Predicted staging probability: max over voxels of p_cancer * (1 - p_rectum).

    smooth=True swaps the hard max for a log-sum-exp soft max with temperature
    tau so that gradients reach every voxel instead of only the arg-max one.
    The soft max can overshoot the hard max by up to log(N)/tau; downstream
    logs clamp it back into (0, 1).
    """
    if p_cancer.shape != p_rectum.shape:
        raise ValueError(f"shape mismatch: {tuple(p_cancer.shape)} vs {tuple(p_rectum.shape)}")
    if p_cancer.numel() == 0:
        raise ValueError("staging_probability needs at least one voxel")
    inv = p_cancer * (1.0 - p_rectum)
    if smooth:
        return torch.logsumexp(inv.reshape(-1) * tau, dim=0) / tau
    return inv.max()


def invasion_probabilities(p_cancer: torch.Tensor, p_rectum: torch.Tensor, g_stg):
    """Per-voxel invasion probabilities for the T2 and T3 ratio terms."""
    g = _stage_g(g_stg)
    inv = p_cancer * (1.0 - p_rectum)
    return inv * (1.0 - g), inv * (1.0 + g)


def stage_bce(p_stg: torch.Tensor, g_stg, mu: float = 0.1) -> torch.Tensor:
    """mu-scaled Bernoulli cross-entropy on the staging probability."""
    g = _stage_g(g_stg)
    p = torch.clamp(p_stg, PROB_EPS, 1.0 - PROB_EPS)
    return -mu * (g * torch.log(p) + (1.0 - g) * torch.log(1.0 - p))


def staging_loss_terms(
    batch,
    mu: float = 0.1,
    alpha: float = 500.0,
    smooth: bool = False,
    tau: float = SMOOTH_TAU,
):
    """(cross-entropy term, pooled ratio term) of the T-staging loss.

    batch is a sequence of (probability tensor, stage) pairs where the tensor
    is (3, z, y, x) ordered as SEG_CLASSES. The cross-entropy term is averaged
    over cases; the ratio term pools its voxel sums over the whole batch.
    """
    batch = list(batch)
    if not batch:
        raise ValueError("staging loss needs at least one stage-labelled case")
    bce_terms = []
    sum_t2 = None
    sum_t3 = None
    for probs, stage in batch:
        p_rectum, p_cancer = probs[1], probs[2]
        p_stg = staging_probability(p_cancer, p_rectum, smooth=smooth, tau=tau)
        bce_terms.append(stage_bce(p_stg, stage, mu))
        inv_t2, inv_t3 = invasion_probabilities(p_cancer, p_rectum, stage)
        s2, s3 = inv_t2.sum(), inv_t3.sum()
        sum_t2 = s2 if sum_t2 is None else sum_t2 + s2
        sum_t3 = s3 if sum_t3 is None else sum_t3 + s3
    term1 = torch.stack(bce_terms).mean()
    term2 = (sum_t2 + alpha) / (sum_t2 + sum_t3 + alpha)
    return term1, term2


def staging_loss(
    batch,
    mu: float = 0.1,
    alpha: float = 500.0,
    smooth: bool = False,
    tau: float = SMOOTH_TAU,
) -> torch.Tensor:
    """Full T-staging loss (cross-entropy term + pooled ratio term)."""
    term1, term2 = staging_loss_terms(batch, mu=mu, alpha=alpha, smooth=smooth, tau=tau)
    return term1 + term2


@dataclass
class LossBreakdown:
    """Composition of one training objective evaluation.

    total = seg_loss + lam * (stg_bce + stg_ratio) whenever both supervision
    types are present; the staging fields are zero when staging supervision
    is absent or disabled (lam == 0).
    """

    seg_loss: torch.Tensor
    stg_bce: torch.Tensor
    stg_ratio: torch.Tensor
    total: torch.Tensor
    lam: float

    def to_floats(self) -> dict[str, float]:
        return {
            "seg_loss": float(self.seg_loss.detach()),
            "stg_bce": float(self.stg_bce.detach()),
            "stg_ratio": float(self.stg_ratio.detach()),
            "total": float(self.total.detach()),
            "lambda": self.lam,
        }


def total_loss(
    labeled,
    stage_only,
    lam: float = 0.1,
    mu: float = 0.1,
    alpha: float = 500.0,
    smooth: bool = True,
    tau: float = SMOOTH_TAU,
) -> LossBreakdown:
    """Combined objective: mean soft Dice over labelled cases + lam * staging loss.

    labeled: sequence of (probs, gt binary tensor, stage or None); stage_only:
    sequence of (probs, stage). The staging loss pools every stage-bearing
    case, i.e. stage_only cases plus labelled cases whose stage is known.
    """
    labeled = list(labeled)
    stage_only = list(stage_only)
    if not labeled and not stage_only:
        raise ValueError("total_loss needs at least one supervision source")

    zero = torch.zeros(())
    if labeled:
        seg = torch.stack([dice_loss(p, g) for p, g, _ in labeled]).mean()
    else:
        seg = zero

    stage_batch = [(p, s) for p, _, s in labeled if s is not None]
    stage_batch += [(p, s) for p, s in stage_only]
    if stage_batch and lam != 0.0:
        term1, term2 = staging_loss_terms(stage_batch, mu=mu, alpha=alpha, smooth=smooth, tau=tau)
    else:
        term1, term2 = zero, zero

    total = seg + lam * (term1 + term2)
    return LossBreakdown(seg_loss=seg, stg_bce=term1, stg_ratio=term2, total=total, lam=lam)
