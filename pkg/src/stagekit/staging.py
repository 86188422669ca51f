"""Rule-based T-stage classification and segmentation/staging metrics.

The staging rule: a case is OVER_T3 exactly when the (binarized) cancer
region extends outside the (binarized) rectum region.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .volgrid import Case, LabelVolume, ProbabilityMaps, StageLabel


def invasion_mask(cancer_mask: np.ndarray, rectum_mask: np.ndarray) -> np.ndarray:
    """Voxels labelled cancer but not rectum (the invasion area)."""
    cancer_mask = np.asarray(cancer_mask, dtype=bool)
    rectum_mask = np.asarray(rectum_mask, dtype=bool)
    if cancer_mask.shape != rectum_mask.shape:
        raise ValueError(f"shape mismatch: {cancer_mask.shape} vs {rectum_mask.shape}")
    return cancer_mask & ~rectum_mask


def _cancer_rectum_masks(pred, threshold: float):
    if isinstance(pred, LabelVolume):
        return pred.mask("cancer"), pred.mask("rectum")
    if isinstance(pred, ProbabilityMaps):
        return pred.cancer > threshold, pred.rectum > threshold
    raise TypeError(f"expected ProbabilityMaps or LabelVolume, got {type(pred).__name__}")


def classify_stage(pred, threshold: float = 0.5, min_invasion_voxels: int = 1) -> StageLabel:
    """OVER_T3 iff at least min_invasion_voxels voxels invade beyond the rectum.

    Probability maps are binarized at `threshold` (cancer strictly above,
    rectum strictly above, so invasion means p_cancer > t and p_rectum <= t);
    binarization is a no-op for LabelVolume input.
    """
    cancer, rectum = _cancer_rectum_masks(pred, threshold)
    n_invading = int(np.count_nonzero(invasion_mask(cancer, rectum)))
    return StageLabel.OVER_T3 if n_invading >= min_invasion_voxels else StageLabel.UNDER_T2


def dice_score(pred_mask: np.ndarray, gt_mask: np.ndarray) -> float:
    """2|P∩G| / (|P|+|G|); two empty masks score 1.0 by convention."""
    pred_mask = np.asarray(pred_mask, dtype=bool)
    gt_mask = np.asarray(gt_mask, dtype=bool)
    if pred_mask.shape != gt_mask.shape:
        raise ValueError(f"shape mismatch: {pred_mask.shape} vs {gt_mask.shape}")
    denom = int(np.count_nonzero(pred_mask)) + int(np.count_nonzero(gt_mask))
    if denom == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(pred_mask & gt_mask)) / denom


def staging_confusion(pairs) -> tuple[float | None, float | None]:
    """(sensitivity, specificity) over (predicted, ground-truth) stage pairs.

    Sensitivity = correctly predicted OVER_T3 / ground-truth OVER_T3;
    specificity = correctly predicted UNDER_T2 / ground-truth UNDER_T2.
    Either value is None when its denominator set is empty.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("staging_confusion needs at least one (pred, gt) pair")
    gt_t3 = sum(1 for _, g in pairs if g is StageLabel.OVER_T3)
    gt_t2 = len(pairs) - gt_t3
    hit_t3 = sum(1 for p, g in pairs if g is StageLabel.OVER_T3 and p is StageLabel.OVER_T3)
    hit_t2 = sum(1 for p, g in pairs if g is StageLabel.UNDER_T2 and p is StageLabel.UNDER_T2)
    sensitivity = hit_t3 / gt_t3 if gt_t3 else None
    specificity = hit_t2 / gt_t2 if gt_t2 else None
    return sensitivity, specificity


@dataclass
class StagingReport:
    """Per-class Dice plus staging sensitivity/specificity over a case set."""

    dice_per_class: dict[str, float]
    sensitivity: float | None
    specificity: float | None
    per_case_stages: list[tuple[str, StageLabel, StageLabel]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "dice": dict(self.dice_per_class),
            "sensitivity": self.sensitivity,
            "specificity": self.specificity,
            "cases": [
                {"id": cid, "predicted": p.value, "ground_truth": g.value}
                for cid, p, g in self.per_case_stages
            ],
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))


def case_dice(pred, ref_labels: LabelVolume, threshold: float = 0.5) -> dict[str, float]:
    """Dice of one prediction against ground truth, per class plus invasion area."""
    scores = {}
    for name in ("mesorectum", "rectum", "cancer"):
        if isinstance(pred, LabelVolume):
            pred_mask = pred.mask(name)
        else:
            pred_mask = pred.channel(name) > threshold
        scores[name] = dice_score(pred_mask, ref_labels.mask(name))
    pred_cancer, pred_rectum = _cancer_rectum_masks(pred, threshold)
    scores["invasion_area"] = dice_score(
        invasion_mask(pred_cancer, pred_rectum),
        invasion_mask(ref_labels.mask("cancer"), ref_labels.mask("rectum")),
    )
    return scores


def evaluate_cases(
    preds,
    refs,
    threshold: float = 0.5,
    min_invasion_voxels: int = 1,
) -> StagingReport:
    """Aggregate metrics over aligned prediction/reference lists.

    Dice (including the invasion area) is averaged over cases that carry
    labels; staging metrics cover cases with a stage, which for labelled
    references defaults to the stage implied by their ground-truth masks.
    """
    preds = list(preds)
    refs = list(refs)
    if len(preds) != len(refs):
        raise ValueError(f"got {len(preds)} predictions for {len(refs)} references")

    dice_sums: dict[str, float] = {}
    n_labelled = 0
    stage_pairs: list[tuple[str, StageLabel, StageLabel]] = []
    for pred, ref in zip(preds, refs):
        if ref.labels is not None:
            for name, value in case_dice(pred, ref.labels, threshold).items():
                dice_sums[name] = dice_sums.get(name, 0.0) + value
            n_labelled += 1
        gt_stage = ref.stage
        if gt_stage is None and ref.labels is not None:
            gt_stage = classify_stage(ref.labels, threshold, min_invasion_voxels)
        if gt_stage is not None:
            pred_stage = classify_stage(pred, threshold, min_invasion_voxels)
            stage_pairs.append((ref.id, pred_stage, gt_stage))

    if n_labelled == 0 and not stage_pairs:
        raise ValueError("no reference case carries labels or a stage")

    dice = {name: s / n_labelled for name, s in dice_sums.items()}
    if stage_pairs:
        sensitivity, specificity = staging_confusion([(p, g) for _, p, g in stage_pairs])
    else:
        sensitivity = specificity = None
    return StagingReport(
        dice_per_class=dice,
        sensitivity=sensitivity,
        specificity=specificity,
        per_case_stages=stage_pairs,
    )
