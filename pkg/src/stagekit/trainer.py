"""Semi-supervised training loop, k-fold cross-validation, and the ablation harness.

A mini-batch mixes labelled cases (segmentation + staging supervision) with
stage-only cases (staging supervision alone). Model selection keeps the
checkpoint with the best mean validation Dice. The ablation harness trains
the three study configurations (Dice loss only; + T-staging loss; + generated
data) under a shared cross-validation plan and reports them side by side.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .losses import LossBreakdown, total_loss
from .segnet import Checkpoint, SegNetConfig, build_segnet, save_checkpoint
from .staging import StagingReport, case_dice, classify_stage, evaluate_cases
from .volgrid import (
    Case,
    FULL_CROPS,
    PHANTOM_CROPS,
    ProbabilityMaps,
    Role,
    SEG_CLASSES,
    StageLabel,
    center_crop,
    crop_around_label,
    load_volume_pack,
    percentile_normalize,
    resample_isotropic,
)


@dataclass
class TrainConfig:
    lr: float = 0.003
    lam: float = 0.1  # weight of the T-staging loss
    mu: float = 0.1
    alpha: float = 500.0
    smooth_tau: float = 50.0
    batch_labeled: int = 4
    batch_stage_only: int = 2
    max_iterations: int = 80000
    validation_interval: int = 100
    early_stop_patience: int | None = None  # validations without improvement
    resample_mm: float = 0.5
    train_crop_zyx: tuple[int, int, int] = FULL_CROPS["TRAIN"]
    eval_crop_zyx: tuple[int, int, int] = FULL_CROPS["EVAL"]
    threshold: float = 0.5
    min_invasion_voxels: int = 1
    seed: int = 0
    net: SegNetConfig = field(default_factory=SegNetConfig)

    def __post_init__(self):
        if self.batch_labeled < 1:
            raise ValueError("batch_labeled must be >= 1")
        if min(self.lr, self.mu, self.alpha, self.validation_interval, self.resample_mm) <= 0:
            raise ValueError("lr, mu, alpha, validation_interval, resample_mm must be positive")
        if self.batch_stage_only < 0 or self.max_iterations < 0 or self.lam < 0:
            raise ValueError("batch_stage_only, max_iterations, lam must be non-negative")

    @classmethod
    def phantom_profile(cls, **overrides) -> "TrainConfig":
        """Desk-scale profile for 64-cube phantoms."""
        defaults = dict(
            max_iterations=2000,
            train_crop_zyx=PHANTOM_CROPS["TRAIN"],
            eval_crop_zyx=PHANTOM_CROPS["EVAL"],
        )
        defaults.update(overrides)
        return cls(**defaults)


@dataclass
class FoldPlan:
    k: int
    assignments: dict[str, int]  # case id -> fold index
    roles: dict[str, str] = field(
        default_factory=lambda: {
            "test": "fold f",
            "validation": "fold (f + 1) % k",
            "train": "remaining folds plus the out-of-CV training pools",
        }
    )

    def fold_ids(self, fold: int) -> list[str]:
        return sorted(i for i, f in self.assignments.items() if f == fold)

    def test_ids(self, fold: int) -> list[str]:
        return self.fold_ids(fold)

    def val_ids(self, fold: int) -> list[str]:
        return self.fold_ids((fold + 1) % self.k)

    def train_ids(self, fold: int) -> list[str]:
        held_out = {fold, (fold + 1) % self.k}
        return sorted(i for i, f in self.assignments.items() if f not in held_out)


def kfold_split(cases, k: int = 5, seed: int = 0) -> FoldPlan:
    """Deterministically partition cases into k folds of near-equal size."""
    ids = [c.id if isinstance(c, Case) else str(c) for c in cases]
    if len(set(ids)) != len(ids):
        raise ValueError("case ids must be unique")
    if len(ids) < k:
        raise ValueError(f"need at least {k} cases for {k} folds, got {len(ids)}")
    order = sorted(ids)
    rng = np.random.default_rng(seed)
    rng.shuffle(order)
    return FoldPlan(k=k, assignments={cid: i % k for i, cid in enumerate(order)})


# ---------------------------------------------------------------------------
# Batch composition
# ---------------------------------------------------------------------------


def preprocess_case(case: Case, phase: str, crop_zyx, resample_mm: float = 0.5) -> Case:
    """The training/evaluation chain: resample -> crop -> percentile-normalize.

    Cases without labels (stage-only supervision) are cropped about the
    volume centre since there is no cancer centroid to anchor on.
    """
    image = resample_isotropic(case.image, resample_mm)
    labels = resample_isotropic(case.labels, resample_mm) if case.labels is not None else None
    resampled = Case(id=case.id, image=image, labels=labels, stage=case.stage, role=case.role)
    if labels is not None and labels.mask("cancer").any():
        cropped = crop_around_label(resampled, phase, crop_zyx)
    else:
        cropped = center_crop(resampled, crop_zyx)
    cropped.image = percentile_normalize(cropped.image)
    return cropped


def seg_target(case: Case) -> np.ndarray:
    """Ground-truth channels (mesorectum, rectum, cancer) as float32 {0,1}."""
    return np.stack([case.labels.mask(n) for n in SEG_CLASSES]).astype(np.float32)


def case_stage(case: Case, threshold: float = 0.5, min_invasion_voxels: int = 1) -> StageLabel | None:
    """Explicit stage when present, else the stage implied by ground-truth labels."""
    if case.stage is not None:
        return case.stage
    if case.labels is not None:
        return classify_stage(case.labels, threshold, min_invasion_voxels)
    return None


@dataclass
class TrainBatch:
    images: torch.Tensor  # (L + S, 1, z, y, x)
    seg_targets: torch.Tensor  # (L, 3, z, y, x)
    labeled_stages: list[StageLabel | None]
    stage_only_stages: list[StageLabel]
    ids: list[str]
    stage_only_fallback: bool = False

    @property
    def n_labeled(self) -> int:
        return self.seg_targets.shape[0]


def compose_batch(
    labeled_pool: list[Case],
    stage_only_pool: list[Case],
    config: TrainConfig,
    rng: np.random.Generator,
) -> TrainBatch:
    """Sample and preprocess one mini-batch (without replacement within the batch).

    An empty stage-only pool with batch_stage_only > 0 falls back to a
    labelled-only batch and flags the event (the baseline study row).
    """
    if len(labeled_pool) < config.batch_labeled:
        raise ValueError(
            f"labeled pool has {len(labeled_pool)} cases, batch needs {config.batch_labeled}"
        )
    fallback = False
    n_stage = config.batch_stage_only
    if n_stage > 0 and not stage_only_pool:
        fallback = True
        n_stage = 0
    if n_stage > len(stage_only_pool):
        raise ValueError(
            f"stage-only pool has {len(stage_only_pool)} cases, batch needs {n_stage}"
        )

    picks_l = rng.choice(len(labeled_pool), size=config.batch_labeled, replace=False)
    picks_s = rng.choice(len(stage_only_pool), size=n_stage, replace=False) if n_stage else []
    labeled = [
        preprocess_case(labeled_pool[i], "TRAIN", config.train_crop_zyx, config.resample_mm)
        for i in picks_l
    ]
    stage_only = [
        preprocess_case(stage_only_pool[i], "TRAIN", config.train_crop_zyx, config.resample_mm)
        for i in picks_s
    ]
    images = np.stack([c.image.data for c in labeled + stage_only])[:, None]
    targets = np.stack([seg_target(c) for c in labeled])
    labeled_stages = [
        case_stage(labeled_pool[i], config.threshold, config.min_invasion_voxels) for i in picks_l
    ]
    stage_only_stages = []
    for i, c in zip(picks_s, stage_only):
        stage = case_stage(stage_only_pool[i], config.threshold, config.min_invasion_voxels)
        if stage is None:
            raise ValueError(f"stage-only case {c.id} has no stage")
        stage_only_stages.append(stage)
    return TrainBatch(
        images=torch.from_numpy(images),
        seg_targets=torch.from_numpy(targets),
        labeled_stages=labeled_stages,
        stage_only_stages=stage_only_stages,
        ids=[c.id for c in labeled + stage_only],
        stage_only_fallback=fallback,
    )


def train_step(model, optimizer, batch: TrainBatch, config: TrainConfig) -> LossBreakdown:
    """One forward/backward/update over a composed batch."""
    probs = model(batch.images)
    n_l = batch.n_labeled
    labeled = [
        (probs[i], batch.seg_targets[i], batch.labeled_stages[i]) for i in range(n_l)
    ]
    stage_only = [
        (probs[n_l + j], s) for j, s in enumerate(batch.stage_only_stages)
    ]
    breakdown = total_loss(
        labeled,
        stage_only,
        lam=config.lam,
        mu=config.mu,
        alpha=config.alpha,
        smooth=True,
        tau=config.smooth_tau,
    )
    if not torch.isfinite(breakdown.total):
        raise RuntimeError(
            f"non-finite loss {breakdown.to_floats()} on batch {batch.ids}"
        )
    optimizer.zero_grad()
    breakdown.total.backward()
    optimizer.step()
    return breakdown


# ---------------------------------------------------------------------------
# Fitting and validation
# ---------------------------------------------------------------------------


def predict_case(model, case: Case, config: TrainConfig, phase: str = "EVAL"):
    """(probability maps, identically preprocessed reference case)."""
    crop = config.eval_crop_zyx if phase == "EVAL" else config.train_crop_zyx
    prepped = preprocess_case(case, phase, crop, config.resample_mm)
    with torch.inference_mode():
        probs = model(torch.from_numpy(prepped.image.data[None, None]))[0].numpy()
    maps = ProbabilityMaps(probs, prepped.image.spacing_mm)
    return maps, prepped


def validation_dice(model, cases: list[Case], config: TrainConfig) -> float:
    """Mean Dice over the three classes, averaged over labelled validation cases."""
    was_training = model.training
    model.eval()
    scores = []
    for case in cases:
        if case.labels is None:
            continue
        maps, ref = predict_case(model, case, config)
        per_class = case_dice(maps, ref.labels, config.threshold)
        scores.append(np.mean([per_class[n] for n in SEG_CLASSES]))
    model.train(was_training)
    if not scores:
        raise ValueError("validation pool has no labelled cases")
    return float(np.mean(scores))


def fit(datasets: dict, config: TrainConfig, run_dir=None) -> Checkpoint:
    """Train up to max_iterations and return the best-validation checkpoint.

    datasets: {"labeled_train": [...], "stage_only": [...], "validation": [...]}.
    Validation runs at iteration 0, every validation_interval iterations, and
    at the final iteration; the returned checkpoint is the Dice argmax (ties
    keep the earliest). When run_dir is given, metrics.csv and interval
    checkpoints are written there.
    """
    labeled_train = list(datasets.get("labeled_train") or [])
    stage_only = list(datasets.get("stage_only") or [])
    validation = list(datasets.get("validation") or [])
    if not labeled_train:
        raise ValueError("labeled_train must be nonempty")
    if not validation:
        raise ValueError("validation pool must be nonempty")

    torch.manual_seed(config.seed)
    model = build_segnet(config.net, config.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr)
    rng = np.random.default_rng(config.seed)

    run_dir = Path(run_dir) if run_dir is not None else None
    metrics_rows: list[dict] = []
    fallback_events = 0

    best: Checkpoint | None = None
    stale = 0

    def validate(iteration: int) -> float:
        nonlocal best, stale
        dice = validation_dice(model, validation, config)
        ckpt = Checkpoint.from_model(model, iteration, dice)
        if run_dir is not None:
            save_checkpoint(ckpt, run_dir / "checkpoints" / f"ckpt-{iteration:06d}")
        if best is None or dice > best.validation_dice:
            best = ckpt
            stale = 0
        else:
            stale += 1
        return dice

    val = validate(0)
    metrics_rows.append({"iteration": 0, "val_dice_mean": val})
    iteration = 0
    while iteration < config.max_iterations:
        iteration += 1
        batch = compose_batch(labeled_train, stage_only, config, rng)
        fallback_events += int(batch.stage_only_fallback)
        breakdown = train_step(model, optimizer, batch, config)
        row = {"iteration": iteration, **breakdown.to_floats()}
        if iteration % config.validation_interval == 0 or iteration == config.max_iterations:
            row["val_dice_mean"] = validate(iteration)
            if (
                config.early_stop_patience is not None
                and stale >= config.early_stop_patience
            ):
                metrics_rows.append(row)
                break
        metrics_rows.append(row)

    best.extra["stage_only_fallback_events"] = fallback_events
    best.extra["iterations_run"] = iteration
    if run_dir is not None:
        _write_metrics_csv(run_dir / "metrics.csv", metrics_rows)
        save_checkpoint(best, run_dir / "best")
    return best


def _write_metrics_csv(path: Path, rows: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fields = ["iteration", "seg_loss", "stg_bce", "stg_ratio", "total", "lambda", "val_dice_mean"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


# ---------------------------------------------------------------------------
# Ablation harness
# ---------------------------------------------------------------------------

ABLATION_ROWS = ("baseline", "semi_supervised", "data_augmentation")


def load_manifest_pools(manifest_path) -> dict[str, list[Case]]:
    """Load every pool of a dataset manifest into memory."""
    manifest_path = Path(manifest_path)
    manifest = json.loads(manifest_path.read_text())
    root = manifest_path.parent
    pools: dict[str, list[Case]] = {}
    for pool, paths in manifest["pools"].items():
        pools[pool] = [load_volume_pack(root / p) for p in paths]
    return pools


def _derived_seed(seed: int, *key: int) -> int:
    return int(np.random.SeedSequence([seed, *key]).generate_state(1)[0])


def run_ablation(
    config: TrainConfig,
    dataset_manifest,
    k: int = 5,
    out_dir=None,
    rows=ABLATION_ROWS,
    return_audit: bool = False,
):
    """Train and evaluate the three study rows under one k-fold CV plan.

    Rows: baseline = Dice loss trained on pools A+B and evaluated on B test
    folds only (it never touches C or D); semi_supervised adds the T-staging
    loss, pool C stage-only batches and C staging evaluation;
    data_augmentation additionally adds pool D to the labelled training set.
    Every row sees identical fold assignments; per-(row, fold) seeds derive
    from config.seed so a rerun reproduces every number. A data-access audit
    (the case ids each row consumed) goes into the written report JSON and is
    returned alongside the reports when return_audit is set.
    """
    pools = dataset_manifest if isinstance(dataset_manifest, dict) else load_manifest_pools(dataset_manifest)
    for pool in ("A", "B", "C"):
        if not pools.get(pool):
            raise ValueError(f"manifest is missing pool {pool}")
    if "data_augmentation" in rows and not pools.get("D"):
        raise ValueError("data_augmentation row requested but pool D is empty")

    plan_b = kfold_split(pools["B"], k, _derived_seed(config.seed, 101))
    plan_c = kfold_split(pools["C"], k, _derived_seed(config.seed, 102))
    by_id = {c.id: c for pool in pools.values() for c in pool}

    reports: dict[str, StagingReport] = {}
    audit: dict[str, list[str]] = {}
    for row_idx, row in enumerate(rows):
        preds, refs = [], []
        touched: set[str] = set()
        for fold in range(k):
            b_train = [by_id[i] for i in plan_b.train_ids(fold)]
            b_val = [by_id[i] for i in plan_b.val_ids(fold)]
            b_test = [by_id[i] for i in plan_b.test_ids(fold)]

            labeled_train = pools["A"] + b_train
            stage_only: list[Case] = []
            lam = 0.0
            test_cases = list(b_test)
            if row != "baseline":
                stage_only = [by_id[i] for i in plan_c.train_ids(fold)]
                lam = config.lam
                test_cases += [by_id[i] for i in plan_c.test_ids(fold)]
            if row == "data_augmentation":
                labeled_train = labeled_train + pools["D"]

            fold_cfg = replace(
                config, lam=lam, seed=_derived_seed(config.seed, 7, row_idx, fold)
            )
            run_dir = None
            if out_dir is not None:
                run_dir = Path(out_dir) / row / f"fold{fold}"
            ckpt = fit(
                {"labeled_train": labeled_train, "stage_only": stage_only, "validation": b_val},
                fold_cfg,
                run_dir=run_dir,
            )
            model = ckpt.build_model()
            model.eval()
            for case in test_cases:
                maps, ref = predict_case(model, case, config)
                preds.append(maps)
                refs.append(ref)
            touched.update(c.id for c in labeled_train + stage_only + b_val + test_cases)

        reports[row] = evaluate_cases(preds, refs, config.threshold, config.min_invasion_voxels)
        audit[row] = sorted(touched)

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "ablation_report.json").write_text(
            json.dumps(ablation_report_dict(reports, audit), indent=2, sort_keys=True)
        )
    if return_audit:
        return reports, audit
    return reports


def ablation_report_dict(reports: dict[str, StagingReport], audit: dict | None = None) -> dict:
    """Study-table layout: one row per configuration, Dice columns plus
    sensitivity/specificity."""
    table = {
        row: {
            "dice": {k: rep.dice_per_class.get(k) for k in
                     ("mesorectum", "rectum", "cancer", "invasion_area")},
            "sensitivity": rep.sensitivity,
            "specificity": rep.specificity,
        }
        for row, rep in reports.items()
    }
    out = {"rows": table, "row_order": list(reports)}
    if audit is not None:
        out["data_access_audit"] = audit
    return out
