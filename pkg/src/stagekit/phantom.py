"""Procedural pelvic phantoms with ground-truth labels and stage by construction.

A phantom is a concentric arrangement (mesorectum ellipsoid around a rectum
ellipsoid, cancer blob attached to the rectum wall) plus fixed side
structures, on a small isotropic grid. UNDER_T2 phantoms keep the cancer
strictly inside the rectum; OVER_T3 phantoms let it protrude into the
mesorectum by a controlled depth, never beyond the mesorectum.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .staging import classify_stage, invasion_mask
from .volgrid import Case, ImageVolume, LabelVolume, Role, StageLabel, save_volume_pack

BASE_INTENSITY = {
    "background": 0.15,
    "mesorectum": 0.55,
    "rectum": 0.35,
    "cancer": 0.78,
    "bladder": 0.90,
    "prostate": 0.45,
    "pelvis": 0.25,
}

# Most-specific class wins where labels overlap.
_PRIORITY = ("cancer", "rectum", "bladder", "prostate", "pelvis", "mesorectum")


@dataclass
class PhantomConfig:
    shape: tuple[int, int, int] = (64, 64, 64)
    spacing_mm: float = 0.5
    mesorectum_radii_mm: tuple[tuple[float, float], ...] = ((12.0, 14.0), (10.5, 12.5), (10.5, 12.5))
    rectum_radii_mm: tuple[tuple[float, float], ...] = ((7.0, 9.0), (5.0, 6.5), (5.0, 6.5))
    cancer_radius_mm: tuple[float, float] = (2.5, 5.0)
    # Protrusion depth of OVER_T3 cancers beyond the rectum; drawn at least
    # 1 mm above the lower bound so the voxelized depth stays in range.
    invasion_depth_mm: tuple[float, float] = (1.5, 4.0)
    cancer_extra_mm: tuple[float, float] = (0.5, 2.0)
    noise_level: float = 0.03
    texture_amp: float = 0.05
    texture_sigma_vox: float = 2.5
    base_intensity: dict[str, float] = field(default_factory=lambda: dict(BASE_INTENSITY))


def _voxel_centers_mm(shape, spacing):
    axes = [(np.arange(n, dtype=np.float64) + 0.5) * spacing for n in shape]
    return np.meshgrid(*axes, indexing="ij")


def _ellipsoid(coords, center, radii) -> np.ndarray:
    acc = np.zeros_like(coords[0])
    for c, ctr, r in zip(coords, center, radii):
        acc += ((c - ctr) / r) ** 2
    return acc <= 1.0


def _sphere(coords, center, radius) -> np.ndarray:
    acc = np.zeros_like(coords[0])
    for c, ctr in zip(coords, center):
        acc += (c - ctr) ** 2
    return acc <= radius**2


def _ellipsoid_radius_along(radii, direction) -> float:
    """Distance from the centre to an axis-aligned ellipsoid surface along a unit vector."""
    s = sum((d / r) ** 2 for d, r in zip(direction, radii))
    return 1.0 / np.sqrt(s)


def _unit(v):
    return v / np.linalg.norm(v)


def generate_phantom(seed: int, stage: StageLabel, cfg: PhantomConfig | None = None) -> Case:
    """Generate one phantom whose classify_stage(labels) equals `stage`."""
    cfg = cfg or PhantomConfig()
    rng = np.random.default_rng(seed)
    spacing = (cfg.spacing_mm,) * 3
    coords = _voxel_centers_mm(cfg.shape, cfg.spacing_mm)
    extent = [n * cfg.spacing_mm for n in cfg.shape]
    center = np.array([e / 2.0 for e in extent])
    center += rng.uniform(-0.5, 0.5, size=3)

    meso_radii = np.array([rng.uniform(lo, hi) for lo, hi in cfg.mesorectum_radii_mm])
    rect_radii = np.array([rng.uniform(lo, hi) for lo, hi in cfg.rectum_radii_mm])
    mesorectum = _ellipsoid(coords, center, meso_radii)
    rectum = _ellipsoid(coords, center, rect_radii)

    # Attach the cancer blob to the rectum wall along a near-equatorial
    # direction, where the rectum-to-mesorectum gap is widest.
    polar = rng.uniform(-0.4, 0.4)
    azimuth = rng.uniform(0.0, 2.0 * np.pi)
    direction = _unit(
        np.array([np.sin(polar), np.cos(polar) * np.sin(azimuth), np.cos(polar) * np.cos(azimuth)])
    )
    wall_point = center + direction * _ellipsoid_radius_along(rect_radii, direction)

    if stage is StageLabel.OVER_T3:
        depth = rng.uniform(cfg.invasion_depth_mm[0] + 1.0, cfg.invasion_depth_mm[1])
        blob_r = depth + rng.uniform(*cfg.cancer_extra_mm)
        outside_mm = ndimage.distance_transform_edt(~rectum, sampling=spacing)
        reachable = rectum | ((outside_mm <= depth) & mesorectum)
        cancer = _sphere(coords, wall_point, blob_r) & reachable
        inner = _sphere(coords, wall_point - direction * 0.8 * blob_r, blob_r * rng.uniform(0.8, 1.2))
        cancer |= inner & rectum
    else:
        blob_r = rng.uniform(*cfg.cancer_radius_mm)
        inner_point = wall_point - direction * 0.35 * blob_r
        cancer = _sphere(coords, inner_point, blob_r) & rectum

    bladder_center = center + np.array([0.0, -(meso_radii[1] + 4.5), 0.0]) + rng.uniform(-1, 1, 3)
    bladder = _ellipsoid(coords, bladder_center, np.array([4.5, 4.0, 4.5]) + rng.uniform(-0.5, 0.5, 3))
    prostate_center = center + np.array([meso_radii[0] * 0.55, -(meso_radii[1] + 1.0), 0.0])
    prostate = _ellipsoid(coords, prostate_center, np.array([3.0, 2.5, 3.0]) + rng.uniform(-0.3, 0.3, 3))
    x_mm = coords[2]
    pelvis = ((x_mm < 2.5) | (x_mm > extent[2] - 2.5)) & (np.abs(coords[0] - center[0]) < 12.0)

    bladder &= ~mesorectum
    prostate &= ~(mesorectum | bladder)
    pelvis &= ~(mesorectum | bladder | prostate)

    masks = {
        "mesorectum": mesorectum,
        "rectum": rectum,
        "cancer": cancer,
        "bladder": bladder,
        "prostate": prostate,
        "pelvis": pelvis,
    }
    labels = LabelVolume.from_masks(masks, spacing)

    image = np.full(cfg.shape, cfg.base_intensity["background"], dtype=np.float64)
    assigned = np.zeros(cfg.shape, dtype=bool)
    for name in _PRIORITY:
        region = masks[name] & ~assigned
        texture = ndimage.gaussian_filter(rng.standard_normal(cfg.shape), cfg.texture_sigma_vox)
        std = texture.std()
        if std > 0:
            texture /= std
        image[region] = cfg.base_intensity[name] + cfg.texture_amp * texture[region]
        assigned |= region
    image += rng.normal(0.0, cfg.noise_level, size=cfg.shape)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)

    if not cancer.any():
        raise RuntimeError(f"phantom generator bug: empty cancer blob (seed {seed})")
    if (rectum & ~mesorectum).any():
        raise RuntimeError(f"phantom generator bug: rectum escapes mesorectum (seed {seed})")
    if (cancer & ~(rectum | mesorectum)).any():
        raise RuntimeError(f"phantom generator bug: cancer outside rectum+mesorectum (seed {seed})")
    got = classify_stage(labels)
    if got is not stage:
        raise RuntimeError(
            f"phantom generator bug: requested {stage.value}, constructed {got.value} (seed {seed})"
        )
    if stage is StageLabel.OVER_T3:
        inv = invasion_mask(cancer, rectum)
        depth_measured = float(ndimage.distance_transform_edt(~rectum, sampling=spacing)[inv].max())
        lo, hi = cfg.invasion_depth_mm
        if not lo <= depth_measured <= hi:
            raise RuntimeError(
                f"phantom generator bug: invasion depth {depth_measured:.2f}mm outside [{lo}, {hi}]"
            )

    return Case(
        id=f"phantom-{seed}",
        image=ImageVolume(image, spacing),
        labels=labels,
        stage=stage,
        role=Role.TRAIN_LABELED,
    )


_POOL_ROLES = {
    "A": Role.TRAIN_LABELED,
    "B": Role.EVAL,
    "C": Role.STAGE_ONLY,
}


def _case_seed(seed: int, pool: str, index: int) -> int:
    ss = np.random.SeedSequence([seed, ord(pool), index])
    return int(ss.generate_state(1)[0])


def generate_dataset(
    counts: dict[str, tuple[int, int]],
    out_dir,
    seed: int,
    cfg: PhantomConfig | None = None,
) -> dict:
    """Write phantom VolumePacks for pools A/B/C plus a manifest.

    counts maps pool name to (n_under_t2, n_over_t3). Pool A keeps labels and
    stage, pool B is the labelled evaluation pool, pool C withholds labels
    from its packs (the full cases go to a hidden _oracle directory so tests
    can audit them). Pool D starts empty; the progression/synthesis pipeline
    fills it.
    """
    cfg = cfg or PhantomConfig()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {"pools": {"A": [], "B": [], "C": [], "D": []}, "seed": seed, "counts": {}}
    for pool, (n_t2, n_t3) in sorted(counts.items()):
        if pool == "D":
            if n_t2 or n_t3:
                raise ValueError("pool D is generated by progression+synthesis, not phantom-gen")
            continue
        if pool not in _POOL_ROLES:
            raise ValueError(f"unknown pool {pool!r}")
        manifest["counts"][pool] = {"UNDER_T2": n_t2, "OVER_T3": n_t3}
        stages = [StageLabel.UNDER_T2] * n_t2 + [StageLabel.OVER_T3] * n_t3
        for i, stage in enumerate(stages):
            case = generate_phantom(_case_seed(seed, pool, i), stage, cfg)
            case.id = f"{pool}{i:03d}"
            case.role = _POOL_ROLES[pool]
            rel = f"{pool}/{case.id}"
            if pool == "C":
                save_volume_pack(
                    Case(id=case.id, image=case.image, labels=case.labels,
                         stage=case.stage, role=case.role),
                    out_dir / "_oracle" / rel,
                )
                public = Case(id=case.id, image=case.image, labels=None,
                              stage=case.stage, role=case.role)
            else:
                public = case
            save_volume_pack(public, out_dir / rel)
            manifest["pools"][pool].append(rel)
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest
