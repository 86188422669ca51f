"""Volume containers, the VolumePack on-disk format, and the preprocessing chain.

All arrays are indexed (z, y, x). Physical coordinates are millimetres,
also ordered (z, y, x), with voxel i centred at (i + 0.5) * spacing_mm.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np
from scipy import ndimage

# Bit assignment of the label mask. Labels may overlap: a cancer voxel
# inside the rectum carries both bits.
LABEL_BITS = {
    "mesorectum": 0,
    "rectum": 1,
    "cancer": 2,
    "bladder": 3,
    "prostate": 4,
    "pelvis": 5,
}

# Channel order of network outputs / probability maps.
SEG_CLASSES = ("mesorectum", "rectum", "cancer")

# Crop window sizes, (z, y, x). Full-size values match clinical MR volumes;
# the phantom profile keeps the acceptance suite within desk-scale memory.
FULL_CROPS = {"TRAIN": (112, 192, 192), "EVAL": (128, 256, 256)}
PHANTOM_CROPS = {"TRAIN": (48, 64, 64), "EVAL": (64, 96, 96)}


class PackFormatError(Exception):
    """Malformed or missing VolumePack header."""


class PackCorruptionError(PackFormatError):
    """Header and raw payload disagree (missing file, wrong byte length)."""


class StageLabel(Enum):
    UNDER_T2 = "UNDER_T2"
    OVER_T3 = "OVER_T3"

    @property
    def g(self) -> int:
        """Binary ground-truth staging value (OVER_T3 -> 1)."""
        return 1 if self is StageLabel.OVER_T3 else 0


class Role(Enum):
    TRAIN_LABELED = "TRAIN_LABELED"
    EVAL = "EVAL"
    STAGE_ONLY = "STAGE_ONLY"
    GENERATED = "GENERATED"


def _check_spacing(spacing_mm):
    spacing = tuple(float(s) for s in spacing_mm)
    if len(spacing) != 3 or any(s <= 0 for s in spacing):
        raise ValueError(f"spacing_mm must be 3 positive reals, got {spacing_mm}")
    return spacing


@dataclass
class ImageVolume:
    """Scalar intensity volume; values are in [0, 1] after preprocessing."""

    data: np.ndarray
    spacing_mm: tuple[float, float, float]

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ValueError(f"image data must be 3-D, got shape {self.data.shape}")
        self.spacing_mm = _check_spacing(self.spacing_mm)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def validate(self):
        if not np.all(np.isfinite(self.data)):
            raise ValueError("image contains non-finite values")


@dataclass
class LabelVolume:
    """Per-voxel bitmask over LABEL_BITS; bits may overlap."""

    data: np.ndarray
    spacing_mm: tuple[float, float, float]

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.uint8)
        if self.data.ndim != 3:
            raise ValueError(f"label data must be 3-D, got shape {self.data.shape}")
        self.spacing_mm = _check_spacing(self.spacing_mm)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def mask(self, name: str) -> np.ndarray:
        """Boolean mask of one anatomy class."""
        return (self.data >> LABEL_BITS[name]) & 1 == 1

    def set_mask(self, name: str, mask: np.ndarray):
        bit = np.uint8(1 << LABEL_BITS[name])
        self.data = np.where(mask, self.data | bit, self.data & ~bit).astype(np.uint8)

    def validate(self):
        defined = 0
        for b in LABEL_BITS.values():
            defined |= 1 << b
        if np.any(self.data & ~np.uint8(defined)):
            raise ValueError("label volume has bits outside the defined set")

    @classmethod
    def from_masks(cls, masks: dict[str, np.ndarray], spacing_mm) -> "LabelVolume":
        shapes = {m.shape for m in masks.values()}
        if len(shapes) != 1:
            raise ValueError(f"mask shapes disagree: {shapes}")
        data = np.zeros(next(iter(shapes)), dtype=np.uint8)
        for name, mask in masks.items():
            data |= np.where(mask, np.uint8(1 << LABEL_BITS[name]), np.uint8(0))
        return cls(data=data, spacing_mm=spacing_mm)


@dataclass
class ProbabilityMaps:
    """Per-class per-voxel probabilities, channels ordered as SEG_CLASSES."""

    data: np.ndarray  # (3, z, y, x), float32 in [0, 1]
    spacing_mm: tuple[float, float, float]

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 4 or self.data.shape[0] != len(SEG_CLASSES):
            raise ValueError(
                f"probability maps must be ({len(SEG_CLASSES)}, z, y, x), got {self.data.shape}"
            )
        self.spacing_mm = _check_spacing(self.spacing_mm)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape[1:]

    def channel(self, name: str) -> np.ndarray:
        return self.data[SEG_CLASSES.index(name)]

    @property
    def mesorectum(self) -> np.ndarray:
        return self.data[0]

    @property
    def rectum(self) -> np.ndarray:
        return self.data[1]

    @property
    def cancer(self) -> np.ndarray:
        return self.data[2]


@dataclass
class Case:
    """One train/eval unit: image plus optional labels and stage."""

    id: str
    image: ImageVolume
    labels: LabelVolume | None = None
    stage: StageLabel | None = None
    role: Role = Role.TRAIN_LABELED

    def __post_init__(self):
        if self.labels is not None and self.labels.shape != self.image.shape:
            raise ValueError(
                f"label shape {self.labels.shape} != image shape {self.image.shape}"
            )
        if self.role is Role.GENERATED and self.labels is None:
            raise ValueError("GENERATED cases must carry labels")


# ---------------------------------------------------------------------------
# VolumePack on-disk format
# ---------------------------------------------------------------------------

_IMAGE_DTYPE = np.dtype("<f4")
_LABEL_DTYPE = np.dtype("<u1")


def save_volume_pack(case: Case, path) -> None:
    """Write a Case as a VolumePack directory (header.json + raw volumes).

    The representation is bit-exact: load_volume_pack(save_volume_pack(c)) == c.
    """
    case.image.validate()
    if case.labels is not None:
        case.labels.validate()

    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    header = {
        "id": case.id,
        "shape": list(case.image.shape),
        "spacing_mm": list(case.image.spacing_mm),
        "byte_order": "LE",
        "image_dtype": "float32",
        "stage": case.stage.value if case.stage is not None else None,
        "role": case.role.value,
    }
    if case.labels is not None:
        header["label_dtype"] = "uint8"
        header["label_bits"] = dict(LABEL_BITS)
    (path / "header.json").write_text(json.dumps(header, indent=2, sort_keys=True))
    case.image.data.astype(_IMAGE_DTYPE).tofile(path / "image.raw")
    if case.labels is not None:
        case.labels.data.astype(_LABEL_DTYPE).tofile(path / "labels.raw")


def _read_raw(path: Path, dtype: np.dtype, shape) -> np.ndarray:
    expected = int(np.prod(shape)) * dtype.itemsize
    actual = path.stat().st_size
    if actual != expected:
        raise PackCorruptionError(
            f"{path.name}: expected {expected} bytes for shape {tuple(shape)}, found {actual}"
        )
    return np.fromfile(path, dtype=dtype).reshape(shape)


def load_volume_pack(path) -> Case:
    """Read a VolumePack directory back into a Case."""
    path = Path(path)
    header_path = path / "header.json"
    if not header_path.is_file():
        raise PackFormatError(f"missing header.json in {path}")
    try:
        header = json.loads(header_path.read_text())
    except json.JSONDecodeError as exc:
        raise PackFormatError(f"unparseable header.json in {path}: {exc}") from exc

    for key in ("shape", "spacing_mm", "byte_order", "image_dtype", "role"):
        if key not in header:
            raise PackFormatError(f"header.json missing required key {key!r}")
    if header["byte_order"] != "LE":
        raise PackFormatError(f"unsupported byte_order {header['byte_order']!r}")
    if header["image_dtype"] != "float32":
        raise PackFormatError(f"unsupported image_dtype {header['image_dtype']!r}")

    shape = tuple(int(s) for s in header["shape"])
    spacing = tuple(float(s) for s in header["spacing_mm"])
    image_path = path / "image.raw"
    if not image_path.is_file():
        raise PackCorruptionError(f"missing image.raw in {path}")
    image = ImageVolume(_read_raw(image_path, _IMAGE_DTYPE, shape), spacing)

    labels = None
    if "label_bits" in header:
        labels_path = path / "labels.raw"
        if not labels_path.is_file():
            raise PackCorruptionError(
                f"header declares labels {sorted(header['label_bits'])} but labels.raw is missing"
            )
        if header.get("label_dtype") != "uint8":
            raise PackFormatError(f"unsupported label_dtype {header.get('label_dtype')!r}")
        labels = LabelVolume(_read_raw(labels_path, _LABEL_DTYPE, shape), spacing)

    stage = StageLabel(header["stage"]) if header.get("stage") else None
    return Case(
        id=str(header.get("id", path.name)),
        image=image,
        labels=labels,
        stage=stage,
        role=Role(header["role"]),
    )


# ---------------------------------------------------------------------------
# Preprocessing chain
# ---------------------------------------------------------------------------


def _resample_array(data: np.ndarray, in_spacing, target_mm: float, order: int) -> np.ndarray:
    in_shape = data.shape
    out_shape = tuple(
        int(np.floor(s * sp / target_mm + 0.5)) for s, sp in zip(in_shape, in_spacing)
    )
    if any(s == 0 for s in out_shape):
        raise ValueError(f"resampling to {target_mm}mm collapses shape {in_shape} to {out_shape}")
    # Voxel-centre aligned sampling grid: out centre (i+0.5)*target maps to
    # input index (i+0.5)*target/spacing - 0.5.
    grids = [
        (np.arange(n, dtype=np.float64) + 0.5) * target_mm / sp - 0.5
        for n, sp in zip(out_shape, in_spacing)
    ]
    coords = np.meshgrid(*grids, indexing="ij")
    return ndimage.map_coordinates(data, coords, order=order, mode="nearest")


def resample_isotropic(vol, target_mm: float = 0.5):
    """Resample to isotropic voxels; trilinear for images, nearest for labels.

    Nearest-neighbour interpolation of the packed bitmask picks one source
    voxel per output voxel, which is exactly per-bit nearest-neighbour.
    """
    if target_mm <= 0:
        raise ValueError(f"target_mm must be positive, got {target_mm}")
    if vol.spacing_mm == (target_mm, target_mm, target_mm):
        return replace(vol, data=vol.data.copy())
    target = (target_mm, target_mm, target_mm)
    if isinstance(vol, ImageVolume):
        data = _resample_array(vol.data.astype(np.float32), vol.spacing_mm, target_mm, order=1)
        return ImageVolume(data.astype(np.float32), target)
    if isinstance(vol, LabelVolume):
        data = _resample_array(vol.data, vol.spacing_mm, target_mm, order=0)
        return LabelVolume(data.astype(np.uint8), target)
    raise TypeError(f"cannot resample {type(vol).__name__}")


def _crop_centered(data: np.ndarray, center, out_shape, fill=0) -> np.ndarray:
    """Extract a window of out_shape centred on `center`, zero-padded out of bounds."""
    out = np.full(out_shape, fill, dtype=data.dtype)
    src_slices, dst_slices = [], []
    for c, n_out, n_in in zip(center, out_shape, data.shape):
        start = int(round(c)) - n_out // 2
        src_lo, src_hi = max(start, 0), min(start + n_out, n_in)
        if src_lo >= src_hi:
            return out
        dst_lo = src_lo - start
        src_slices.append(slice(src_lo, src_hi))
        dst_slices.append(slice(dst_lo, dst_lo + (src_hi - src_lo)))
    out[tuple(dst_slices)] = data[tuple(src_slices)]
    return out


def center_crop(case: Case, crop_zyx) -> Case:
    """Crop around the volume centre (used for cases without any labels)."""
    center = tuple(n / 2.0 for n in case.image.shape)
    return _crop_case(case, center, tuple(crop_zyx))


def crop_around_label(case: Case, phase: str, crop_zyx=None) -> Case:
    """Crop a fixed window centred on the cancer-label centroid.

    phase is "TRAIN" or "EVAL"; crop_zyx overrides the full-size default
    (phantom-scale runs pass PHANTOM_CROPS sizes). Out-of-bounds regions are
    zero-padded so the output shape is exact for every input geometry.
    """
    if phase not in FULL_CROPS:
        raise ValueError(f"phase must be TRAIN or EVAL, got {phase!r}")
    out_shape = tuple(crop_zyx) if crop_zyx is not None else FULL_CROPS[phase]
    if case.labels is None:
        raise ValueError("crop_around_label requires a labelled case")
    cancer = case.labels.mask("cancer")
    if not cancer.any():
        raise ValueError(
            "cancer label is empty; crop around the rectum centroid instead "
            "(use center_crop or supply a cancer mask)"
        )
    center = ndimage.center_of_mass(cancer)
    return _crop_case(case, center, out_shape)


def _crop_case(case: Case, center, out_shape) -> Case:
    image = ImageVolume(
        _crop_centered(case.image.data, center, out_shape), case.image.spacing_mm
    )
    labels = None
    if case.labels is not None:
        labels = LabelVolume(
            _crop_centered(case.labels.data, center, out_shape), case.labels.spacing_mm
        )
    return Case(id=case.id, image=image, labels=labels, stage=case.stage, role=case.role)


def percentile_normalize(img: ImageVolume, p_low: float = 1.0, p_high: float = 99.0) -> ImageVolume:
    """Map the [p_low, p_high] intensity percentiles linearly onto [0, 1], then clamp.

    Thresholds are inner order statistics (the "higher" order statistic for
    p_low, "lower" for p_high), which makes a second application with the
    same percentiles an exact no-op: both clamp shoulders already hold at
    least the percentile's share of the mass. A constant image (or a
    degenerate percentile window) maps to all zeros.
    """
    if not p_low < p_high:
        raise ValueError(f"need p_low < p_high, got {p_low}, {p_high}")
    data = img.data.astype(np.float64)
    lo = float(np.percentile(data, p_low, method="higher"))
    hi = float(np.percentile(data, p_high, method="lower"))
    if hi <= lo:
        return ImageVolume(np.zeros_like(img.data), img.spacing_mm)
    out = np.clip((data - lo) / (hi - lo), 0.0, 1.0)
    return ImageVolume(out.astype(np.float32), img.spacing_mm)
