"""Rectal-cancer segmentation and T-staging toolkit.

Modules
-------
volgrid   volume containers, VolumePack format, preprocessing chain
staging   rule-based T-stage classification and evaluation metrics
losses    soft Dice loss and the semi-supervised T-staging loss
segnet    3D U-Net-style segmentation network and checkpoints
trainer   training loop, batch composition, k-fold CV, ablation harness
defsim    mesh-deformation cancer-progression simulation
synthgan  SPADE-3D label-to-image synthesis (generator + patch discriminator)
phantom   procedural pelvic phantom dataset generator
cli       command-line entry points
"""

from .volgrid import (
    Case,
    ImageVolume,
    LabelVolume,
    ProbabilityMaps,
    Role,
    StageLabel,
    load_volume_pack,
    save_volume_pack,
)

__all__ = [
    "Case",
    "ImageVolume",
    "LabelVolume",
    "ProbabilityMaps",
    "Role",
    "StageLabel",
    "load_volume_pack",
    "save_volume_pack",
]

__version__ = "0.1.0"
