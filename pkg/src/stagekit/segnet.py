"""3D encoder-decoder segmentation network with per-channel sigmoid outputs.

Output channels are independent probabilities for mesorectum, rectum and
cancer (multi-label: overlapping structures are representable, so they are
not softmax-normalized).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .volgrid import SEG_CLASSES


@dataclass
class SegNetConfig:
    in_channels: int = 1
    out_channels: int = len(SEG_CLASSES)
    base_width: int = 16
    depth: int = 4
    convs_per_block: int = 2
    norm: str = "instance"  # "instance" or "none"
    activation: str = "relu"

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError(f"depth must be >= 2, got {self.depth}")
        if self.convs_per_block < 1:
            raise ValueError("convs_per_block must be >= 1")
        if self.norm not in ("instance", "none"):
            raise ValueError(f"unknown norm {self.norm!r}")
        if self.activation not in ("relu", "leaky_relu"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def divisor(self) -> int:
        """Every spatial input dimension must be divisible by this."""
        return 2 ** (self.depth - 1)


def _act(name: str) -> nn.Module:
    return nn.ReLU(inplace=True) if name == "relu" else nn.LeakyReLU(0.2, inplace=True)


class ConvBlock(nn.Module):
    def __init__(self, cin: int, cout: int, cfg: SegNetConfig):
        super().__init__()
        layers = []
        for i in range(cfg.convs_per_block):
            layers.append(nn.Conv3d(cin if i == 0 else cout, cout, 3, padding=1))
            if cfg.norm == "instance":
                layers.append(nn.InstanceNorm3d(cout, affine=True))
            layers.append(_act(cfg.activation))
        self.body = nn.Sequential(*layers)

    def forward(self, x):
        return self.body(x)


class SegNet3D(nn.Module):
    """U-Net-style 3D network: encoder halves spatial dims per level, decoder
    mirrors it with skip connections, head applies a per-channel sigmoid."""

    def __init__(self, config: SegNetConfig):
        super().__init__()
        self.config = config
        w = config.base_width
        widths = [w * 2**i for i in range(config.depth)]
        self.encoders = nn.ModuleList()
        cin = config.in_channels
        for cw in widths:
            self.encoders.append(ConvBlock(cin, cw, config))
            cin = cw
        self.pool = nn.MaxPool3d(2)
        self.upsamplers = nn.ModuleList()
        self.decoders = nn.ModuleList()
        for level in range(config.depth - 2, -1, -1):
            self.upsamplers.append(nn.ConvTranspose3d(widths[level + 1], widths[level], 2, stride=2))
            self.decoders.append(ConvBlock(2 * widths[level], widths[level], config))
        self.head = nn.Conv3d(widths[0], config.out_channels, 1)

    def _check_shape(self, x: torch.Tensor):
        div = self.config.divisor
        for axis, name in zip(x.shape[-3:], "zyx"):
            if axis % div != 0:
                raise ValueError(
                    f"input {name}-dimension {axis} is not divisible by {div} "
                    f"(depth {self.config.depth})"
                )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        self._check_shape(x)
        skips = []
        for i, enc in enumerate(self.encoders):
            if i > 0:
                x = self.pool(x)
            x = enc(x)
            skips.append(x)
        x = skips.pop()
        for up, dec in zip(self.upsamplers, self.decoders):
            x = dec(torch.cat([up(x), skips.pop()], dim=1))
        return torch.sigmoid(self.head(x))


def build_segnet(config: SegNetConfig, seed: int) -> SegNet3D:
    """Construct the network with deterministic, seed-controlled initialization."""
    torch.manual_seed(seed)
    return SegNet3D(config)


@dataclass
class Checkpoint:
    """Serialized parameters plus the config needed to rebuild the network."""

    parameters: dict[str, np.ndarray]
    config: SegNetConfig
    iteration: int
    validation_dice: float
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: SegNet3D, iteration: int, validation_dice: float, **extra):
        params = {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}
        return cls(params, model.config, iteration, validation_dice, dict(extra))

    def build_model(self) -> SegNet3D:
        model = SegNet3D(self.config)
        state = {k: torch.from_numpy(v.copy()) for k, v in self.parameters.items()}
        model.load_state_dict(state)
        return model


def write_weight_container(stem, parameters: dict[str, np.ndarray], meta: dict) -> None:
    """Write <stem>.weights.raw (concatenated little-endian arrays) and
    <stem>.json (meta plus a weight manifest).

    The layout is deterministic so identical checkpoints are byte-identical.
    """
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    manifest = []
    blobs = []
    for name in sorted(parameters):
        arr = np.ascontiguousarray(parameters[name])
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        manifest.append({"name": name, "shape": list(arr.shape), "dtype": str(arr.dtype)})
        blobs.append(le.tobytes())
    sidecar = dict(meta)
    sidecar["weights"] = manifest
    Path(str(stem) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    Path(str(stem) + ".weights.raw").write_bytes(b"".join(blobs))


def read_weight_container(stem) -> tuple[dict[str, np.ndarray], dict]:
    stem = Path(stem)
    sidecar = json.loads(Path(str(stem) + ".json").read_text())
    raw = Path(str(stem) + ".weights.raw").read_bytes()
    params = {}
    offset = 0
    for entry in sidecar["weights"]:
        dtype = np.dtype(entry["dtype"]).newbyteorder("<")
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        nbytes = count * dtype.itemsize
        arr = np.frombuffer(raw[offset : offset + nbytes], dtype=dtype).reshape(entry["shape"])
        params[entry["name"]] = arr.astype(np.dtype(entry["dtype"]))
        offset += nbytes
    if offset != len(raw):
        raise ValueError(f"weights.raw has {len(raw)} bytes, manifest expects {offset}")
    return params, sidecar


def save_checkpoint(ckpt: Checkpoint, stem) -> None:
    meta = {
        "config": asdict(ckpt.config),
        "iteration": ckpt.iteration,
        "validation_dice": ckpt.validation_dice,
        "extra": ckpt.extra,
    }
    write_weight_container(stem, ckpt.parameters, meta)


def load_checkpoint(stem) -> Checkpoint:
    params, sidecar = read_weight_container(stem)
    return Checkpoint(
        parameters=params,
        config=SegNetConfig(**sidecar["config"]),
        iteration=int(sidecar["iteration"]),
        validation_dice=float(sidecar["validation_dice"]),
        extra=sidecar.get("extra", {}),
    )
