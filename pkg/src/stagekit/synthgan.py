"""Label-to-image synthesis: SPADE-3D generator and 3D patch discriminator.

The generator upsamples a noise volume from the coarsest scale to the label
resolution with one spatially-adaptive normalization block per scale; each
block's per-voxel scale/shift are predicted from the label volume resampled
to that scale. Training pairs hinge adversarial loss with an L1
reconstruction term against the paired real image.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .segnet import read_weight_container, write_weight_container
from .volgrid import ImageVolume, LabelVolume, LABEL_BITS


@dataclass
class SynthConfig:
    scales: int = 4
    base_channels: int = 32
    label_channels: int = len(LABEL_BITS)
    noise_channels: int = 16
    spade_hidden: int = 16
    max_channel_factor: int = 4
    recon_weight: float = 10.0
    adv_weight: float = 1.0
    lr_g: float = 2e-4
    lr_d: float = 2e-4

    def __post_init__(self):
        if self.scales < 2:
            raise ValueError(f"scales must be >= 2, got {self.scales}")
        if self.label_channels != len(LABEL_BITS):
            raise ValueError(
                f"label_channels must match the {len(LABEL_BITS)} label bits"
            )

    @property
    def stride(self) -> int:
        """Coarsest-scale stride; label dims must be divisible by it."""
        return 2 ** (self.scales - 1)

    def channels(self) -> list[int]:
        """Generator channel count per scale, coarse to fine."""
        cap = self.max_channel_factor * self.base_channels
        return [
            min(self.base_channels * 2 ** (self.scales - 1 - s), cap)
            for s in range(self.scales)
        ]


def _conv3(cin: int, cout: int) -> nn.Conv3d:
    # replicate padding keeps uniform-background borders indistinguishable
    # from the deep interior, which preserves shift equivariance
    return nn.Conv3d(cin, cout, 3, padding=1, padding_mode="replicate")


class Spade3d(nn.Module):
    """Parameter-free spatial normalization modulated by the label volume."""

    def __init__(self, channels: int, cfg: SynthConfig):
        super().__init__()
        self.norm = nn.InstanceNorm3d(channels, affine=False)
        self.shared = nn.Sequential(
            _conv3(cfg.label_channels, cfg.spade_hidden), nn.ReLU(inplace=True)
        )
        self.gamma = _conv3(cfg.spade_hidden, channels)
        self.beta = _conv3(cfg.spade_hidden, channels)

    def forward(self, x, labels):
        seg = F.interpolate(labels, size=x.shape[2:], mode="nearest")
        actv = self.shared(seg)
        gamma = self.gamma(actv)
        beta = self.beta(actv)
        assert gamma.shape[2:] == x.shape[2:] and beta.shape[2:] == x.shape[2:]
        return self.norm(x) * (1.0 + gamma) + beta


class SpadeBlock3d(nn.Module):
    """One generator stage: SPADE normalization, activation, convolution."""

    def __init__(self, cin: int, cout: int, cfg: SynthConfig):
        super().__init__()
        self.spade = Spade3d(cin, cfg)
        self.conv = _conv3(cin, cout)

    def forward(self, x, labels):
        return self.conv(F.leaky_relu(self.spade(x, labels), 0.2))


class SpadeGenerator3d(nn.Module):
    def __init__(self, cfg: SynthConfig):
        super().__init__()
        self.cfg = cfg
        chans = cfg.channels()
        self.entry = _conv3(cfg.noise_channels, chans[0])
        self.blocks = nn.ModuleList(
            SpadeBlock3d(chans[s], chans[min(s + 1, cfg.scales - 1)], cfg)
            for s in range(cfg.scales)
        )
        self.head = _conv3(chans[-1], 1)

    def _check_shapes(self, labels, noise):
        stride = self.cfg.stride
        for axis, name in zip(labels.shape[2:], "zyx"):
            if axis % stride != 0:
                raise ValueError(
                    f"label {name}-dimension {axis} is not divisible by the "
                    f"coarsest-scale stride {stride}"
                )
        expected = tuple(n // stride for n in labels.shape[2:])
        if tuple(noise.shape[2:]) != expected:
            raise ValueError(f"noise spatial shape {tuple(noise.shape[2:])} != {expected}")

    def forward(self, labels: torch.Tensor, noise: torch.Tensor) -> torch.Tensor:
        """labels: (B, label_channels, Z, Y, X); noise at the coarsest scale."""
        self._check_shapes(labels, noise)
        x = self.entry(noise)
        for s, block in enumerate(self.blocks):
            if s > 0:
                x = F.interpolate(x, scale_factor=2, mode="trilinear", align_corners=False)
            x = block(x, labels)
        return torch.sigmoid(self.head(x))


class PatchDiscriminator3d(nn.Module):
    """Strided 3D conv stack over concatenated (label, image); emits a score map."""

    def __init__(self, cfg: SynthConfig):
        super().__init__()
        c = cfg.base_channels
        cin = cfg.label_channels + 1
        self.body = nn.Sequential(
            nn.Conv3d(cin, c, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv3d(c, 2 * c, 4, stride=2, padding=1),
            nn.InstanceNorm3d(2 * c, affine=True),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv3d(2 * c, 4 * c, 4, stride=2, padding=1),
            nn.InstanceNorm3d(4 * c, affine=True),
            nn.LeakyReLU(0.2, inplace=True),
        )
        self.head = nn.Conv3d(4 * c, 1, 3, padding=1)

    def forward(self, labels: torch.Tensor, image: torch.Tensor) -> torch.Tensor:
        return self.head(self.body(torch.cat([labels, image], dim=1)))


def build_generator(cfg: SynthConfig, seed: int) -> SpadeGenerator3d:
    torch.manual_seed(seed)
    return SpadeGenerator3d(cfg)


def build_discriminator(cfg: SynthConfig, seed: int | None = None) -> PatchDiscriminator3d:
    if seed is not None:
        torch.manual_seed(seed)
    return PatchDiscriminator3d(cfg)


def labels_to_onehot(labels: LabelVolume) -> np.ndarray:
    """One-hot channels ordered by LABEL_BITS bit index; background implicit."""
    out = np.zeros((len(LABEL_BITS),) + labels.shape, dtype=np.float32)
    for name, bit in LABEL_BITS.items():
        out[bit] = labels.mask(name)
    return out


def gan_train_step(gen, disc, batch, cfg: SynthConfig, opt_g, opt_d) -> dict[str, float]:
    """One alternating GAN update (discriminator first, then generator).

    batch is (labels, images) tensors, (B, label_channels, Z, Y, X) and
    (B, 1, Z, Y, X). Noise is drawn from the global torch RNG so runs are
    reproducible under a fixed seed.
    """
    labels, real = batch
    stride = cfg.stride
    noise_shape = (labels.shape[0], cfg.noise_channels) + tuple(n // stride for n in labels.shape[2:])
    noise = torch.randn(noise_shape)
    fake = gen(labels, noise)

    d_real = disc(labels, real)
    d_fake = disc(labels, fake.detach())
    loss_d = F.relu(1.0 - d_real).mean() + F.relu(1.0 + d_fake).mean()
    opt_d.zero_grad()
    loss_d.backward()
    opt_d.step()

    d_fake_for_g = disc(labels, fake)
    loss_adv = -d_fake_for_g.mean()
    loss_l1 = (fake - real).abs().mean()
    loss_g = cfg.adv_weight * loss_adv + cfg.recon_weight * loss_l1
    opt_g.zero_grad()
    loss_g.backward()
    opt_g.step()

    record = {
        "d_loss": float(loss_d.detach()),
        "g_adv": float(loss_adv.detach()),
        "g_l1": float(loss_l1.detach()),
        "g_loss": float(loss_g.detach()),
        "d_real_mean": float(d_real.detach().mean()),
        "d_fake_mean": float(d_fake.detach().mean()),
    }
    if not all(np.isfinite(v) for v in record.values()):
        raise RuntimeError(f"non-finite GAN losses: {record}")
    return record


def synthesize(gen: SpadeGenerator3d, labels: LabelVolume, seed: int) -> ImageVolume:
    """Generate one image for a label volume, deterministic in the seed."""
    defined = 0
    for bit in LABEL_BITS.values():
        defined |= 1 << bit
    if np.any(labels.data & ~np.uint8(defined)):
        raise ValueError("label volume has bits outside the configured label set")
    onehot = torch.from_numpy(labels_to_onehot(labels))[None]
    stride = gen.cfg.stride
    rng = torch.Generator().manual_seed(seed)
    noise = torch.randn(
        (1, gen.cfg.noise_channels) + tuple(n // stride for n in labels.shape), generator=rng
    )
    was_training = gen.training
    gen.eval()
    with torch.inference_mode():
        out = gen(onehot, noise)
    gen.train(was_training)
    return ImageVolume(out[0, 0].numpy().astype(np.float32), labels.spacing_mm)


def _random_crop_pair(case, crop_zyx, rng: np.random.Generator):
    """One (one-hot labels, image) crop; half the draws centre on a cancer voxel."""
    shape = case.labels.shape
    crop = tuple(min(c, n) for c, n in zip(crop_zyx, shape))
    cancer_idx = np.argwhere(case.labels.mask("cancer"))
    if len(cancer_idx) and rng.uniform() < 0.5:
        center = cancer_idx[rng.integers(len(cancer_idx))]
        lo = [int(np.clip(c - w // 2, 0, n - w)) for c, w, n in zip(center, crop, shape)]
    else:
        lo = [int(rng.integers(0, n - w + 1)) for w, n in zip(crop, shape)]
    sl = tuple(slice(l, l + w) for l, w in zip(lo, crop))
    labels = labels_to_onehot(case.labels)[(slice(None),) + sl]
    image = case.image.data[sl][None]
    return labels, image


def fit_gan(
    cases,
    cfg: SynthConfig,
    steps: int,
    seed: int,
    crop_zyx=(32, 32, 32),
    batch_size: int = 2,
):
    """Train generator+discriminator on random crops of (label, image) pairs.

    Returns (generator, telemetry) where telemetry is the per-step loss
    record list. Deterministic in the seed.
    """
    cases = [c for c in cases if c.labels is not None]
    if not cases:
        raise ValueError("fit_gan needs labelled cases")
    torch.manual_seed(seed)
    gen = SpadeGenerator3d(cfg)
    disc = PatchDiscriminator3d(cfg)
    opt_g = torch.optim.Adam(gen.parameters(), lr=cfg.lr_g, betas=(0.5, 0.999))
    opt_d = torch.optim.Adam(disc.parameters(), lr=cfg.lr_d, betas=(0.5, 0.999))
    rng = np.random.default_rng(seed)
    telemetry = []
    for _ in range(steps):
        picks = rng.integers(0, len(cases), size=batch_size)
        pairs = [_random_crop_pair(cases[i], crop_zyx, rng) for i in picks]
        labels = torch.from_numpy(np.stack([p[0] for p in pairs]))
        images = torch.from_numpy(np.stack([p[1] for p in pairs]))
        telemetry.append(gan_train_step(gen, disc, (labels, images), cfg, opt_g, opt_d))
    return gen, telemetry


def save_generator(gen: SpadeGenerator3d, stem, step: int = 0, extra: dict | None = None) -> None:
    params = {k: v.detach().cpu().numpy().copy() for k, v in gen.state_dict().items()}
    meta = {"config": asdict(gen.cfg), "step": step, "extra": extra or {}}
    write_weight_container(stem, params, meta)


def load_generator(stem) -> SpadeGenerator3d:
    params, sidecar = read_weight_container(stem)
    gen = SpadeGenerator3d(SynthConfig(**sidecar["config"]))
    gen.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in params.items()})
    return gen
