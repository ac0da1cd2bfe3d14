"""Attention U-Net generator, encoder-style critic and checkpoint I/O."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_FORMAT = "cxrseg-checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class UNetConfig:
    input_size: int = 512
    depth: int = 4
    base_channels: int = 64
    num_classes: int = 3
    in_channels: int = 1
    attention: bool = True

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be at least 1")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if self.base_channels < 1 or self.in_channels < 1:
            raise ValueError("channel counts must be positive")
        if self.input_size <= 0 or self.input_size % (2 ** self.depth):
            raise ValueError(f"input_size {self.input_size} must be divisible by 2**depth = {2 ** self.depth}")


@dataclass(frozen=True)
class CriticConfig:
    num_classes: int = 3
    image_conditioned: bool = True
    depth: int = 4
    base_channels: int = 64

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be at least 1")
        if self.num_classes < 2 or self.base_channels < 1:
            raise ValueError("invalid critic channel configuration")

    @property
    def input_channels(self) -> int:
        return self.num_classes + (1 if self.image_conditioned else 0)


def config_hash(cfg) -> str:
    payload = {"type": type(cfg).__name__, **dataclasses.asdict(cfg)}
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


class ConvBlock(nn.Sequential):
    """Two 3x3 conv + batch norm + ReLU layers."""

    def __init__(self, ch_in: int, ch_out: int):
        super().__init__(
            nn.Conv2d(ch_in, ch_out, 3, padding=1, bias=False),
            nn.BatchNorm2d(ch_out),
            nn.ReLU(inplace=True),
            nn.Conv2d(ch_out, ch_out, 3, padding=1, bias=False),
            nn.BatchNorm2d(ch_out),
            nn.ReLU(inplace=True),
        )


class UpConv(nn.Sequential):
    def __init__(self, ch_in: int, ch_out: int):
        super().__init__(
            nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False),
            nn.Conv2d(ch_in, ch_out, 3, padding=1, bias=False),
            nn.BatchNorm2d(ch_out),
            nn.ReLU(inplace=True),
        )


class AttentionGate(nn.Module):
    """Additive attention on a skip connection, driven by a coarser gating signal.

    The skip features are projected with a strided 1x1 conv onto the gating
    grid, added to the projected gating signal, rectified, reduced to one
    channel and squashed by a sigmoid. The coefficients are upsampled back to
    the skip resolution and multiply the skip features. The last projection
    starts at zero weight and zero bias, so every coefficient is 0.5 at
    initialization.
    """

    def __init__(self, skip_channels: int, gating_channels: int, inter_channels: int):
        super().__init__()
        if min(skip_channels, gating_channels, inter_channels) < 1:
            raise ValueError("attention gate channel counts must be positive")
        self.skip_channels = skip_channels
        self.gating_channels = gating_channels
        self.theta = nn.Conv2d(skip_channels, inter_channels, 1, stride=2, bias=False)
        self.phi = nn.Conv2d(gating_channels, inter_channels, 1)
        self.psi = nn.Conv2d(inter_channels, 1, 1)
        nn.init.zeros_(self.psi.weight)
        nn.init.zeros_(self.psi.bias)
        self.coefficients: torch.Tensor | None = None

    def forward(self, skip: torch.Tensor, gating: torch.Tensor) -> torch.Tensor:
        if skip.shape[1] != self.skip_channels or gating.shape[1] != self.gating_channels:
            raise ValueError(
                f"gate expects {self.skip_channels}/{self.gating_channels} channels, "
                f"got {skip.shape[1]}/{gating.shape[1]}"
            )
        h, w = skip.shape[-2:]
        if (h + 1) // 2 != gating.shape[-2] or (w + 1) // 2 != gating.shape[-1]:
            raise ValueError(f"gating grid {tuple(gating.shape[-2:])} is not half of skip grid {(h, w)}")
        q = F.relu(self.theta(skip) + self.phi(gating))
        alpha = torch.sigmoid(self.psi(q))
        alpha = F.interpolate(alpha, size=(h, w), mode="bilinear", align_corners=False)
        self.coefficients = alpha.detach()
        return skip * alpha


class AttentionUNet(nn.Module):
    """U-Net whose skip connections pass through attention gates.

    Fully convolutional: any input whose sides are divisible by 2**depth
    works, not just ``cfg.input_size``. The output is softmax-normalized
    over the class channel.
    """

    def __init__(self, cfg: UNetConfig):
        super().__init__()
        self.config = cfg
        widths = [cfg.base_channels * 2 ** i for i in range(cfg.depth + 1)]
        self.encoders = nn.ModuleList()
        ch = cfg.in_channels
        for width in widths:
            self.encoders.append(ConvBlock(ch, width))
            ch = width
        self.pool = nn.MaxPool2d(2)
        self.ups = nn.ModuleList()
        self.gates = nn.ModuleList()
        self.decoders = nn.ModuleList()
        for level in reversed(range(cfg.depth)):
            skip, coarse = widths[level], widths[level + 1]
            self.ups.append(UpConv(coarse, skip))
            self.gates.append(AttentionGate(skip, coarse, max(skip // 2, 1)) if cfg.attention else nn.Identity())
            self.decoders.append(ConvBlock(2 * skip, skip))
        self.head = nn.Conv2d(widths[0], cfg.num_classes, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.logits(x), dim=1)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        factor = 2 ** self.config.depth
        if x.dim() != 4 or x.shape[-2] % factor or x.shape[-1] % factor:
            raise ValueError(f"input must be (B, C, H, W) with H, W divisible by {factor}, got {tuple(x.shape)}")
        skips = []
        for i, enc in enumerate(self.encoders):
            x = enc(x if i == 0 else self.pool(x))
            skips.append(x)
        x = skips.pop()
        for up, gate, dec in zip(self.ups, self.gates, self.decoders):
            skip = skips.pop()
            gated = gate(skip, x) if self.config.attention else skip
            x = dec(torch.cat([gated, up(x)], dim=1))
        return self.head(x)

    def attention_maps(self) -> list[torch.Tensor]:
        """Coefficients from the last forward pass, coarsest gate first."""
        if not self.config.attention:
            return []
        return [g.coefficients for g in self.gates]


class Critic(nn.Module):
    """Encoder mirroring the generator's, with a pooled logistic head.

    Takes a class-probability mask, concatenated with the image when
    ``image_conditioned`` is set, and returns one probability per sample.
    Uses instance normalization so each sample is scored independently of
    the rest of the batch.
    """

    def __init__(self, cfg: CriticConfig):
        super().__init__()
        self.config = cfg
        layers: list[nn.Module] = []
        ch = cfg.input_channels
        for i in range(cfg.depth + 1):
            width = cfg.base_channels * 2 ** i
            first = nn.Conv2d(ch, width, 3, padding=1)
            second = nn.Conv2d(width, width, 3, padding=1)
            if i == 0:
                layers += [first, nn.LeakyReLU(0.2), second, nn.LeakyReLU(0.2)]
            else:
                layers += [
                    first, nn.InstanceNorm2d(width, affine=True), nn.LeakyReLU(0.2),
                    second, nn.InstanceNorm2d(width, affine=True), nn.LeakyReLU(0.2),
                ]
            if i < cfg.depth:
                layers.append(nn.MaxPool2d(2))
            ch = width
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(ch, 1)

    def forward(self, mask: torch.Tensor, image: torch.Tensor | None = None) -> torch.Tensor:
        if self.config.image_conditioned:
            if image is None:
                raise ValueError("image-conditioned critic needs the input image")
            mask = torch.cat([image, mask], dim=1)
        if mask.shape[1] != self.config.input_channels:
            raise ValueError(f"critic expects {self.config.input_channels} channels, got {mask.shape[1]}")
        pooled = self.features(mask).mean(dim=(2, 3))
        return torch.sigmoid(self.head(pooled)).squeeze(1)


def build_generator(cfg: UNetConfig) -> AttentionUNet:
    return AttentionUNet(cfg)


def build_critic(cfg: CriticConfig) -> Critic:
    return Critic(cfg)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def save_weights(model: nn.Module, path: str | Path, optimizer: torch.optim.Optimizer | None = None,
                 extra: dict | None = None, state_dict: dict | None = None) -> None:
    """Write a checkpoint with the model config, its hash, named tensors and optimizer state.

    ``state_dict`` substitutes other weights for the model's current ones.
    """
    cfg = model.config
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config_type": type(cfg).__name__,
        "config": dataclasses.asdict(cfg),
        "config_hash": config_hash(cfg),
        "state_dict": model.state_dict() if state_dict is None else state_dict,
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "extra": extra or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def read_checkpoint(path: str | Path) -> dict:
    try:
        payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    return payload


def load_weights(model: nn.Module, path: str | Path, optimizer: torch.optim.Optimizer | None = None) -> dict:
    """Load a checkpoint into ``model``; returns the checkpoint's ``extra`` dict."""
    payload = read_checkpoint(path)
    if payload["config_hash"] != config_hash(model.config):
        raise CheckpointError(
            f"{path}: checkpoint was written for {payload['config_type']}{payload['config']}, "
            f"model is {model.config}"
        )
    try:
        model.load_state_dict(payload["state_dict"])
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: parameter mismatch ({exc})") from exc
    if optimizer is not None and payload["optimizer"] is not None:
        optimizer.load_state_dict(payload["optimizer"])
    return payload["extra"]


def model_from_checkpoint(path: str | Path) -> tuple[nn.Module, dict]:
    payload = read_checkpoint(path)
    if payload["config_type"] == "UNetConfig":
        model = build_generator(UNetConfig(**payload["config"]))
    elif payload["config_type"] == "CriticConfig":
        model = build_critic(CriticConfig(**payload["config"]))
    else:
        raise CheckpointError(f"{path}: unknown model type {payload['config_type']}")
    extra = load_weights(model, path)
    return model, extra
