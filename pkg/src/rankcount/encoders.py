"""Image encoders mapping HxWx3 images to non-negative feature vectors."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
from torch import nn

ARCHITECTURES = ("toy_cnn", "backbone_adapter")


@dataclass(frozen=True)
class EncoderConfig:
    architecture: str = "toy_cnn"
    feature_dim: Optional[int] = None
    input_size: tuple = (48, 48)
    backbone_weights: Optional[str] = None

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown encoder architecture {self.architecture!r}")
        if self.feature_dim is None:
            dim = 2048 if self.architecture == "backbone_adapter" else 64
            object.__setattr__(self, "feature_dim", dim)
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be positive")
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))


def _block(cin, cout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1),
        nn.ReLU(inplace=True),
        nn.MaxPool2d(2),
    )


class ToyCNN(nn.Module):
    """Four conv blocks, global average pooling and a rectified projection."""

    def __init__(self, feature_dim: int = 64, widths=(8, 16, 24, 32)):
        super().__init__()
        chans = (3,) + tuple(widths)
        self.features = nn.Sequential(*(_block(a, b) for a, b in zip(chans, chans[1:])))
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.project = nn.Linear(chans[-1], feature_dim)

    def forward(self, x):
        h = self.pool(self.features(x)).flatten(1)
        return torch.relu(self.project(h))


class BackboneAdapter(nn.Module):
    """ResNet-50 trunk (classifier removed) followed by a ReLU.

    Pretrained weights are never downloaded; pass a state-dict path instead.
    """

    def __init__(self, feature_dim: int = 2048, weights_path: Optional[str] = None):
        super().__init__()
        from torchvision.models import resnet50

        trunk = resnet50(weights=None)
        trunk.fc = nn.Identity()
        if weights_path:
            state = torch.load(weights_path, map_location="cpu", weights_only=True)
            # the classifier head is discarded; everything else must match
            state = {k: v for k, v in state.items() if not k.startswith("fc.")}
            trunk.load_state_dict(state, strict=True)
        self.trunk = trunk
        self.project = nn.Identity() if feature_dim == 2048 else nn.Linear(2048, feature_dim)

    def forward(self, x):
        return torch.relu(self.project(self.trunk(x)))


def build_encoder(cfg: EncoderConfig) -> nn.Module:
    if cfg.architecture == "toy_cnn":
        return ToyCNN(cfg.feature_dim)
    return BackboneAdapter(cfg.feature_dim, cfg.backbone_weights)
