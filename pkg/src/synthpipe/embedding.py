"""Fixed-length image embeddings for the distributional GAN metrics.

Inputs are single-channel images in [-1, 1] (the GAN's output range).  They
are mapped to [0, 1], replicated to three channels and standardized with the
ImageNet channel statistics before entering the backbone; the embedding is
the globally average-pooled output of the last convolutional stage.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .errors import BackboneLoadError, ShapeError
from .utils import seeded

log = logging.getLogger(__name__)

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
BACKBONES = ("resnet34", "random_conv")


class RandomConvEncoder(nn.Module):
    """Small frozen random-weight conv encoder, a stand-in when pretrained
    weights are unavailable."""

    def __init__(self, dim: int = 512):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(3, 32, 5, 2, 2), nn.ReLU(),
            nn.Conv2d(32, 64, 3, 2, 1), nn.ReLU(),
            nn.Conv2d(64, 128, 3, 2, 1), nn.ReLU(),
            nn.Conv2d(128, dim, 3, 2, 1), nn.ReLU(),
            nn.AdaptiveAvgPool2d(1),
            nn.Flatten(),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.features(x)


@dataclass
class Backbone:
    name: str
    module: nn.Module
    dim: int

    def __post_init__(self):
        self.module.eval()
        for p in self.module.parameters():
            p.requires_grad_(False)
        self._mean = torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1)
        self._std = torch.tensor(IMAGENET_STD).view(1, 3, 1, 1)

    def __call__(self, images: torch.Tensor) -> torch.Tensor:
        """``images``: (B, H, W, 1) in [-1, 1] -> (B, dim)."""
        x = (images.permute(0, 3, 1, 2).float() + 1.0) / 2.0
        x = (x.expand(-1, 3, -1, -1) - self._mean) / self._std
        with torch.no_grad():
            return self.module(x)


def load_backbone(name: str = "resnet34", weights: str | Path | None = "default", seed: int = 0) -> Backbone:
    """Build an embedding backbone.

    ``resnet34`` loads ImageNet weights (``weights="default"``, via the torch
    hub cache), a local state-dict file, or random weights when ``weights`` is
    None.  ``random_conv`` is always randomly initialized from ``seed``.
    """
    if name == "random_conv":
        with seeded(seed, deterministic=False):
            return Backbone(name, RandomConvEncoder(512), 512)
    if name != "resnet34":
        raise BackboneLoadError(f"unknown backbone {name!r}; choose from {BACKBONES}")

    import torchvision

    try:
        if weights == "default":
            net = torchvision.models.resnet34(weights=torchvision.models.ResNet34_Weights.IMAGENET1K_V1)
        else:
            with seeded(seed, deterministic=False):
                net = torchvision.models.resnet34(weights=None)
            if weights is not None:
                net.load_state_dict(torch.load(weights, map_location="cpu", weights_only=True))
            else:
                log.warning("resnet34 backbone is randomly initialized")
    except Exception as exc:  # download, file and state-dict failures all surface the same way
        raise BackboneLoadError(f"could not load resnet34 weights ({weights}): {exc}") from exc
    net.fc = nn.Identity()
    return Backbone(name, net, 512)


def embed_images(images, backbone: Backbone, batch_size: int = 64) -> np.ndarray:
    """Embed a batch of single-channel images, one row per image in input order.

    Accepts ``(N, H, W)`` or ``(N, H, W, 1)`` arrays.
    """
    x = torch.as_tensor(np.asarray(images, dtype=np.float32))
    if x.ndim == 3:
        x = x.unsqueeze(-1)
    if x.ndim != 4 or x.shape[-1] != 1:
        raise ShapeError(f"expected single-channel images (N, H, W, 1), got {tuple(x.shape)}")
    if x.shape[0] == 0:
        return np.zeros((0, backbone.dim), dtype=np.float32)
    out = [backbone(x[i:i + batch_size]) for i in range(0, x.shape[0], batch_size)]
    return torch.cat(out).numpy()
