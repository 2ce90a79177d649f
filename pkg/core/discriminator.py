"""
Discriminator Module
Real/deblocked classifier: strided conv blocks, global average pooling, FC, sigmoid.
"""

from dataclasses import asdict, dataclass
from typing import Tuple

import torch
import torch.nn as nn
from torch import Tensor

from core.exceptions import ShapeError
from core.nn_core import PRELU_INIT, BATCHNORM_EPS, BATCHNORM_MOMENTUM, gap


@dataclass
class DiscriminatorConfig:
    channels: Tuple[int, ...] = (64, 128, 256, 512)
    eps_clamp: float = 1e-6

    def __post_init__(self):
        self.channels = tuple(self.channels)

    def to_dict(self) -> dict:
        return asdict(self)


class Discriminator(nn.Module):
    """Four Conv3 stride-2 blocks (BN on all but the first) + PReLU, GAP, FC, sigmoid"""

    def __init__(self, config: DiscriminatorConfig):
        super().__init__()
        self.config = config
        layers = []
        channels_in = 3
        for index, channels_out in enumerate(config.channels):
            layers.append(nn.Conv2d(channels_in, channels_out, 3, stride=2, padding=1))
            if index > 0:
                layers.append(nn.BatchNorm2d(channels_out, eps=BATCHNORM_EPS, momentum=BATCHNORM_MOMENTUM))
            layers.append(nn.PReLU(init=PRELU_INIT))
            channels_in = channels_out
        self.features = nn.Sequential(*layers)
        self.classifier = nn.Linear(channels_in, 1)

    def forward(self, images: Tensor) -> Tensor:
        """(batch, 3, H, W) -> (batch,) probabilities clamped to [eps, 1 - eps]"""
        if images.dim() != 4 or images.shape[1] != 3:
            raise ShapeError(f"Discriminator expects (batch, 3, H, W), got {tuple(images.shape)}")
        if images.shape[2] % 16 or images.shape[3] % 16:
            raise ShapeError(f"Discriminator input sides must be divisible by 16, got {tuple(images.shape[2:])}")
        logits = self.classifier(gap(self.features(images * 2.0 - 1.0))).squeeze(1)
        eps = self.config.eps_clamp
        return torch.sigmoid(logits).clamp(eps, 1.0 - eps)


def discriminate(img: Tensor, discriminator: Discriminator) -> Tensor:
    """Probability that a single (3, H, W) image is an uncompressed original"""
    if img.dim() != 3:
        raise ShapeError(f"Expected (3, H, W) image, got {tuple(img.shape)}")
    return discriminator(img.unsqueeze(0)).squeeze(0)
