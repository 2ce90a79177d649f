"""
Shared helpers for the test suite: synthetic images, toy caption datasets and
tiny model configurations
"""

import math
import os
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import torch
from PIL import Image

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from core.discriminator import DiscriminatorConfig
from core.encoders import EncoderConfig
from core.generator import GeneratorConfig
from core.losses import LossWeights
from core.trainer import TrainConfig

SLOW_TESTS = os.environ.get('TGJAR_SLOW_TESTS', '0') == '1'

COLORS = {
    'red': (0.85, 0.15, 0.1),
    'yellow': (0.9, 0.85, 0.1),
    'blue': (0.1, 0.2, 0.85),
    'green': (0.15, 0.7, 0.2),
    'white': (0.92, 0.92, 0.9),
    'black': (0.08, 0.08, 0.1),
    'orange': (0.95, 0.55, 0.1),
    'purple': (0.55, 0.15, 0.7),
}

TOY_CAPTIONS = [
    'a red bird with a short beak',
    'a yellow bird on a branch',
    'a blue bird with white wings',
    'a green flower with long petals',
    'a white flower in the grass',
    'a black bird with a red crown',
    'an orange flower with yellow stamen',
    'a purple flower with round petals',
]


def smooth_image(size: int = 64, seed: int = 0, dtype=torch.float32, width: Optional[int] = None) -> torch.Tensor:
    """Low-frequency RGB image in [0.1, 0.9]"""
    width = width or size
    rng = np.random.default_rng(seed)
    ys, xs = np.meshgrid(np.linspace(0, 1, size), np.linspace(0, 1, width), indexing='ij')
    channels = []
    for _ in range(3):
        fx, fy = rng.uniform(0.5, 2.0, size=2)
        phase = rng.uniform(0, 2 * math.pi)
        channels.append(0.5 + 0.4 * np.sin(2 * math.pi * (fx * xs + fy * ys) + phase))
    return torch.from_numpy(np.stack(channels)).to(dtype)


def colored_object_image(color: Sequence[float], size: int = 64, seed: int = 0) -> torch.Tensor:
    """Smooth background with a colored disc in the middle"""
    background = smooth_image(size, seed) * 0.5 + 0.25
    ys, xs = torch.meshgrid(torch.linspace(-1, 1, size), torch.linspace(-1, 1, size), indexing='ij')
    disc = ((xs ** 2 + ys ** 2) < 0.35).to(torch.float32)
    fill = torch.tensor(color, dtype=torch.float32).view(3, 1, 1).expand(3, size, size)
    return background * (1 - disc) + fill * disc


def ramp_image(size: int = 64) -> torch.Tensor:
    ramp = torch.linspace(0.05, 0.95, size, dtype=torch.float64)
    return torch.stack([ramp.view(1, -1).expand(size, size),
                        ramp.view(-1, 1).expand(size, size),
                        torch.full((size, size), 0.5, dtype=torch.float64)])


def write_png(img: torch.Tensor, path: Path) -> None:
    array = (img.clamp(0, 1).permute(1, 2, 0).numpy() * 255).round().astype(np.uint8)
    Image.fromarray(array, mode='RGB').save(path)


def make_toy_dataset(root, n: int = 8, size: int = 64, captions: Optional[List[str]] = None,
                     extra_lines: int = 0) -> Path:
    """Write n images and one caption file per image under root/images and root/captions"""
    root = Path(root)
    (root / 'images').mkdir(parents=True, exist_ok=True)
    (root / 'captions').mkdir(parents=True, exist_ok=True)
    captions = captions or TOY_CAPTIONS
    for index in range(n):
        caption = captions[index % len(captions)]
        color_name = next((c for c in COLORS if c in caption.split()), 'red')
        image = colored_object_image(COLORS[color_name], size, seed=index)
        stem = f"img_{index:03d}"
        write_png(image, root / 'images' / f"{stem}.png")
        lines = [caption] + [f"{caption} again {k}" for k in range(extra_lines)]
        (root / 'captions' / f"{stem}.txt").write_text('\n'.join(lines) + '\n', encoding='utf-8')
    return root


def tiny_encoder_config(dim: int = 32) -> EncoderConfig:
    return EncoderConfig(word_dim=16, embedding_dim=dim, region_grid=4,
                         backbone_channels=(8, 16, 16), backbone_strides=(2, 2, 2))


def tiny_generator_config(dim: int = 32, input_size: int = 64, **overrides) -> GeneratorConfig:
    params = dict(base_channels=8, bottleneck_channels=16, n_resblocks=3, input_size=input_size,
                  word_dim=dim, sentence_dim=dim)
    params.update(overrides)
    return GeneratorConfig(**params)


def tiny_train_config(**overrides) -> TrainConfig:
    params = dict(
        stage='adversarial', qf=5, batch_size=4, epochs=1, seed=0, image_size=64, flip=False,
        encoder=tiny_encoder_config(), generator=tiny_generator_config(),
        discriminator=DiscriminatorConfig(channels=(8, 16, 16, 16)),
        weights=LossWeights(),
    )
    params.update(overrides)
    return TrainConfig(**params)
