"""
Quality Metrics Module
Differentiable reference-based perceptual distance (LPIPS-style), PSNR and a
Frechet distance over pooled extractor features (FID-small).
"""

import math
import pickle
from functools import lru_cache
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy import linalg
from torch import Tensor

from core.exceptions import CheckpointError, DomainError, NumericError, ShapeError
from utils.logger import get_logger

logger = get_logger(__name__)

PSNR_CAP = 100.0
EIGEN_TOLERANCE = 1e-8
DEFAULT_STAGES = (16, 32, 64)


class PerceptualExtractor(nn.Module):
    """
    Fixed three-stage conv feature pyramid

    Weights come from a seeded RNG and are never trained: every parameter has requires_grad disabled.
    """

    def __init__(self, seed: int = 1234, stages: Tuple[int, ...] = DEFAULT_STAGES):
        super().__init__()
        self.seed = seed
        self.stages = nn.ModuleList()
        generator = torch.Generator().manual_seed(seed)
        channels_in = 3
        for index, channels_out in enumerate(stages):
            stride = 1 if index == 0 else 2
            conv_a = nn.Conv2d(channels_in, channels_out, 3, stride=stride, padding=1)
            conv_b = nn.Conv2d(channels_out, channels_out, 3, stride=1, padding=1)
            for conv in (conv_a, conv_b):
                fan_in = conv.weight[0].numel()
                with torch.no_grad():
                    conv.weight.copy_(torch.randn(conv.weight.shape, generator=generator) * math.sqrt(2.0 / fan_in))
                    conv.bias.copy_(torch.randn(conv.bias.shape, generator=generator) * 0.1)
            self.stages.append(nn.Sequential(conv_a, nn.ReLU(), conv_b, nn.ReLU()))
            channels_in = channels_out
        self.freeze()

    @classmethod
    def from_checkpoint(cls, path, stages: Tuple[int, ...] = DEFAULT_STAGES) -> 'PerceptualExtractor':
        """
        Load external extractor weights saved as a torch state dict

        Every tensor must match the layer shapes of the stage plan.

        Raises:
            CheckpointError: unreadable file, missing or extra keys, or a shape mismatch
        """
        try:
            state = torch.load(path, map_location='cpu', weights_only=True)
        except (OSError, RuntimeError, ValueError, EOFError, pickle.UnpicklingError) as e:
            raise CheckpointError(f"Cannot read perceptual weights {path}: {e}") from e
        if not isinstance(state, dict):
            raise CheckpointError(f"{path} is not a state dict")

        extractor = cls(seed=0, stages=stages)
        expected = extractor.state_dict()
        missing, extra = set(expected) - set(state), set(state) - set(expected)
        if missing or extra:
            raise CheckpointError(f"Perceptual weights {path} do not fit the extractor "
                                  f"(missing {sorted(missing)}, unexpected {sorted(extra)})")
        for name, tensor in expected.items():
            if tuple(state[name].shape) != tuple(tensor.shape):
                raise CheckpointError(f"Perceptual weight {name} has shape {tuple(state[name].shape)}, "
                                      f"expected {tuple(tensor.shape)}")
        extractor.load_state_dict({name: value.to(torch.float32) for name, value in state.items()})
        extractor.seed = None
        extractor.freeze()
        logger.info(f"Loaded perceptual extractor weights from {path}")
        return extractor

    def freeze(self) -> None:
        for param in self.parameters():
            param.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True) -> 'PerceptualExtractor':
        # Always inference mode
        return super().train(False)

    def forward(self, images: Tensor) -> Tuple[Tensor, ...]:
        """(batch, 3, H, W) in [0, 1] -> per-stage feature maps"""
        x = images * 2.0 - 1.0
        outputs = []
        for stage in self.stages:
            x = stage(x)
            outputs.append(x)
        return tuple(outputs)


@lru_cache(maxsize=None)
def default_extractor(seed: int = 1234) -> PerceptualExtractor:
    """Shared frozen extractor; safe to use from concurrent readers"""
    extractor = PerceptualExtractor(seed)
    logger.debug(f"Perceptual extractor ready (seed={seed})")
    return extractor


def load_extractor(seed: int = 1234, weights_path: Optional[str] = None) -> PerceptualExtractor:
    """External weights when a path is given, otherwise the seeded extractor"""
    if weights_path:
        return PerceptualExtractor.from_checkpoint(weights_path)
    return PerceptualExtractor(seed)


def _unit_normalize(features: Tensor, eps: float = 1e-10) -> Tensor:
    # Finite gradient at all-zero feature vectors
    return features / torch.sqrt(torch.sum(features ** 2, dim=1, keepdim=True) + eps)


def _as_batch(img: Tensor) -> Tuple[Tensor, bool]:
    if img.dim() == 3:
        return img.unsqueeze(0), True
    if img.dim() != 4:
        raise ShapeError(f"Expected (3, H, W) or (batch, 3, H, W), got {tuple(img.shape)}")
    return img, False


def perceptual_distance(a: Tensor, b: Tensor, extractor: Optional[PerceptualExtractor] = None) -> Tensor:
    """
    Reference-based perceptual distance, differentiable in both arguments

    Per stage: unit-normalize channels, square the difference, average over
    channels and space; sum over stages.

    Returns:
        Scalar tensor for single images, (batch,) tensor for batches
    """
    if a.shape != b.shape:
        raise ShapeError(f"Perceptual distance needs equal shapes, got {tuple(a.shape)} vs {tuple(b.shape)}")
    extractor = extractor or default_extractor()
    batch_a, single = _as_batch(a)
    batch_b, _ = _as_batch(b)
    dtype = next(extractor.parameters()).dtype
    features_a = extractor(batch_a.to(dtype))
    features_b = extractor(batch_b.to(dtype))

    total = torch.zeros(batch_a.shape[0], dtype=dtype, device=batch_a.device)
    for fa, fb in zip(features_a, features_b):
        diff = (_unit_normalize(fa) - _unit_normalize(fb)) ** 2
        total = total + diff.mean(dim=(1, 2, 3))
    return total.squeeze(0) if single else total


def psnr(a: Tensor, b: Tensor) -> float:
    """PSNR in dB on the [0, 1] scale; identical inputs give +inf"""
    if a.shape != b.shape:
        raise ShapeError(f"PSNR needs equal shapes, got {tuple(a.shape)} vs {tuple(b.shape)}")
    mse = torch.mean((a.to(torch.float64) - b.to(torch.float64)) ** 2).item()
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def cap_psnr(value: float, cap: float = PSNR_CAP) -> float:
    """Cap the +inf sentinel for reports"""
    return min(value, cap)


def pooled_features(images: Union[Tensor, Sequence[Tensor]],
                    extractor: Optional[PerceptualExtractor] = None) -> np.ndarray:
    """Concatenated per-stage global-average features, one row per image (float64)"""
    extractor = extractor or default_extractor()
    if isinstance(images, Tensor):
        batch = images if images.dim() == 4 else images.unsqueeze(0)
    else:
        batch = torch.stack(list(images))
    dtype = next(extractor.parameters()).dtype
    with torch.no_grad():
        stages = extractor(batch.to(dtype))
        pooled = torch.cat([s.mean(dim=(2, 3)) for s in stages], dim=1)
    return pooled.to(torch.float64).cpu().numpy()


def _psd_sqrt(matrix: np.ndarray, tolerance: float = EIGEN_TOLERANCE) -> np.ndarray:
    symmetric = (matrix + matrix.T) / 2.0
    eigenvalues, eigenvectors = linalg.eigh(symmetric)
    # Absolute tolerance; small negatives are rounding noise and clamp to zero
    if eigenvalues.size and eigenvalues.min() < -tolerance:
        raise NumericError(f"Covariance is not positive semi-definite (eigenvalue {eigenvalues.min():.3e})",
                           component='fid_small')
    eigenvalues = np.clip(eigenvalues, 0.0, None)
    return (eigenvectors * np.sqrt(eigenvalues)) @ eigenvectors.T


def frechet_distance(mu1: np.ndarray, sigma1: np.ndarray, mu2: np.ndarray, sigma2: np.ndarray) -> float:
    """
    Frechet distance between two Gaussians

    ||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^1/2), with the trace of the
    square root taken as Tr((S1^1/2 S2 S1^1/2)^1/2) so every root is of a
    symmetric PSD matrix.
    """
    mu1, mu2 = np.atleast_1d(mu1), np.atleast_1d(mu2)
    sigma1, sigma2 = np.atleast_2d(sigma1), np.atleast_2d(sigma2)
    if mu1.shape != mu2.shape or sigma1.shape != sigma2.shape:
        raise ShapeError("Frechet distance needs statistics of equal dimension")

    diff = mu1 - mu2
    root1 = _psd_sqrt(sigma1)
    middle = _psd_sqrt(root1 @ sigma2 @ root1)
    distance = float(diff @ diff + np.trace(sigma1) + np.trace(sigma2) - 2.0 * np.trace(middle))
    return max(distance, 0.0)


def feature_statistics(features: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    if features.shape[0] < 2:
        raise DomainError("Need at least 2 samples to fit a covariance")
    return features.mean(axis=0), np.cov(features, rowvar=False)


def frechet_distance_from_features(features_a: np.ndarray, features_b: np.ndarray) -> float:
    mu1, sigma1 = feature_statistics(features_a)
    mu2, sigma2 = feature_statistics(features_b)
    return frechet_distance(mu1, sigma1, mu2, sigma2)


def fid_small(set_a: Union[Tensor, Sequence[Tensor]], set_b: Union[Tensor, Sequence[Tensor]],
              extractor: Optional[PerceptualExtractor] = None) -> float:
    """Frechet distance between Gaussian fits of pooled extractor features of two image sets"""
    if len(set_a) < 2 or len(set_b) < 2:
        raise DomainError("fid_small needs at least 2 images per set")
    return frechet_distance_from_features(pooled_features(set_a, extractor),
                                          pooled_features(set_b, extractor))
