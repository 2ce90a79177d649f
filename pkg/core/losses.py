"""
Loss Functions Module
Contrastive loss in perceptual-quality space, L1 reconstruction, adversarial
losses, the image-text matching (DAMSM) loss and their weighted total.

Notes:
    The generator adversarial term is the non-saturating -log D(fake); the
    discriminator term follows the minimax objective exactly.
    The unsimplified ratio form of the contrastive loss is available as
    contrastive_loss_unsimplified and only used when selected; its
    denominator changes sign near the compressed image's own quality.
"""

import math
from dataclasses import asdict, dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import Tensor

from core.encoders import ImageSemanticFeatures
from core.exceptions import DomainError, NumericError, ShapeError
from core.quality_metrics import PerceptualExtractor, perceptual_distance


@dataclass
class LossWeights:
    """Weights of the total loss: contrastive, reconstruction, GAN, image-text; c is the contrastive constant"""
    lambda1: float = 0.01
    lambda2: float = 1.0
    lambda3: float = 0.001
    lambda4: float = 0.0005
    c: float = 0.1

    def __post_init__(self):
        for name in ('lambda1', 'lambda2', 'lambda3', 'lambda4'):
            if getattr(self, name) < 0:
                raise DomainError(f"{name} must be non-negative")
        if self.c <= 0:
            raise DomainError("Contrastive constant c must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class DamsmGammas:
    """Smoothing factors of the image-text matching loss"""
    gamma1: float = 5.0
    gamma2: float = 5.0
    gamma3: float = 10.0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossReport:
    l_c: float
    l_r: float
    l_g: float
    l_it: float
    total: float
    extras: Dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        data = {'l_c': self.l_c, 'l_r': self.l_r, 'l_g': self.l_g, 'l_it': self.l_it, 'total': self.total}
        data.update(self.extras)
        return data


def _check_same_shape(*tensors: Tensor) -> None:
    shapes = {tuple(t.shape) for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"Loss inputs must share one shape, got {sorted(shapes)}")


def contrastive_loss(id_: Tensor, i: Tensor, ic: Tensor, c: float = 0.1,
                     extractor: Optional[PerceptualExtractor] = None) -> Tensor:
    """
    F(I^d, I) / (F(I^d, I^c) + c), averaged over the batch

    The clean image is the positive sample and the compressed image the
    negative one; differentiable with respect to id_.
    """
    _check_same_shape(id_, i, ic)
    if c <= 0:
        raise DomainError("Contrastive constant c must be positive")
    positive = perceptual_distance(id_, i, extractor)
    negative = perceptual_distance(id_, ic, extractor)
    return (positive / (negative + c)).mean()


def contrastive_loss_unsimplified(id_: Tensor, i: Tensor, ic: Tensor, guard: float = 1e-6,
                                  extractor: Optional[PerceptualExtractor] = None) -> Tensor:
    """|(F(I^d, I) - F(I, I)) / (F(I^d, I) - F(I^c, I))| with a denominator guard"""
    _check_same_shape(id_, i, ic)
    numerator = perceptual_distance(id_, i, extractor) - perceptual_distance(i, i, extractor)
    denominator = perceptual_distance(id_, i, extractor) - perceptual_distance(ic, i, extractor)
    sign = torch.where(denominator >= 0, torch.ones_like(denominator), -torch.ones_like(denominator))
    denominator = sign * denominator.abs().clamp_min(guard)
    return (numerator / denominator).abs().mean()


def reconstruction_loss(id_: Tensor, i: Tensor) -> Tensor:
    """Mean absolute difference per pixel-channel"""
    _check_same_shape(id_, i)
    return torch.mean(torch.abs(id_ - i))


def gan_losses(d_real: Tensor, d_fake: Tensor) -> Tuple[Tensor, Tensor]:
    """
    Args:
        d_real: D(I) probabilities
        d_fake: D(I^d) probabilities

    Returns:
        (d_loss = -[log D(I) + log(1 - D(I^d))], g_loss = -log D(I^d)), batch means
    """
    d_real = torch.as_tensor(d_real, dtype=torch.float64) if not isinstance(d_real, Tensor) else d_real
    d_fake = torch.as_tensor(d_fake, dtype=torch.float64) if not isinstance(d_fake, Tensor) else d_fake
    d_loss = -(torch.log(d_real) + torch.log1p(-d_fake)).mean()
    g_loss = -torch.log(d_fake).mean()
    return d_loss, g_loss


def _cosine_matrix(a: Tensor, b: Tensor, eps: float = 1e-8) -> Tensor:
    """Cosine similarity between every row of a (B, D) and every row of b (B, D)"""
    a_norm = a / a.norm(dim=1, keepdim=True).clamp_min(eps)
    b_norm = b / b.norm(dim=1, keepdim=True).clamp_min(eps)
    return a_norm @ b_norm.T


def _symmetric_nll(scores: Tensor) -> Tensor:
    """
    scores[i, j] relates image i and caption j. Returns
    -sum_j [log P(s_j | I_j) + log P(I_j | s_j)] / B
    """
    batch = scores.shape[0]
    log_caption_given_image = F.log_softmax(scores, dim=1).diagonal()
    log_image_given_caption = F.log_softmax(scores, dim=0).diagonal()
    return -(log_caption_given_image + log_image_given_caption).sum() / batch


def word_region_similarity(words: Tensor, regions: Tensor, gamma1: float, gamma2: float,
                           length: Optional[int] = None) -> Tensor:
    """
    Attention-driven matching score between one caption and one image

    Args:
        words: (D, T) word features
        regions: (D, R) region features
        length: number of real (non-padding) words

    Returns:
        log(sum_i exp(gamma2 * cos(e_i, c_i))) as a scalar
    """
    if length is not None:
        words = words[:, :length]
    attention = F.softmax(words.T @ regions, dim=0)            # T x R, normalized over words
    attention = F.softmax(gamma1 * attention, dim=1)           # over regions per word
    context = regions @ attention.T                            # D x T
    cos = F.cosine_similarity(context, words, dim=0, eps=1e-8)  # T
    return torch.logsumexp(gamma2 * cos, dim=0)


def damsm_loss(image_features: ImageSemanticFeatures, words: Tensor, sentences: Tensor,
               gammas: Optional[DamsmGammas] = None,
               lengths: Optional[Sequence[int]] = None) -> Tuple[Tensor, Tensor]:
    """
    Word- and sentence-level image-text matching losses over a batch

    Args:
        image_features: regions (B, D, R) and global (B, D)
        words: (B, D, T) word features
        sentences: (B, D) sentence features
        gammas: smoothing factors
        lengths: real caption lengths (defaults to T)

    Returns:
        (l_word, l_sentence)
    """
    gammas = gammas or DamsmGammas()
    batch = sentences.shape[0]
    if batch < 1:
        raise DomainError("Image-text matching loss needs a non-empty batch")
    if image_features.global_.shape != sentences.shape:
        raise ShapeError("Image and sentence features must share (batch, D)")
    if words.shape[0] != batch or image_features.regions.shape[0] != batch:
        raise ShapeError("Word and region batches must match the sentence batch")

    sentence_scores = gammas.gamma3 * _cosine_matrix(image_features.global_, sentences)
    l_sentence = _symmetric_nll(sentence_scores)

    lengths = list(lengths) if lengths is not None else [words.shape[2]] * batch
    rows = []
    for image_index in range(batch):
        row = [word_region_similarity(words[caption_index], image_features.regions[image_index],
                                      gammas.gamma1, gammas.gamma2, int(lengths[caption_index]))
               for caption_index in range(batch)]
        rows.append(torch.stack(row))
    word_scores = gammas.gamma3 * torch.stack(rows)
    l_word = _symmetric_nll(word_scores)
    return l_word, l_sentence


def total_loss(l_c, l_r, l_g, l_it, weights: Optional[LossWeights] = None) -> Tuple[Tensor, LossReport]:
    """
    Weighted sum lambda1*L_C + lambda2*L_R + lambda3*L_G + lambda4*L_IT

    Returns:
        (differentiable total, LossReport of detached values)
    """
    weights = weights or LossWeights()
    components = {'l_c': l_c, 'l_r': l_r, 'l_g': l_g, 'l_it': l_it}
    values = {}
    for name, value in components.items():
        value = torch.as_tensor(value, dtype=torch.float64) if not isinstance(value, Tensor) else value
        if not torch.isfinite(value).all():
            raise NumericError("Non-finite loss component", component=name)
        components[name] = value
        values[name] = float(value.detach())

    total = (weights.lambda1 * components['l_c'] + weights.lambda2 * components['l_r']
             + weights.lambda3 * components['l_g'] + weights.lambda4 * components['l_it'])
    report_total = (weights.lambda1 * values['l_c'] + weights.lambda2 * values['l_r']
                    + weights.lambda3 * values['l_g'] + weights.lambda4 * values['l_it'])
    if not math.isfinite(report_total):
        raise NumericError("Non-finite total loss", component='total')
    return total, LossReport(total=report_total, **values)
