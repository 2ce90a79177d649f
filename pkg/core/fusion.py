"""
Image-Text Fusion Module
Global fusion (sentence features -> bottleneck) and local fusion (word
attention -> decoder scales) used inside the generator.
"""

from typing import Optional, Tuple

import torch
import torch.nn as nn
from torch import Tensor

from core.exceptions import ShapeError
from core.nn_core import PRELU_INIT, conv_layer, gap, softmax, upsample_nearest2x


class GlobalFusionModule(nn.Module):
    """
    Condition a feature map on sentence features

    g = GAP(Conv3(x)); h = FC(FC([g, s])); out = Conv3([x, repeat(h)]).
    Shape-preserving.
    """

    def __init__(self, channels: int = 128, sentence_dim: int = 256):
        super().__init__()
        self.channels = channels
        self.sentence_dim = sentence_dim
        self.pool_conv = conv_layer(f"Conv3-{channels}-1-1", channels)
        self.fc1 = nn.Linear(channels + sentence_dim, channels)
        self.act = nn.PReLU(init=PRELU_INIT)
        self.fc2 = nn.Linear(channels, channels)
        self.out_conv = conv_layer(f"Conv3-{channels}-1-1", 2 * channels)

    def forward(self, x: Tensor, sentence: Tensor) -> Tensor:
        """
        Args:
            x: (batch, C, H, W)
            sentence: (batch, D)
        """
        if x.dim() != 4 or x.shape[1] != self.channels:
            raise ShapeError(f"Global fusion expects {self.channels} channels, got {tuple(x.shape)}")
        if sentence.shape != (x.shape[0], self.sentence_dim):
            raise ShapeError(f"Sentence features must be ({x.shape[0]}, {self.sentence_dim}), got {tuple(sentence.shape)}")
        pooled = gap(self.pool_conv(x))
        fused = self.fc2(self.act(self.fc1(torch.cat([pooled, sentence], dim=1))))
        repeated = fused[:, :, None, None].expand(-1, -1, x.shape[2], x.shape[3])
        return self.out_conv(torch.cat([x, repeated], dim=1))


class LocalFusionModule(nn.Module):
    """
    Word-level attention over spatial locations

    Word features are projected D -> C by a 1x1 conv, scored against every
    location with a dot product, softmaxed over words per location, and the
    attention-weighted word vectors are reshaped to C x H x W and upsampled x2.
    """

    def __init__(self, channels: int, word_dim: int = 256):
        super().__init__()
        self.channels = channels
        self.word_dim = word_dim
        self.project = nn.Conv1d(word_dim, channels, kernel_size=1)

    def forward(self, x: Tensor, words: Tensor, word_mask: Optional[Tensor] = None) -> Tuple[Tensor, Tensor]:
        """
        Args:
            x: (batch, C, H, W) image features
            words: (batch, D, T) word features
            word_mask: optional (batch, T) bool, True for padding positions

        Returns:
            (local features (batch, C, 2H, 2W), attention (batch, T, H*W))
        """
        if x.dim() != 4 or x.shape[1] != self.channels:
            raise ShapeError(f"Local fusion expects {self.channels} channels, got {tuple(x.shape)}")
        if words.dim() != 3 or words.shape[0] != x.shape[0] or words.shape[1] != self.word_dim:
            raise ShapeError(f"Word features must be ({x.shape[0]}, {self.word_dim}, T), got {tuple(words.shape)}")
        if words.shape[2] < 1:
            raise ShapeError("Local fusion needs at least one word")

        batch, channels, height, width = x.shape
        projected = self.project(words)                              # B x C x T
        queries = x.flatten(2).transpose(1, 2)                       # B x HW x C
        scores = torch.bmm(queries, projected)                       # B x HW x T
        if word_mask is not None:
            scores = scores.masked_fill(word_mask[:, None, :], float('-inf'))
        attention = softmax(scores, dim=-1).transpose(1, 2)          # B x T x HW
        context = torch.bmm(projected, attention)                    # B x C x HW
        context = context.view(batch, channels, height, width)
        return upsample_nearest2x(context), attention


def gfm(x: Tensor, sentence: Tensor, module: GlobalFusionModule) -> Tensor:
    """Global fusion on a single (C, H, W) map and (D,) sentence vector"""
    if x.dim() != 3:
        raise ShapeError(f"Expected (C, H, W) features, got {tuple(x.shape)}")
    return module(x.unsqueeze(0), sentence.unsqueeze(0)).squeeze(0)


def lfm(x: Tensor, words: Tensor, module: LocalFusionModule) -> Tuple[Tensor, Tensor]:
    """Local fusion on a single (C, H, W) map and (D, T) word matrix"""
    if x.dim() != 3 or words.dim() != 2:
        raise ShapeError("Expected (C, H, W) features and (D, T) words")
    out, attention = module(x.unsqueeze(0), words.unsqueeze(0))
    return out.squeeze(0), attention.squeeze(0)
