"""
Text and Image Encoder Module
Maps captions to word/sentence features and images to region/global features
in one common semantic space, the space the image-text matching loss and the
generator's fusion modules share.
"""

from dataclasses import asdict, dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from core.exceptions import DatasetError, DomainError, ShapeError
from core.nn_core import BiLSTM, PRELU_INIT, gap, init_weights
from utils.logger import get_logger

logger = get_logger(__name__)

UNK_ID = 0
PAD_ID = 1


@dataclass
class EncoderConfig:
    """Shared dimensions of the text and image encoders"""
    vocab_size: int = 2
    word_dim: int = 128
    embedding_dim: int = 256
    max_len: int = 18
    region_grid: int = 17
    backbone_channels: Tuple[int, ...] = (32, 64, 128, 128, 256, 256)
    backbone_strides: Tuple[int, ...] = (2, 2, 2, 2, 1, 1)
    # Padding of the last strided conv; 2 turns a 32x32 map into the 17x17 grid at 256px
    final_stride_padding: int = 2
    min_image_side: int = 64

    def __post_init__(self):
        self.backbone_channels = tuple(self.backbone_channels)
        self.backbone_strides = tuple(self.backbone_strides)
        if len(self.backbone_channels) != len(self.backbone_strides):
            raise DomainError("Backbone channel and stride plans must have equal length")
        if self.embedding_dim % 2:
            raise DomainError("Embedding dimension must be even (two LSTM directions)")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ImageSemanticFeatures:
    """regions: (B, D, R) matrix per image; global_: (B, D); stems name the rows of imported features"""
    regions: Tensor
    global_: Tensor
    stems: Optional[List[str]] = None

    def __getitem__(self, index: int) -> 'ImageSemanticFeatures':
        return ImageSemanticFeatures(self.regions[index:index + 1], self.global_[index:index + 1])

    def select(self, stems: Sequence[str]) -> 'ImageSemanticFeatures':
        """Rows for the given image stems, in that order"""
        if self.stems is None:
            raise DatasetError("Features carry no image stems")
        index = {stem: row for row, stem in enumerate(self.stems)}
        missing = [stem for stem in stems if stem not in index]
        if missing:
            raise DatasetError(f"No imported features for images {missing[:5]}")
        rows = torch.tensor([index[stem] for stem in stems], dtype=torch.long)
        return ImageSemanticFeatures(self.regions[rows], self.global_[rows], list(stems))

    def __len__(self) -> int:
        return self.global_.shape[0]


class TextEncoder(nn.Module):
    """Embedding lookup followed by a bidirectional LSTM"""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.embedding = nn.Embedding(config.vocab_size, config.word_dim)
        self.rnn = BiLSTM(config.word_dim, config.embedding_dim)

    def _validate(self, ids: Tensor, lengths: Tensor) -> None:
        if ids.dim() != 2 or ids.shape[1] == 0:
            raise DomainError("Caption batch must be non-empty (batch, T) ids")
        if (lengths < 1).any():
            raise DomainError("Empty caption")
        if (ids < 0).any() or (ids >= self.config.vocab_size).any():
            raise DomainError(f"Token id outside vocabulary of size {self.config.vocab_size}")

    def forward(self, ids: Tensor, lengths: Optional[Tensor] = None) -> Tuple[Tensor, Tensor]:
        """
        Args:
            ids: (batch, T) token ids, padded with PAD_ID
            lengths: (batch,) true lengths; defaults to T for every caption

        Returns:
            (words (batch, D, T), sentence (batch, D))
        """
        if lengths is None:
            lengths = torch.full((ids.shape[0],), ids.shape[1], dtype=torch.long)
        self._validate(ids, lengths)
        embedded = self.embedding(ids)
        packed_lengths = None if bool((lengths == ids.shape[1]).all()) else lengths
        hidden, final = self.rnn(embedded, packed_lengths)
        return hidden.transpose(1, 2), final


def encode_text(ids: Sequence[int], encoder: TextEncoder) -> Tuple[Tensor, Tensor]:
    """
    Encode one caption

    Args:
        ids: token ids (1 <= len <= max_len)
        encoder: TextEncoder

    Returns:
        (word features D x T, sentence features D)
    """
    if len(ids) == 0:
        raise DomainError("Cannot encode an empty caption")
    ids_tensor = torch.as_tensor(list(ids), dtype=torch.long).unsqueeze(0)
    words, sentence = encoder(ids_tensor)
    return words.squeeze(0), sentence.squeeze(0)


class ImageEncoder(nn.Module):
    """
    Strided convolutional backbone with two mapping layers into the common space

    Each backbone position of the last feature map is one region, mapped by a
    1x1 conv; maps larger than region_grid x region_grid are average-pooled
    down to it. The global average is mapped by a linear layer.
    """

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        layers = []
        channels_in = 3
        strided = [i for i, s in enumerate(config.backbone_strides) if s > 1]
        last_strided = strided[-1] if strided else -1
        for index, (channels_out, stride) in enumerate(zip(config.backbone_channels, config.backbone_strides)):
            padding = config.final_stride_padding if index == last_strided else 1
            layers += [nn.Conv2d(channels_in, channels_out, 3, stride=stride, padding=padding),
                       nn.PReLU(init=PRELU_INIT)]
            channels_in = channels_out
        self.backbone = nn.Sequential(*layers)
        self.region_map = nn.Conv2d(channels_in, config.embedding_dim, kernel_size=1)
        self.global_map = nn.Linear(channels_in, config.embedding_dim)

    def forward(self, images: Tensor) -> ImageSemanticFeatures:
        if images.dim() != 4 or images.shape[1] != 3:
            raise ShapeError(f"Expected (batch, 3, H, W) images, got {tuple(images.shape)}")
        if min(images.shape[-2:]) < self.config.min_image_side:
            raise ShapeError(f"Image side must be at least {self.config.min_image_side}, got {tuple(images.shape[-2:])}")
        features = self.backbone(images * 2.0 - 1.0)
        grid_side = self.config.region_grid
        if min(features.shape[-2:]) < grid_side:
            raise ShapeError(f"Backbone map {tuple(features.shape[-2:])} is smaller than the "
                             f"{grid_side}x{grid_side} region grid")
        grid = features
        if tuple(features.shape[-2:]) != (grid_side, grid_side):
            grid = F.adaptive_avg_pool2d(features, grid_side)
        regions = self.region_map(grid).flatten(2)
        global_ = self.global_map(gap(features))
        return ImageSemanticFeatures(regions=regions, global_=global_)


def encode_image(img: Tensor, encoder: ImageEncoder) -> ImageSemanticFeatures:
    """Encode one (3, H, W) image into regions (D x R) and a global D-vector"""
    if img.dim() != 3:
        raise ShapeError(f"Expected (3, H, W) image, got {tuple(img.shape)}")
    features = encoder(img.unsqueeze(0))
    return ImageSemanticFeatures(features.regions.squeeze(0), features.global_.squeeze(0))


def load_external_features(path: str, embedding_dim: int) -> ImageSemanticFeatures:
    """
    Import precomputed region/global features (e.g. from a pretrained backbone)

    The .npz file must hold 'regions' (B, D, R) and 'global' (B, D) arrays and
    may hold 'stems' (B,) naming the image of each row.
    """
    with np.load(path) as data:
        missing = {'regions', 'global'} - set(data.files)
        if missing:
            raise ShapeError(f"External feature file {path} lacks arrays {sorted(missing)}")
        regions = torch.from_numpy(np.asarray(data['regions'], dtype=np.float32))
        global_ = torch.from_numpy(np.asarray(data['global'], dtype=np.float32))
        stems = [str(s) for s in data['stems']] if 'stems' in data.files else None
    if regions.dim() != 3 or global_.dim() != 2:
        raise ShapeError("External features must be regions (B, D, R) and global (B, D)")
    if regions.shape[1] != embedding_dim or global_.shape[1] != embedding_dim:
        raise ShapeError(f"External features must have dimension {embedding_dim}")
    if regions.shape[0] != global_.shape[0] or (stems is not None and len(stems) != global_.shape[0]):
        raise ShapeError("External regions, global features and stems must have the same number of rows")
    logger.info(f"Loaded external image features for {global_.shape[0]} images from {path}")
    return ImageSemanticFeatures(regions=regions, global_=global_, stems=stems)


def build_encoders(config: EncoderConfig, seed: int) -> Tuple[TextEncoder, ImageEncoder]:
    """Construct both encoders with seeded initialization"""
    text_encoder = init_weights(TextEncoder(config), seed)
    image_encoder = init_weights(ImageEncoder(config), seed + 1)
    logger.debug(f"Encoders built (D={config.embedding_dim}, vocab={config.vocab_size})")
    return text_encoder, image_encoder
