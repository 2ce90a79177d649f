"""
Deblocking Service Core Module
Loads one checkpoint for inference and answers degrade/deblock requests
"""

import threading
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import torch
import torch.nn.functional as F
from torch import Tensor

from config.settings import Config
from core.checkpoint import file_hash, load_checkpoint
from core.data_io import make_caption
from core.exceptions import DomainError, ShapeError
from core.jpeg_codec import degrade, validate_quality
from core.quality_metrics import cap_psnr, load_extractor, perceptual_distance, psnr
from core.trainer import build_models
from utils.logger import get_logger, log_performance

logger = get_logger(__name__)

BLOCK_MULTIPLE = 16


@dataclass
class DeblockResult:
    deblocked: Tensor
    compressed: Tensor
    metrics: Optional[Dict[str, float]] = None
    attention: List[dict] = field(default_factory=list)


def pad_to_multiple(img: Tensor, multiple: int = BLOCK_MULTIPLE) -> Tensor:
    """Reflect-pad the bottom and right edges of a (3, H, W) image to multiples of `multiple`"""
    height, width = img.shape[-2:]
    pad_h, pad_w = (-height) % multiple, (-width) % multiple
    if not pad_h and not pad_w:
        return img
    mode = 'reflect' if pad_h < height and pad_w < width else 'replicate'
    return F.pad(img.unsqueeze(0), (0, pad_w, 0, pad_h), mode=mode).squeeze(0)


class DeblockingModel:
    """
    Immutable inference wrapper around a trained generator and text encoder

    Parameters are loaded once, put in eval mode and never written, so
    concurrent requests see the same answers as serial ones.
    """

    def __init__(self, checkpoint_path: Optional[str] = None):
        self.app_config = Config()
        self.checkpoint_path = checkpoint_path or self.app_config.CHECKPOINT_PATH
        torch.set_num_threads(max(1, self.app_config.TORCH_NUM_THREADS))

        checkpoint = load_checkpoint(self.checkpoint_path)
        self.checkpoint_hash = file_hash(self.checkpoint_path)
        self.config, self.vocab, self.text_encoder, self.generator = build_models(checkpoint)
        self.config_hash = checkpoint.config_hash
        self.extractor = load_extractor(self.config.perceptual_seed, self.config.perceptual_weights)
        self._requests = 0
        self._lock = threading.Lock()

        logger.info(f"Deblocking model initialized successfully from {self.checkpoint_path} "
                    f"(sha256 {self.checkpoint_hash[:12]})")

    def _count(self) -> None:
        with self._lock:
            self._requests += 1

    @log_performance
    def degrade(self, img: Tensor, qf: int) -> Tensor:
        """Degrade an arbitrary-size image; sides are padded for the codec and cropped back"""
        validate_quality(qf)
        self._count()
        height, width = img.shape[-2:]
        padded = pad_to_multiple(img)
        return degrade(padded, qf, self.config.subsampling)[:, :height, :width].contiguous()

    @log_performance
    def deblock(self, img: Tensor, caption: str, qf: Optional[int] = None,
                reference: Optional[Tensor] = None, with_attention: bool = False) -> DeblockResult:
        """
        Deblock one image under a caption

        Args:
            img: (3, H, W) image in [0, 1]
            caption: guiding text (non-empty)
            qf: if given, img is first degraded at qf and becomes the reference
            reference: optional ground truth for metrics
            with_attention: include finest-scale word attention maps

        Returns:
            DeblockResult with output dims equal to input dims
        """
        if not caption or not caption.strip():
            raise DomainError("Caption must not be empty")
        if img.dim() != 3 or img.shape[0] != 3:
            raise ShapeError(f"Expected (3, H, W) image, got {tuple(img.shape)}")
        if reference is not None and reference.shape != img.shape:
            raise ShapeError("Reference image must have the same dimensions as the input")
        height, width = img.shape[-2:]

        if qf is not None:
            reference = img if reference is None else reference
            compressed = self.degrade(img, qf)
        else:
            compressed = img
            self._count()

        tokens = make_caption(caption, self.vocab, self.config.encoder.max_len)
        ids = torch.tensor([tokens.tokens], dtype=torch.long)
        padded = pad_to_multiple(compressed).unsqueeze(0)
        with torch.no_grad():
            words, sentence = self.text_encoder(ids)
            restored, attention = self.generator(padded, words, sentence, return_attention=True)
        deblocked = restored.squeeze(0)[:, :height, :width].contiguous()

        metrics = None
        if reference is not None:
            with torch.no_grad():
                metrics = {
                    'psnr_compressed': cap_psnr(psnr(compressed, reference)),
                    'psnr_deblocked': cap_psnr(psnr(deblocked, reference)),
                    'perceptual_compressed': float(perceptual_distance(compressed, reference, self.extractor)),
                    'perceptual_deblocked': float(perceptual_distance(deblocked, reference, self.extractor)),
                }

        maps = []
        if with_attention and attention:
            finest = attention[-1][0]
            side_h, side_w = padded.shape[-2] // 2, padded.shape[-1] // 2
            words_list = self.vocab.decode(tokens.tokens)
            for index, word in enumerate(words_list):
                grid = finest[index].reshape(side_h, side_w)[:(height + 1) // 2, :(width + 1) // 2]
                maps.append({'word': word, 'map': grid})
        return DeblockResult(deblocked=deblocked, compressed=compressed, metrics=metrics, attention=maps)

    def info(self) -> dict:
        return {
            'model_config': self.config.to_dict(),
            'config_hash': self.config_hash,
            'vocab_size': len(self.vocab),
            'checkpoint_hash': self.checkpoint_hash,
            'checkpoint_path': str(self.checkpoint_path),
            'generator_parameters': sum(p.numel() for p in self.generator.parameters()),
        }

    def get_statistics(self) -> dict:
        return {'requests_served': self._requests}

    def is_healthy(self) -> bool:
        return self.generator is not None and self.text_encoder is not None
