"""
Generator Module
Text-guided deblocking U-Net: strided encoder, residual bottleneck with global
fusion after the third block, and three x2 decoder stages each fed by a local
fusion module, encoder skip and a global residual connection.
"""

from dataclasses import asdict, dataclass
from typing import List, Optional, Tuple, Union

import torch
import torch.nn as nn
from torch import Tensor

from core.exceptions import NumericError, ShapeError
from core.fusion import GlobalFusionModule, LocalFusionModule
from core.nn_core import PRELU_INIT, ParamStore, ResidualBlock, conv_layer, upsample_nearest2x


@dataclass
class GeneratorConfig:
    """Channel plan and switches for the generator"""
    base_channels: int = 64
    bottleneck_channels: int = 128
    n_resblocks: int = 6
    input_size: int = 256
    use_global_residual: bool = True
    word_dim: int = 256
    sentence_dim: int = 256
    use_gfm: bool = True
    use_lfm: bool = True
    gfm_after: int = 3

    def __post_init__(self):
        if self.input_size % 16:
            raise ShapeError(f"Generator input size must be divisible by 16, got {self.input_size}")
        if self.n_resblocks < self.gfm_after:
            raise ShapeError(f"Need at least {self.gfm_after} residual blocks before global fusion")

    def to_dict(self) -> dict:
        return asdict(self)


class DecoderStage(nn.Module):
    """Upsample+conv, optional local fusion, concat with encoder skip, fuse"""

    def __init__(self, channels_in: int, channels_out: int, skip_channels: int,
                 word_dim: int, use_lfm: bool):
        super().__init__()
        self.up_conv = conv_layer(f"Conv3-{channels_out}-1-1", channels_in)
        self.up_act = nn.PReLU(init=PRELU_INIT)
        self.lfm = LocalFusionModule(channels_in, word_dim) if use_lfm else None
        fused_in = channels_out + skip_channels + (channels_in if use_lfm else 0)
        self.fuse = conv_layer(f"Conv3-{channels_out}-1-1", fused_in)
        self.fuse_act = nn.PReLU(init=PRELU_INIT)

    def forward(self, x: Tensor, skip: Tensor, words: Tensor,
                word_mask: Optional[Tensor]) -> Tuple[Tensor, Optional[Tensor]]:
        parts = [self.up_act(self.up_conv(upsample_nearest2x(x))), skip]
        attention = None
        if self.lfm is not None:
            local, attention = self.lfm(x, words, word_mask)
            parts.append(local)
        return self.fuse_act(self.fuse(torch.cat(parts, dim=1))), attention


class Generator(nn.Module):
    """G(I^c, T): compressed image plus word/sentence features -> deblocked image"""

    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = config
        base, wide = config.base_channels, config.bottleneck_channels

        self.head = conv_layer(f"Conv3-{base}-1-1", 3)
        self.head_act = nn.PReLU(init=PRELU_INIT)
        self.down1 = nn.Sequential(conv_layer(f"Conv3-{base}-2-1", base), nn.PReLU(init=PRELU_INIT))
        self.down2 = nn.Sequential(conv_layer(f"Conv3-{wide}-2-1", base), nn.PReLU(init=PRELU_INIT))
        self.down3 = nn.Sequential(conv_layer(f"Conv3-{wide}-2-1", wide), nn.PReLU(init=PRELU_INIT))

        self.resblocks = nn.ModuleList(ResidualBlock(wide) for _ in range(config.n_resblocks))
        self.gfm = GlobalFusionModule(wide, config.sentence_dim) if config.use_gfm else None

        self.up1 = DecoderStage(wide, wide, wide, config.word_dim, config.use_lfm)
        self.up2 = DecoderStage(wide, base, base, config.word_dim, config.use_lfm)
        self.up3 = DecoderStage(base, base, base, config.word_dim, config.use_lfm)

        self.tail = conv_layer("Conv3-3-1-1", base)

    def forward(self, compressed: Tensor, words: Tensor, sentence: Tensor,
                word_mask: Optional[Tensor] = None,
                return_attention: bool = False) -> Union[Tensor, Tuple[Tensor, List[Tensor]]]:
        """
        Args:
            compressed: (batch, 3, S, S) with S divisible by 16
            words: (batch, D, T)
            sentence: (batch, D)
            word_mask: optional (batch, T) bool, True for padding
            return_attention: also return the three attention maps, coarse to fine

        Returns:
            Deblocked images in [0, 1], optionally with attention maps
        """
        if compressed.dim() != 4 or compressed.shape[1] != 3:
            raise ShapeError(f"Generator expects (batch, 3, H, W), got {tuple(compressed.shape)}")
        if compressed.shape[2] % 16 or compressed.shape[3] % 16:
            raise ShapeError(f"Generator input sides must be divisible by 16, got {tuple(compressed.shape[2:])}")

        e0 = self.head_act(self.head(compressed))
        e1 = self.down1(e0)
        e2 = self.down2(e1)
        x = self.down3(e2)

        for index, block in enumerate(self.resblocks, start=1):
            x = block(x)
            if self.gfm is not None and index == self.config.gfm_after:
                x = self.gfm(x, sentence)

        attention_maps = []
        for stage, skip in ((self.up1, e2), (self.up2, e1), (self.up3, e0)):
            x, attention = stage(x, skip, words, word_mask)
            if attention is not None:
                attention_maps.append(attention)

        residual = self.tail(x)
        if not torch.isfinite(residual).all():
            raise NumericError("Non-finite generator activation", component='generator')
        out = compressed + residual if self.config.use_global_residual else residual
        out = out.clamp(0.0, 1.0)
        if return_attention:
            return out, attention_maps
        return out

    def zero_tail(self) -> None:
        """Zero the output conv so that, with the global residual, G is the identity"""
        with torch.no_grad():
            self.tail.weight.zero_()
            self.tail.bias.zero_()


def generate(ic: Tensor, words: Tensor, sentence: Tensor, generator: Generator) -> Tensor:
    """Deblock a single (3, H, W) image given (D, T) words and a (D,) sentence vector"""
    if ic.dim() != 3:
        raise ShapeError(f"Expected (3, H, W) image, got {tuple(ic.shape)}")
    return generator(ic.unsqueeze(0), words.unsqueeze(0), sentence.unsqueeze(0)).squeeze(0)


def count_parameters(params: Union[ParamStore, nn.Module, None]) -> int:
    """Total trainable scalar count of a store or module"""
    if params is None:
        return 0
    if isinstance(params, ParamStore):
        return params.count(trainable_only=True)
    return sum(p.numel() for p in params.parameters() if p.requires_grad)
