"""
JPEG Degradation Module
Simulates baseline JPEG quantization to manufacture (clean, compressed) pairs.

Follows the IJG (libjpeg) quality-factor convention for scaling the Annex K
reference tables. There is no entropy coding: DCT coefficients are quantized
and dequantized in place, which reproduces the distortion bit-exactly.
"""

import math
from typing import Tuple, Union

import torch
import torch.nn.functional as F
from torch import Tensor

from core.exceptions import DomainError, ShapeError

# Don't mess with matrix formatting
# fmt: off
LUMA_QUANT_TABLE = torch.tensor([
    16,  11,  10,  16,  24,  40,  51,  61,
    12,  12,  14,  19,  26,  58,  60,  55,
    14,  13,  16,  24,  40,  57,  69,  56,
    14,  17,  22,  29,  51,  87,  80,  62,
    18,  22,  37,  56,  68, 109, 103,  77,
    24,  35,  55,  64,  81, 104, 113,  92,
    49,  64,  78,  87, 103, 121, 120, 101,
    72,  92,  95,  98, 112, 100, 103,  99,
], dtype=torch.int64).view(8, 8)

CHROMA_QUANT_TABLE = torch.tensor([
    17,  18,  24,  47,  99,  99,  99,  99,
    18,  21,  26,  66,  99,  99,  99,  99,
    24,  26,  56,  99,  99,  99,  99,  99,
    47,  66,  99,  99,  99,  99,  99,  99,
    99,  99,  99,  99,  99,  99,  99,  99,
    99,  99,  99,  99,  99,  99,  99,  99,
    99,  99,  99,  99,  99,  99,  99,  99,
    99,  99,  99,  99,  99,  99,  99,  99,
], dtype=torch.int64).view(8, 8)
# fmt: on

SUBSAMPLING_MODES = ('444', '420')

# JFIF full-range conversion
_RGB_TO_YCBCR = torch.tensor([
    [0.299, 0.587, 0.114],
    [-0.168736, -0.331264, 0.5],
    [0.5, -0.418688, -0.081312],
], dtype=torch.float64)

_YCBCR_TO_RGB = torch.tensor([
    [1.0, 0.0, 1.402],
    [1.0, -0.344136, -0.714136],
    [1.0, 1.772, 0.0],
], dtype=torch.float64)

_CHROMA_OFFSET = torch.tensor([0.0, 128.0 / 255.0, 128.0 / 255.0], dtype=torch.float64)


def _dct_matrix() -> Tensor:
    n = torch.arange(8, dtype=torch.float64)
    k = n.view(8, 1)
    basis = torch.cos(math.pi * (2 * n + 1) * k / 16)
    scale = torch.full((8, 1), 0.5, dtype=torch.float64)
    scale[0] = 0.5 / math.sqrt(2.0)
    return basis * scale


_DCT = _dct_matrix()


def validate_quality(qf: int) -> int:
    """Return qf as int or raise DomainError when outside [1, 100]"""
    if isinstance(qf, bool) or int(qf) != qf:
        raise DomainError(f"Quality factor must be an integer, got {qf!r}")
    qf = int(qf)
    if not 1 <= qf <= 100:
        raise DomainError(f"Quality factor must lie in [1, 100], got {qf}")
    return qf


def scale_quant_table(base: Tensor, qf: int) -> Tensor:
    """
    Scale a reference quantization table to a quality factor (IJG convention)

    Args:
        base: 8x8 integer reference table
        qf: Quality factor in [1, 100]

    Returns:
        8x8 int64 table with entries clamped to [1, 255]
    """
    qf = validate_quality(qf)
    base = torch.as_tensor(base, dtype=torch.int64)
    if base.shape != (8, 8):
        raise ShapeError(f"Quantization table must be 8x8, got {tuple(base.shape)}")

    scale = 5000 // qf if qf < 50 else 200 - 2 * qf
    table = torch.div(base * scale + 50, 100, rounding_mode='floor')
    return table.clamp(1, 255)


def dct8x8(block: Tensor) -> Tensor:
    """Orthonormal 2-D type-II DCT over the last two (8x8) dimensions"""
    if block.shape[-2:] != (8, 8):
        raise ShapeError(f"DCT expects trailing 8x8 blocks, got {tuple(block.shape)}")
    c = _DCT.to(dtype=block.dtype, device=block.device)
    return c @ block @ c.T


def idct8x8(coefficients: Tensor) -> Tensor:
    """Inverse of dct8x8"""
    if coefficients.shape[-2:] != (8, 8):
        raise ShapeError(f"IDCT expects trailing 8x8 blocks, got {tuple(coefficients.shape)}")
    c = _DCT.to(dtype=coefficients.dtype, device=coefficients.device)
    return c.T @ coefficients @ c


def _color_transform(img: Tensor, matrix: Tensor) -> Tensor:
    if img.dim() not in (3, 4) or img.shape[-3] != 3:
        raise ShapeError(f"Expected a 3-channel image, got shape {tuple(img.shape)}")
    m = matrix.to(dtype=img.dtype, device=img.device)
    return torch.einsum('ij,...jhw->...ihw', m, img)


def rgb_to_ycbcr(img: Tensor) -> Tensor:
    """JFIF full-range RGB -> YCbCr on [0, 1] scale (chroma centred at 128/255)"""
    offset = _CHROMA_OFFSET.to(dtype=img.dtype, device=img.device).view(3, 1, 1)
    return _color_transform(img, _RGB_TO_YCBCR) + offset


def ycbcr_to_rgb(img: Tensor) -> Tensor:
    """Inverse of rgb_to_ycbcr (no clamping)"""
    offset = _CHROMA_OFFSET.to(dtype=img.dtype, device=img.device).view(3, 1, 1)
    return _color_transform(img - offset, _YCBCR_TO_RGB)


def check_image(img: Tensor) -> None:
    """Raise ShapeError unless img is (3, H, W) or (N, 3, H, W) with H, W divisible by 16"""
    if img.dim() not in (3, 4) or img.shape[-3] != 3:
        raise ShapeError(f"Expected image of shape (3, H, W), got {tuple(img.shape)}")
    height, width = img.shape[-2:]
    if height % 16 or width % 16:
        raise ShapeError(f"Image sides must be divisible by 16, got {height}x{width}")
    if not torch.isfinite(img).all():
        raise ShapeError("Image contains non-finite values")


def _quantize_plane(plane: Tensor, table: Tensor) -> Tensor:
    n, c, h, w = plane.shape
    blocks = (plane * 255.0 - 128.0).reshape(n, c, h // 8, 8, w // 8, 8).permute(0, 1, 2, 4, 3, 5)
    coefficients = dct8x8(blocks)
    coefficients = torch.round(coefficients / table) * table
    pixels = idct8x8(coefficients).permute(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
    return (pixels + 128.0) / 255.0


def degrade(img: Tensor, qf: int, subsampling: Union[str, int] = '420') -> Tensor:
    """
    Compress and decompress an image at a JPEG quality factor

    Args:
        img: RGB image in [0, 1], shape (3, H, W) or (N, 3, H, W)
        qf: Quality factor in [1, 100]
        subsampling: '420' (chroma averaged over 2x2) or '444'

    Returns:
        Decoded image of the same shape and dtype, clamped to [0, 1]
    """
    qf = validate_quality(qf)
    subsampling = str(subsampling)
    if subsampling not in SUBSAMPLING_MODES:
        raise DomainError(f"Subsampling must be one of {SUBSAMPLING_MODES}, got {subsampling}")
    check_image(img)

    single = img.dim() == 3
    x = img.unsqueeze(0) if single else img
    dtype = x.dtype
    x = x.to(torch.float64)

    ycc = rgb_to_ycbcr(x)
    luma_table = scale_quant_table(LUMA_QUANT_TABLE, qf).to(torch.float64)
    chroma_table = scale_quant_table(CHROMA_QUANT_TABLE, qf).to(torch.float64)

    luma = _quantize_plane(ycc[:, 0:1], luma_table)
    chroma = ycc[:, 1:3]
    if subsampling == '420':
        chroma = F.avg_pool2d(chroma, 2)
    chroma = _quantize_plane(chroma, chroma_table)
    if subsampling == '420':
        chroma = chroma.repeat_interleave(2, dim=-2).repeat_interleave(2, dim=-1)

    out = ycbcr_to_rgb(torch.cat([luma, chroma], dim=1)).clamp(0.0, 1.0).to(dtype)
    return out.squeeze(0) if single else out


def block_discontinuity(img: Tensor) -> Tuple[float, float]:
    """
    Mean absolute luma step across 8x8 block boundaries versus inside blocks

    Returns:
        (boundary_mean, interior_mean)
    """
    check_image(img)
    luma = rgb_to_ycbcr(img.to(torch.float64))[..., 0, :, :]
    dx = (luma[..., :, 1:] - luma[..., :, :-1]).abs()
    dy = (luma[..., 1:, :] - luma[..., :-1, :]).abs()

    boundary_x = (torch.arange(dx.shape[-1]) % 8) == 7
    boundary_y = (torch.arange(dy.shape[-2]) % 8) == 7

    boundary = torch.cat([dx[..., :, boundary_x].flatten(), dy[..., boundary_y, :].flatten()])
    interior = torch.cat([dx[..., :, ~boundary_x].flatten(), dy[..., ~boundary_y, :].flatten()])
    return float(boundary.mean()), float(interior.mean())
