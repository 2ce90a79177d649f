"""
Image Payload Utility Module
Base64 / data-URL PNG encoding for the HTTP service
"""

import base64
import binascii
import io
import re

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError
from torch import Tensor

from core.data_io import pil_to_tensor, tensor_to_pil
from core.exceptions import DomainError

# data:<mime>;base64,<data>
DATA_URL_RE = re.compile(r'^data:(image/[^;]+);base64,(.+)$', flags=re.I | re.S)


def decode_image_payload(payload: str) -> Tensor:
    """
    Decode a raw base64 string or a data URL into a (3, H, W) tensor in [0, 1]

    Raises:
        DomainError: payload is not base64 or not a decodable image
    """
    if not isinstance(payload, str) or not payload.strip():
        raise DomainError("Image payload is empty")
    match = DATA_URL_RE.match(payload.strip())
    data = match.group(2) if match else payload.strip()
    data = re.sub(r'\s+', '', data)
    try:
        raw = base64.b64decode(data, validate=True)
    except (binascii.Error, ValueError) as e:
        raise DomainError(f"Invalid base64 image data: {e}") from e
    try:
        with Image.open(io.BytesIO(raw)) as image:
            return pil_to_tensor(image)
    except (UnidentifiedImageError, OSError) as e:
        raise DomainError(f"Undecodable image: {e}") from e


def encode_png(img: Tensor) -> str:
    """Raw base64 PNG of a (3, H, W) tensor; byte-identical for identical inputs"""
    buffer = io.BytesIO()
    tensor_to_pil(img).save(buffer, format='PNG', optimize=False)
    return base64.b64encode(buffer.getvalue()).decode('ascii')


def encode_gray_png(values: Tensor) -> str:
    """Raw base64 8-bit grayscale PNG of an (H, W) map rescaled to [0, 255]"""
    array = values.detach().to(torch.float64).cpu().numpy()
    span = array.max() - array.min()
    scaled = (array - array.min()) / span if span > 0 else np.zeros_like(array)
    buffer = io.BytesIO()
    Image.fromarray((scaled * 255.0).round().astype(np.uint8), mode='L').save(buffer, format='PNG')
    return base64.b64encode(buffer.getvalue()).decode('ascii')
