"""
Data Ingestion Module
Dataset manifests, vocabulary, tokenization, crop/resize and deterministic
batch assembly for (clean, compressed, caption) training pairs.

Expected layout:
    <root>/images/<stem>.png|jpg|jpeg
    <root>/captions/<stem>.txt      (UTF-8, one caption per line)
    <root>/vocab.txt                (optional, one token per line)
Split subdirectories <root>/train and <root>/test with the same layout are used
when present.
"""

import re
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError
from torch import Tensor

from core.encoders import PAD_ID, UNK_ID
from core.exceptions import DatasetError, DomainError
from core.jpeg_codec import degrade
from utils.logger import get_logger

logger = get_logger(__name__)

IMAGE_EXTENSIONS = ('.png', '.jpg', '.jpeg')
UNK_TOKEN = '<unk>'
PAD_TOKEN = '<pad>'
_TOKEN_RE = re.compile(r"[a-z0-9]+")


@dataclass
class ManifestEntry:
    stem: str
    image_path: Path
    caption_paths: List[Path]

    def captions(self) -> List[str]:
        lines = []
        for path in self.caption_paths:
            text = path.read_text(encoding='utf-8')
            lines.extend(line.strip() for line in text.splitlines() if line.strip())
        return lines


@dataclass
class DatasetManifest:
    root: Path
    entries: List[ManifestEntry]
    split: str = 'train'
    vocab_path: Optional[Path] = None

    def __len__(self) -> int:
        return len(self.entries)

    def pairs(self) -> List[Tuple[ManifestEntry, str]]:
        """Every (entry, caption) pair, one per caption line, in manifest order"""
        return [(entry, caption) for entry in self.entries for caption in entry.captions()]


def load_dataset(root_dir, split: str = 'train') -> DatasetManifest:
    """
    Scan a dataset directory into a manifest sorted by stem

    Raises:
        DatasetError: missing directory, no images, or an image without captions
    """
    root = Path(root_dir)
    base = root / split if (root / split / 'images').is_dir() else root
    images_dir, captions_dir = base / 'images', base / 'captions'
    if not images_dir.is_dir() or not captions_dir.is_dir():
        raise DatasetError(f"{base} must contain images/ and captions/ directories")

    image_paths = sorted(p for p in images_dir.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS)
    if not image_paths:
        raise DatasetError(f"No images found in {images_dir}")

    entries = []
    for image_path in image_paths:
        caption_path = captions_dir / f"{image_path.stem}.txt"
        if not caption_path.is_file():
            raise DatasetError(f"Missing caption file for image stem '{image_path.stem}'")
        entries.append(ManifestEntry(image_path.stem, image_path, [caption_path]))

    vocab_path = next((p for p in (base / 'vocab.txt', root / 'vocab.txt') if p.is_file()), None)
    logger.info(f"Loaded manifest with {len(entries)} images from {base}")
    return DatasetManifest(root=base, entries=entries, split=split, vocab_path=vocab_path)


def tokenize(text: str) -> List[str]:
    """Lowercase, punctuation-stripped word tokens"""
    return _TOKEN_RE.findall(text.lower())


class Vocabulary:
    """Token <-> id mapping; id 0 is <unk>, id 1 is <pad>"""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tokens[:2] != [UNK_TOKEN, PAD_TOKEN]:
            raise DomainError("Vocabulary must start with <unk> and <pad>")
        self.tokens = tokens
        self.index: Dict[str, int] = {token: i for i, token in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def token_id(self, token: str) -> int:
        return self.index.get(token, UNK_ID)

    def encode(self, text: str) -> List[int]:
        return [self.token_id(token) for token in tokenize(text)]

    def decode(self, ids: Sequence[int]) -> List[str]:
        return [self.tokens[i] for i in ids]

    def save(self, path) -> None:
        Path(path).write_text('\n'.join(self.tokens) + '\n', encoding='utf-8')

    @classmethod
    def load(cls, path) -> 'Vocabulary':
        lines = Path(path).read_text(encoding='utf-8').splitlines()
        return cls([line.strip() for line in lines if line.strip()])


def build_vocab(manifest: DatasetManifest, min_freq: int = 1) -> Vocabulary:
    """Ids by descending frequency, ties broken lexicographically, after the reserved ids"""
    counts = Counter()
    for _, caption in manifest.pairs():
        counts.update(tokenize(caption))
    if not counts:
        raise DatasetError("Caption corpus is empty")
    ranked = sorted((t for t, n in counts.items() if n >= min_freq), key=lambda t: (-counts[t], t))
    vocab = Vocabulary([UNK_TOKEN, PAD_TOKEN] + ranked)
    logger.info(f"Built vocabulary of {len(vocab)} tokens (min_freq={min_freq})")
    return vocab


@dataclass
class Caption:
    tokens: Tuple[int, ...]
    raw: str

    def __len__(self) -> int:
        return len(self.tokens)


def make_caption(text: str, vocab: Vocabulary, max_len: int = 18) -> Caption:
    ids = vocab.encode(text)[:max_len]
    if not ids:
        raise DomainError(f"Caption has no tokens: {text!r}")
    return Caption(tokens=tuple(ids), raw=text)


def load_image(path) -> Tensor:
    """Decode an image file into a (3, H, W) float32 tensor in [0, 1]"""
    try:
        with Image.open(path) as image:
            return pil_to_tensor(image)
    except (UnidentifiedImageError, OSError) as e:
        raise DomainError(f"Cannot decode image {path}: {e}") from e


def pil_to_tensor(image: Image.Image) -> Tensor:
    array = np.asarray(image.convert('RGB'), dtype=np.float32) / 255.0
    return torch.from_numpy(array.copy()).permute(2, 0, 1).contiguous()


def tensor_to_pil(img: Tensor) -> Image.Image:
    array = (img.detach().clamp(0, 1).permute(1, 2, 0).cpu().numpy() * 255.0).round().astype(np.uint8)
    return Image.fromarray(array, mode='RGB')


def save_image(img: Tensor, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    tensor_to_pil(img).save(path, format='PNG')


def center_crop_resize(image: Image.Image, size: int) -> Image.Image:
    """Center-crop to a square and bilinearly resize to size x size"""
    width, height = image.size
    side = min(width, height)
    left, top = (width - side) // 2, (height - side) // 2
    square = image.crop((left, top, left + side, top + side))
    return square.resize((size, size), Image.BILINEAR)


@dataclass
class PreparedPair:
    image: Tensor
    compressed: Tensor
    caption: Caption
    stem: str = ''


def prepare_pair(entry: ManifestEntry, caption_text: str, image_size: int, qf: int,
                 vocab: Vocabulary, max_len: int = 18, subsampling: str = '420') -> PreparedPair:
    """
    Load, crop and resize one image, degrade it at qf and tokenize its caption

    Returns:
        PreparedPair with I (3 x size x size), I^c and the truncated caption
    """
    try:
        with Image.open(entry.image_path) as image:
            resized = center_crop_resize(image.convert('RGB'), image_size)
    except (UnidentifiedImageError, OSError) as e:
        raise DomainError(f"Cannot decode image {entry.image_path}: {e}") from e
    clean = pil_to_tensor(resized)
    compressed = degrade(clean, qf, subsampling)
    return PreparedPair(clean, compressed, make_caption(caption_text, vocab, max_len), entry.stem)


@dataclass
class Batch:
    images: Tensor
    compressed: Tensor
    ids: Tensor
    lengths: Tensor
    word_mask: Tensor
    captions: List[str] = field(default_factory=list)
    stems: List[str] = field(default_factory=list)

    def __len__(self) -> int:
        return self.images.shape[0]


def collate(pairs: Sequence[PreparedPair], flips: Optional[Sequence[bool]] = None) -> Batch:
    """Stack images and pad captions with <pad>"""
    flips = flips or [False] * len(pairs)
    max_len = max(len(p.caption) for p in pairs)
    ids = torch.full((len(pairs), max_len), PAD_ID, dtype=torch.long)
    lengths = torch.zeros(len(pairs), dtype=torch.long)
    for row, pair in enumerate(pairs):
        ids[row, :len(pair.caption)] = torch.tensor(pair.caption.tokens, dtype=torch.long)
        lengths[row] = len(pair.caption)
    word_mask = torch.arange(max_len)[None, :] >= lengths[:, None]

    def _stack(tensors):
        return torch.stack([t.flip(-1) if flip else t for t, flip in zip(tensors, flips)])

    return Batch(images=_stack([p.image for p in pairs]),
                 compressed=_stack([p.compressed for p in pairs]),
                 ids=ids, lengths=lengths, word_mask=word_mask,
                 captions=[p.caption.raw for p in pairs], stems=[p.stem for p in pairs])


class PairDataset:
    """
    Eagerly prepared (I, I^c, caption) pairs with deterministic batching

    Batch order is a pure function of (manifest, seed, epoch).
    """

    def __init__(self, manifest: DatasetManifest, vocab: Vocabulary, image_size: int, qf: int,
                 max_len: int = 18, subsampling: str = '420', workers: int = 1):
        self.manifest = manifest
        self.vocab = vocab
        self.image_size = image_size
        self.qf = qf
        pairs = manifest.pairs()
        if not pairs:
            raise DatasetError("Dataset has no (image, caption) pairs")

        def _prepare(item):
            entry, caption = item
            return prepare_pair(entry, caption, image_size, qf, vocab, max_len, subsampling)

        with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
            self.pairs: List[PreparedPair] = list(pool.map(_prepare, pairs))
        logger.info(f"Prepared {len(self.pairs)} pairs at {image_size}px, QF {qf}")

    def __len__(self) -> int:
        return len(self.pairs)

    def batch_order(self, seed: int, epoch: int, shuffle: bool = True) -> List[int]:
        if not shuffle:
            return list(range(len(self.pairs)))
        rng = np.random.default_rng([seed, epoch])
        return rng.permutation(len(self.pairs)).tolist()

    def batches(self, batch_size: int, seed: int, epoch: int, shuffle: bool = True,
                flip: bool = False) -> Iterator[Batch]:
        """Yield batches; with flip=True each pair is mirrored with probability 1/2 (seeded)"""
        if batch_size < 1:
            raise DomainError("Batch size must be at least 1")
        order = self.batch_order(seed, epoch, shuffle)
        flip_rng = np.random.default_rng([seed, epoch, 1])
        flips = (flip_rng.random(len(order)) < 0.5).tolist() if flip else [False] * len(order)
        for start in range(0, len(order), batch_size):
            chunk = order[start:start + batch_size]
            yield collate([self.pairs[i] for i in chunk], flips[start:start + batch_size])

    def num_batches(self, batch_size: int) -> int:
        return (len(self.pairs) + batch_size - 1) // batch_size
