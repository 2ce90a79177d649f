"""
Checkpoint Module
Versioned JSON container for network parameters, optimizer state and run
metadata.

Format (format="tgjar-ckpt", version=1):
    {
      "format": "tgjar-ckpt", "version": 1,
      "stage": "damsm" | "adversarial",
      "config": {...TrainConfig.to_dict()...},
      "config_hash": "<sha256 hex>",
      "epoch": int, "batch_in_epoch": int, "step": int,
      "tensors": {
        "<prefix>.<name>": {"shape": [...], "dtype": "f32le" | "i64le",
                            "frozen": bool, "data": "<base64>"}
      },
      "optimizers": {"<name>": "<base64 torch.save blob>"},
      "rng_state": "<base64 torch RNG bytes>" | null,
      "vocab": ["<unk>", "<pad>", ...]
    }
Parameter payloads are little-endian float32; integer buffers (batchnorm
counters) are little-endian int64.
"""

import base64
import hashlib
import io
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional

import numpy as np
import torch
from torch import Tensor

from core.exceptions import CheckpointError
from core.nn_core import ParamStore
from utils.logger import get_logger

logger = get_logger(__name__)

CHECKPOINT_FORMAT = 'tgjar-ckpt'
CHECKPOINT_VERSION = 1
_DTYPES = {
    'f32le': ('<f4', torch.float32),
    'i64le': ('<i8', torch.int64),
}


@dataclass
class Checkpoint:
    """In-memory form of one checkpoint file"""
    config: dict
    config_hash: str
    tensors: Dict[str, Tensor]
    frozen: Dict[str, bool] = field(default_factory=dict)
    optimizer_states: Dict[str, dict] = field(default_factory=dict)
    stage: str = 'adversarial'
    epoch: int = 0
    batch_in_epoch: int = 0
    step: int = 0
    rng_state: Optional[Tensor] = None
    vocab: Optional[List[str]] = None

    def tensors_for(self, prefix: str) -> Dict[str, Tensor]:
        return {k: v for k, v in self.tensors.items() if k.startswith(prefix + '.')}

    def has_prefix(self, prefix: str) -> bool:
        return any(k.startswith(prefix + '.') for k in self.tensors)


def checkpoint_from_store(store: ParamStore, config: dict, config_hash: str, **metadata) -> Checkpoint:
    """Snapshot every parameter and buffer of a store"""
    frozen = store.frozen_flags()
    tensors = {name: tensor.detach().clone() for name, tensor in store.state_tensors().items()}
    return Checkpoint(config=config, config_hash=config_hash, tensors=tensors,
                      frozen={name: frozen.get(name, False) for name in tensors}, **metadata)


def _encode_tensor(tensor: Tensor, frozen: bool) -> dict:
    dtype = 'i64le' if not tensor.is_floating_point() else 'f32le'
    numpy_dtype, _ = _DTYPES[dtype]
    array = tensor.detach().cpu().numpy().astype(numpy_dtype)
    return {
        'shape': list(tensor.shape),
        'dtype': dtype,
        'frozen': bool(frozen),
        'data': base64.b64encode(array.tobytes()).decode('ascii'),
    }


def _decode_tensor(name: str, entry: Mapping) -> Tensor:
    try:
        numpy_dtype, torch_dtype = _DTYPES[entry['dtype']]
        array = np.frombuffer(base64.b64decode(entry['data']), dtype=numpy_dtype)
        array = array.reshape(entry['shape'])
    except (KeyError, ValueError, TypeError) as e:
        raise CheckpointError(f"Corrupt tensor entry '{name}': {e}") from e
    return torch.from_numpy(array.copy()).to(torch_dtype)


def _encode_blob(obj) -> str:
    buffer = io.BytesIO()
    torch.save(obj, buffer)
    return base64.b64encode(buffer.getvalue()).decode('ascii')


def _decode_blob(text: str):
    return torch.load(io.BytesIO(base64.b64decode(text)), map_location='cpu', weights_only=False)


def save_checkpoint(checkpoint: Checkpoint, path) -> str:
    """
    Write a checkpoint atomically

    Returns:
        SHA-256 hex digest of the written file
    """
    path = Path(path)
    document = {
        'format': CHECKPOINT_FORMAT,
        'version': CHECKPOINT_VERSION,
        'stage': checkpoint.stage,
        'config': checkpoint.config,
        'config_hash': checkpoint.config_hash,
        'epoch': checkpoint.epoch,
        'batch_in_epoch': checkpoint.batch_in_epoch,
        'step': checkpoint.step,
        'tensors': {name: _encode_tensor(tensor, checkpoint.frozen.get(name, False))
                    for name, tensor in sorted(checkpoint.tensors.items())},
        'optimizers': {name: _encode_blob(state) for name, state in sorted(checkpoint.optimizer_states.items())},
        'rng_state': (base64.b64encode(checkpoint.rng_state.numpy().tobytes()).decode('ascii')
                      if checkpoint.rng_state is not None else None),
        'vocab': checkpoint.vocab,
    }
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp_path = path.with_name(path.name + '.tmp')
        with open(tmp_path, 'w', encoding='utf-8') as f:
            json.dump(document, f, sort_keys=True)
        os.replace(tmp_path, path)
    except OSError as e:
        raise CheckpointError(f"Cannot write checkpoint {path}: {e}") from e

    digest = file_hash(path)
    logger.info(f"Saved checkpoint {path} (step {checkpoint.step}, {len(checkpoint.tensors)} tensors)")
    return digest


def load_checkpoint(path) -> Checkpoint:
    """Read and validate a checkpoint file"""
    path = Path(path)
    try:
        with open(path, 'r', encoding='utf-8') as f:
            document = json.load(f)
    except FileNotFoundError as e:
        raise CheckpointError(f"Checkpoint not found: {path}") from e
    except (OSError, json.JSONDecodeError) as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}") from e

    if not isinstance(document, dict) or document.get('format') != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if document.get('version') != CHECKPOINT_VERSION:
        raise CheckpointError(f"Unsupported checkpoint version {document.get('version')}")

    if not isinstance(document.get('config'), dict) or not document.get('config_hash'):
        raise CheckpointError(f"{path} has no model configuration")
    entries = document.get('tensors', {})
    rng_text = document.get('rng_state')
    checkpoint = Checkpoint(
        config=document['config'],
        config_hash=document['config_hash'],
        tensors={name: _decode_tensor(name, entry) for name, entry in entries.items()},
        frozen={name: bool(entry.get('frozen', False)) for name, entry in entries.items()},
        optimizer_states={name: _decode_blob(blob) for name, blob in document.get('optimizers', {}).items()},
        stage=document.get('stage', 'adversarial'),
        epoch=int(document.get('epoch', 0)),
        batch_in_epoch=int(document.get('batch_in_epoch', 0)),
        step=int(document.get('step', 0)),
        rng_state=(torch.frombuffer(bytearray(base64.b64decode(rng_text)), dtype=torch.uint8)
                   if rng_text else None),
        vocab=document.get('vocab'),
    )
    logger.info(f"Loaded checkpoint {path} (stage={checkpoint.stage}, step={checkpoint.step})")
    return checkpoint


def file_hash(path) -> str:
    """SHA-256 hex digest of a file's bytes"""
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 20), b''):
            digest.update(chunk)
    return digest.hexdigest()
