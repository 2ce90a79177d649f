"""
Tests for the checkpoint container
"""

import json
import tempfile
import unittest
import sys
import os
from pathlib import Path

import torch

# Add parent directory to path for imports
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from core.checkpoint import CHECKPOINT_FORMAT, file_hash, load_checkpoint, save_checkpoint
from core.data_io import build_vocab, load_dataset
from core.exceptions import CheckpointError
from core.trainer import Trainer
from tests.fixtures import make_toy_dataset, tiny_train_config


class TestCheckpoint(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)
        vocab = build_vocab(load_dataset(make_toy_dataset(self.root / 'data', n=2)))
        self.trainer = Trainer(tiny_train_config(), vocab)
        self.trainer.store.freeze('text_encoder')
        self.path = self.root / 'run' / 'model.ckpt'

    def tearDown(self):
        self.tmp.cleanup()

    def test_round_trip(self):
        original = self.trainer.checkpoint()
        digest = save_checkpoint(original, self.path)
        self.assertEqual(digest, file_hash(self.path))

        loaded = load_checkpoint(self.path)
        self.assertEqual(loaded.config_hash, original.config_hash)
        self.assertEqual(loaded.config, json.loads(json.dumps(original.config)))
        self.assertEqual(loaded.vocab, original.vocab)
        self.assertEqual(set(loaded.tensors), set(original.tensors))
        for name, tensor in original.tensors.items():
            self.assertEqual(loaded.tensors[name].dtype, tensor.dtype, name)
            self.assertTrue(torch.equal(loaded.tensors[name], tensor), name)
        self.assertTrue(torch.equal(loaded.rng_state, original.rng_state))

    def test_frozen_flags_survive(self):
        save_checkpoint(self.trainer.checkpoint(), self.path)
        loaded = load_checkpoint(self.path)
        text_flags = [loaded.frozen[k] for k in loaded.tensors_for('text_encoder')
                      if k in self.trainer.store.frozen_flags()]
        self.assertTrue(text_flags and all(text_flags))
        self.assertFalse(any(loaded.frozen[k] for k in loaded.tensors_for('generator')))

    def test_batchnorm_counters_are_integers(self):
        checkpoint = self.trainer.checkpoint()
        counters = [k for k in checkpoint.tensors if k.endswith('num_batches_tracked')]
        self.assertTrue(counters)
        save_checkpoint(checkpoint, self.path)
        loaded = load_checkpoint(self.path)
        self.assertEqual(loaded.tensors[counters[0]].dtype, torch.int64)

    def test_same_state_same_bytes(self):
        checkpoint = self.trainer.checkpoint()
        first = save_checkpoint(checkpoint, self.path)
        second = save_checkpoint(checkpoint, self.root / 'copy.ckpt')
        self.assertEqual(first, second)

    def test_prefix_helpers(self):
        checkpoint = self.trainer.checkpoint()
        self.assertTrue(checkpoint.has_prefix('generator'))
        self.assertFalse(checkpoint.has_prefix('gen'))
        self.assertTrue(all(k.startswith('discriminator.') for k in checkpoint.tensors_for('discriminator')))

    def test_missing_file(self):
        with self.assertRaises(CheckpointError):
            load_checkpoint(self.root / 'absent.ckpt')

    def test_corrupt_files(self):
        self.path.parent.mkdir(parents=True)
        self.path.write_text('{not json', encoding='utf-8')
        with self.assertRaises(CheckpointError):
            load_checkpoint(self.path)

        self.path.write_text(json.dumps({'format': 'other', 'version': 1}), encoding='utf-8')
        with self.assertRaises(CheckpointError):
            load_checkpoint(self.path)

        self.path.write_text(json.dumps({'format': CHECKPOINT_FORMAT, 'version': 99}), encoding='utf-8')
        with self.assertRaises(CheckpointError):
            load_checkpoint(self.path)

    def test_corrupt_tensor_payload(self):
        save_checkpoint(self.trainer.checkpoint(), self.path)
        document = json.loads(self.path.read_text(encoding='utf-8'))
        name = next(iter(document['tensors']))
        document['tensors'][name]['data'] = 'AAAA'
        self.path.write_text(json.dumps(document), encoding='utf-8')
        with self.assertRaises(CheckpointError):
            load_checkpoint(self.path)


if __name__ == '__main__':
    unittest.main()
