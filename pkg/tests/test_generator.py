"""
Tests for the text-guided deblocking generator
"""

import unittest
import sys
import os

import torch

# Add parent directory to path for imports
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from core.exceptions import ShapeError
from core.generator import Generator, GeneratorConfig, count_parameters, generate
from core.nn_core import ParamStore, grad_check, init_weights
from tests.fixtures import smooth_image, tiny_generator_config


class TestGenerator(unittest.TestCase):
    """Forward contracts of G(I^c, T)"""

    def setUp(self):
        torch.manual_seed(0)
        self.generator = init_weights(Generator(tiny_generator_config()), seed=0)
        self.words = torch.randn(1, 32, 5)
        self.sentence = torch.randn(1, 32)

    def test_output_shape_and_range(self):
        image = smooth_image(64).unsqueeze(0)
        out = self.generator(image, self.words, self.sentence)
        self.assertEqual(out.shape, image.shape)
        self.assertGreaterEqual(float(out.min()), 0.0)
        self.assertLessEqual(float(out.max()), 1.0)

    def test_zero_tail_is_identity(self):
        self.generator.zero_tail()
        image = smooth_image(64, seed=1)
        out = generate(image, self.words[0], self.sentence[0], self.generator)
        self.assertTrue(torch.equal(out, image))

    def test_attention_maps_coarse_to_fine(self):
        _, maps = self.generator(smooth_image(64).unsqueeze(0), self.words, self.sentence, return_attention=True)
        self.assertEqual([tuple(m.shape) for m in maps], [(1, 5, 64), (1, 5, 256), (1, 5, 1024)])

    def test_caption_changes_output(self):
        image = smooth_image(64).unsqueeze(0)
        first = self.generator(image, self.words, self.sentence)
        second = self.generator(image, torch.randn(1, 32, 5), torch.randn(1, 32))
        self.assertFalse(torch.equal(first, second))

    def test_ablations(self):
        for use_gfm, use_lfm in ((False, True), (True, False), (False, False)):
            generator = init_weights(Generator(tiny_generator_config(use_gfm=use_gfm, use_lfm=use_lfm)), seed=0)
            out, maps = generator(smooth_image(64).unsqueeze(0), self.words, self.sentence, return_attention=True)
            self.assertEqual(tuple(out.shape), (1, 3, 64, 64))
            self.assertEqual(len(maps), 3 if use_lfm else 0)
            self.assertEqual(generator.gfm is None, not use_gfm)

    def test_non_square_input(self):
        out = self.generator(torch.rand(1, 3, 32, 48), self.words, self.sentence)
        self.assertEqual(tuple(out.shape), (1, 3, 32, 48))

    def test_shape_errors(self):
        with self.assertRaises(ShapeError):
            self.generator(torch.rand(1, 3, 40, 40), self.words, self.sentence)
        with self.assertRaises(ShapeError):
            generate(torch.rand(1, 3, 64, 64), self.words[0], self.sentence[0], self.generator)
        with self.assertRaises(ShapeError):
            GeneratorConfig(input_size=100)

    def test_parameter_count(self):
        store = ParamStore({'generator': self.generator})
        self.assertEqual(count_parameters(store), count_parameters(self.generator))
        self.assertEqual(count_parameters(None), 0)
        store.freeze('generator')
        self.assertEqual(count_parameters(store), 0)

    def test_end_to_end_gradient(self):
        config = GeneratorConfig(base_channels=2, bottleneck_channels=4, n_resblocks=3, input_size=16,
                                 word_dim=4, sentence_dim=4)
        generator = init_weights(Generator(config), seed=5).double()
        generator.zero_tail()
        with torch.no_grad():
            generator.tail.weight.normal_(0, 0.01)
        image = (torch.rand(1, 3, 16, 16, dtype=torch.float64) * 0.6 + 0.2)
        words = torch.randn(1, 4, 3, dtype=torch.float64)
        sentence = torch.randn(1, 4, dtype=torch.float64)
        weights = torch.randn(1, 3, 16, 16, dtype=torch.float64)
        report = grad_check(lambda x, w, s: (generator(x, w, s) * weights).sum(), [image, words, sentence],
                            h=1e-6, max_checks=25)
        self.assertLess(report.max_rel_error, 1e-3)


if __name__ == '__main__':
    unittest.main()
