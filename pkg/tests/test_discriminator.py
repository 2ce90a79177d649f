"""
Tests for the real/deblocked discriminator
"""

import unittest
import sys
import os

import torch

# Add parent directory to path for imports
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from core.discriminator import Discriminator, DiscriminatorConfig, discriminate
from core.exceptions import ShapeError
from core.nn_core import grad_check, init_weights


class TestDiscriminator(unittest.TestCase):

    def setUp(self):
        torch.manual_seed(0)
        self.discriminator = init_weights(Discriminator(DiscriminatorConfig(channels=(8, 16, 16, 16))), seed=0)

    def test_probabilities_in_open_interval(self):
        self.discriminator.train()
        probs = self.discriminator(torch.rand(4, 3, 64, 64))
        self.assertEqual(tuple(probs.shape), (4,))
        self.assertTrue(bool(((probs >= 1e-6) & (probs <= 1 - 1e-6)).all()))

    def test_single_image_in_eval_mode(self):
        self.discriminator.eval()
        prob = discriminate(torch.rand(3, 32, 32), self.discriminator)
        self.assertEqual(prob.dim(), 0)

    def test_eval_mode_does_not_touch_running_stats(self):
        self.discriminator.eval()
        before = {k: v.clone() for k, v in self.discriminator.state_dict().items()}
        self.discriminator(torch.rand(2, 3, 32, 32))
        for key, value in self.discriminator.state_dict().items():
            self.assertTrue(torch.equal(value, before[key]))

    def test_extreme_logits_are_clamped(self):
        self.discriminator.eval()
        with torch.no_grad():
            self.discriminator.classifier.bias.fill_(1e4)
        prob = discriminate(torch.rand(3, 32, 32), self.discriminator)
        self.assertAlmostEqual(float(prob), 1 - 1e-6, places=6)

    def test_zero_weights_give_even_odds(self):
        with torch.no_grad():
            for param in self.discriminator.parameters():
                param.zero_()
        self.discriminator.eval()
        probs = self.discriminator(torch.rand(3, 3, 32, 32))
        self.assertTrue(torch.equal(probs, torch.full((3,), 0.5)))

    def test_input_gradient(self):
        discriminator = self.discriminator.double().eval()
        images = torch.rand(2, 3, 32, 32, dtype=torch.float64, requires_grad=True)
        discriminator(images).sum().backward()
        self.assertTrue(bool(torch.isfinite(images.grad).all()))
        self.assertGreater(float(images.grad.abs().sum()), 0.0)
        report = grad_check(lambda x: discriminator(x), [images.detach()], h=1e-6, max_checks=20)
        self.assertLess(report.max_rel_error, 1e-3)

    def test_shape_errors(self):
        with self.assertRaises(ShapeError):
            self.discriminator(torch.rand(1, 3, 40, 40))
        with self.assertRaises(ShapeError):
            self.discriminator(torch.rand(1, 1, 32, 32))
        with self.assertRaises(ShapeError):
            discriminate(torch.rand(1, 3, 32, 32), self.discriminator)


if __name__ == '__main__':
    unittest.main()
