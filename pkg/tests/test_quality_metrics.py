"""
Tests for PSNR, the perceptual distance and fid_small
"""

import math
import unittest
import sys
import os
import tempfile

import numpy as np
import torch

# Add parent directory to path for imports
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from core.exceptions import CheckpointError, DomainError, NumericError, ShapeError
from core.jpeg_codec import degrade
from core.nn_core import grad_check
from core.quality_metrics import (PSNR_CAP, PerceptualExtractor, cap_psnr, fid_small, frechet_distance,
                                  frechet_distance_from_features, load_extractor, perceptual_distance, psnr)
from tests.fixtures import SLOW_TESTS, smooth_image


class TestPsnr(unittest.TestCase):

    def test_closed_form(self):
        a = torch.full((3, 16, 16), 0.5, dtype=torch.float64)
        self.assertAlmostEqual(psnr(a, a + 1.0 / 255.0), 48.1308, delta=1e-3)

    def test_identical_images(self):
        a = torch.rand(3, 8, 8)
        self.assertEqual(psnr(a, a), math.inf)
        self.assertEqual(cap_psnr(psnr(a, a)), PSNR_CAP)

    def test_shape_mismatch(self):
        with self.assertRaises(ShapeError):
            psnr(torch.rand(3, 8, 8), torch.rand(3, 8, 16))


class TestPerceptualDistance(unittest.TestCase):
    """Reference-based perceptual-quality space"""

    def setUp(self):
        self.extractor = PerceptualExtractor(seed=1234)

    def test_identity_and_positivity(self):
        a, b = smooth_image(32, seed=0), smooth_image(32, seed=1)
        self.assertEqual(float(perceptual_distance(a, a, self.extractor)), 0.0)
        self.assertGreater(float(perceptual_distance(a, b, self.extractor)), 0.0)

    def test_symmetric(self):
        a, b = smooth_image(32, seed=0), smooth_image(32, seed=1)
        self.assertAlmostEqual(float(perceptual_distance(a, b, self.extractor)),
                               float(perceptual_distance(b, a, self.extractor)), places=6)

    def test_positive_on_random_pairs(self):
        generator = torch.Generator().manual_seed(11)
        a = torch.rand(120, 3, 16, 16, generator=generator)
        b = torch.rand(120, 3, 16, 16, generator=generator)
        self.assertTrue(bool((perceptual_distance(a, b, self.extractor) > 0).all()))

    def test_batch_returns_vector(self):
        a = torch.stack([smooth_image(32, seed=s) for s in range(3)])
        self.assertEqual(tuple(perceptual_distance(a, a.flip(0), self.extractor).shape), (3,))

    def test_same_seed_same_extractor(self):
        other = PerceptualExtractor(seed=1234)
        for p, q in zip(self.extractor.parameters(), other.parameters()):
            self.assertTrue(torch.equal(p, q))

    def test_extractor_is_frozen(self):
        self.extractor.train()
        self.assertFalse(self.extractor.training)
        self.assertFalse(any(p.requires_grad for p in self.extractor.parameters()))

    def test_gradient(self):
        extractor = PerceptualExtractor(seed=7).double()
        reference = smooth_image(16, seed=2, dtype=torch.float64)
        report = grad_check(lambda x: perceptual_distance(x, reference, extractor),
                            [smooth_image(16, seed=3, dtype=torch.float64)], h=1e-6, max_checks=30)
        self.assertLess(report.max_rel_error, 1e-3)

    def test_ranks_quality_factors(self):
        images = [smooth_image(64, seed=s) for s in range(8)]
        harsh = np.mean([float(perceptual_distance(degrade(x, 1), x, self.extractor)) for x in images])
        mild = np.mean([float(perceptual_distance(degrade(x, 10), x, self.extractor)) for x in images])
        self.assertGreater(harsh, mild)


class TestExternalExtractorWeights(unittest.TestCase):
    """Extractor weights imported from a state dict file"""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.path = os.path.join(self.tmp.name, 'extractor.pt')
        torch.save(PerceptualExtractor(seed=7).state_dict(), self.path)
        self.a, self.b = smooth_image(32, seed=0), smooth_image(32, seed=5)

    def tearDown(self):
        self.tmp.cleanup()

    def test_loaded_weights_change_distances(self):
        loaded = PerceptualExtractor.from_checkpoint(self.path)
        self.assertNotAlmostEqual(float(perceptual_distance(self.a, self.b, loaded)),
                                  float(perceptual_distance(self.a, self.b, PerceptualExtractor(seed=1234))),
                                  places=6)
        self.assertEqual(float(perceptual_distance(self.a, self.b, loaded)),
                         float(perceptual_distance(self.a, self.b, PerceptualExtractor(seed=7))))
        self.assertFalse(any(p.requires_grad for p in loaded.parameters()))

    def test_load_extractor(self):
        loaded = load_extractor(weights_path=self.path)
        for p, q in zip(loaded.parameters(), PerceptualExtractor(seed=7).parameters()):
            self.assertTrue(torch.equal(p, q))
        for p, q in zip(load_extractor(seed=3).parameters(), PerceptualExtractor(seed=3).parameters()):
            self.assertTrue(torch.equal(p, q))

    def test_shape_mismatch(self):
        torch.save(PerceptualExtractor(seed=0, stages=(8, 16, 32)).state_dict(), self.path)
        with self.assertRaises(CheckpointError):
            PerceptualExtractor.from_checkpoint(self.path)

    def test_missing_layer(self):
        state = PerceptualExtractor(seed=7).state_dict()
        state.pop('stages.2.2.bias')
        torch.save(state, self.path)
        with self.assertRaises(CheckpointError):
            PerceptualExtractor.from_checkpoint(self.path)

    def test_missing_file(self):
        with self.assertRaises(CheckpointError):
            PerceptualExtractor.from_checkpoint(os.path.join(self.tmp.name, 'absent.pt'))


class TestFrechetDistance(unittest.TestCase):
    """Closed-form checks of the Gaussian Frechet distance"""

    def test_identical_sets(self):
        images = torch.stack([smooth_image(32, seed=s) for s in range(6)])
        self.assertAlmostEqual(fid_small(images, images), 0.0, delta=1e-6)

    def test_mean_shift(self):
        rng = np.random.default_rng(0)
        sigma = np.diag([1.0, 2.0, 0.5])
        mu = rng.normal(size=3)
        shift = np.array([0.3, -1.2, 0.7])
        self.assertAlmostEqual(frechet_distance(mu, sigma, mu + shift, sigma), float(shift @ shift), delta=1e-6)

    def test_mean_shift_from_features(self):
        rng = np.random.default_rng(1)
        features = rng.normal(size=(50, 4))
        shift = np.array([1.0, 0.0, -0.5, 2.0])
        self.assertAlmostEqual(frechet_distance_from_features(features, features + shift),
                               float(shift @ shift), delta=1e-6)

    def test_covariance_term(self):
        # 1-D: (s1^2 + s2^2 - 2 s1 s2) = (s1 - s2)^2
        self.assertAlmostEqual(frechet_distance(np.zeros(1), np.array([[4.0]]), np.zeros(1), np.array([[1.0]])),
                               1.0, delta=1e-9)

    def test_symmetric(self):
        set_a = torch.stack([smooth_image(32, seed=s) for s in range(5)])
        set_b = degrade(set_a, 3)
        self.assertAlmostEqual(fid_small(set_a, set_b), fid_small(set_b, set_a), delta=1e-6)

    def test_negative_eigenvalue(self):
        with self.assertRaises(NumericError):
            frechet_distance(np.zeros(2), np.diag([1.0, -1e-6]), np.zeros(2), np.eye(2))
        # Rounding-sized negatives are clamped
        self.assertAlmostEqual(frechet_distance(np.zeros(2), np.diag([1.0, -1e-10]), np.zeros(2),
                                                np.diag([1.0, 0.0])), 0.0, delta=1e-9)

    def test_needs_two_images(self):
        with self.assertRaises(DomainError):
            fid_small([smooth_image(32)], [smooth_image(32), smooth_image(32, seed=1)])

    @unittest.skipUnless(SLOW_TESTS, "set TGJAR_SLOW_TESTS=1 for the 32-image ranking run")
    def test_ranks_quality_factors_on_32_images(self):
        extractor = PerceptualExtractor(seed=1234)
        clean = torch.stack([smooth_image(64, seed=s) for s in range(32)])
        harsh, mild = degrade(clean, 1), degrade(clean, 10)
        self.assertGreater(fid_small(harsh, clean, extractor), fid_small(mild, clean, extractor))
        self.assertGreater(float(perceptual_distance(harsh, clean, extractor).mean()),
                           float(perceptual_distance(mild, clean, extractor).mean()))


if __name__ == '__main__':
    unittest.main()
