"""
Tests for the neural network building blocks, parameter store, Adam and the gradient oracle
"""

import unittest
import sys
import os

import torch
import torch.nn as nn

# Add parent directory to path for imports
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from core.exceptions import DomainError, NumericError, ShapeError
from core.nn_core import (AdamOptimizer, BiLSTM, LayerSpec, ParamStore, ResidualBlock, adam_step, batchnorm,
                          bilstm_forward, conv2d_backward, conv2d_forward, fc, gap, grad_check, init_weights,
                          prelu, residual_block, softmax, upsample_nearest2x)

H = 1e-6


class TestLayerSpec(unittest.TestCase):

    def test_parse_and_format(self):
        spec = LayerSpec.parse("Conv3-64-2-1", 32)
        self.assertEqual((spec.kernel, spec.channels_out, spec.stride, spec.padding), (3, 64, 2, 1))
        self.assertEqual(str(spec), "Conv3-64-2-1")
        conv = spec.build()
        self.assertEqual(tuple(conv.weight.shape), (64, 32, 3, 3))

    def test_bad_name(self):
        with self.assertRaises(DomainError):
            LayerSpec.parse("Dense-64", 3)


class TestPrimitives(unittest.TestCase):
    """Forward contracts and finite-difference checks of each op"""

    def setUp(self):
        torch.manual_seed(0)

    def test_conv_shapes(self):
        spec = LayerSpec.parse("Conv3-4-2-1", 3)
        out = conv2d_forward(torch.rand(3, 8, 8), spec, torch.rand(4, 3, 3, 3), torch.zeros(4))
        self.assertEqual(tuple(out.shape), (4, 4, 4))
        with self.assertRaises(ShapeError):
            conv2d_forward(torch.rand(2, 8, 8), spec, torch.rand(4, 3, 3, 3))
        with self.assertRaises(ShapeError):
            conv2d_forward(torch.rand(3, 8, 8), spec, torch.rand(4, 3, 5, 5))

    def test_conv_backward_matches_oracle(self):
        spec = LayerSpec.parse("Conv3-2-1-1", 2)
        x = torch.randn(2, 5, 5, dtype=torch.float64)
        w = torch.randn(2, 2, 3, 3, dtype=torch.float64)
        b = torch.randn(2, dtype=torch.float64)
        report = grad_check(lambda x_, w_, b_: conv2d_forward(x_, spec, w_, b_), [x, w, b], h=H)
        self.assertLess(report.max_rel_error, 1e-4)

        dx, dw, db = conv2d_backward(x, spec, w, b, torch.ones(2, 5, 5, dtype=torch.float64))
        self.assertEqual(dx.shape, x.shape)
        self.assertEqual(dw.shape, w.shape)
        # d(sum)/d(bias) counts output positions
        self.assertTrue(torch.allclose(db, torch.full((2,), 25.0, dtype=torch.float64)))

    def test_softmax_uniform(self):
        out = softmax(torch.full((5,), 2.0, dtype=torch.float64))
        self.assertTrue(torch.allclose(out, torch.full((5,), 0.2, dtype=torch.float64)))

    def test_softmax_sums_to_one(self):
        out = softmax(torch.randn(7, dtype=torch.float64) * 10)
        self.assertAlmostEqual(float(out.sum()), 1.0, delta=1e-9)
        self.assertGreaterEqual(float(out.min()), 0.0)

    def test_softmax_gradient(self):
        weights = torch.randn(6, dtype=torch.float64)
        report = grad_check(lambda x: (softmax(x) * weights).sum(), [torch.randn(6, dtype=torch.float64)], h=H)
        self.assertLess(report.max_rel_error, 1e-4)

    def test_gap_of_constant(self):
        self.assertTrue(torch.equal(gap(torch.full((3, 4, 4), 0.7)), torch.full((3,), 0.7)))
        with self.assertRaises(ShapeError):
            gap(torch.rand(4, 4))

    def test_prelu_fc_upsample_gradients(self):
        slope = torch.tensor([0.25], dtype=torch.float64)
        x = torch.randn(2, 3, 4, dtype=torch.float64)
        self.assertLess(grad_check(prelu, [x, slope], h=H).max_rel_error, 1e-4)

        w = torch.randn(3, 5, dtype=torch.float64)
        b = torch.randn(3, dtype=torch.float64)
        self.assertLess(grad_check(fc, [torch.randn(2, 5, dtype=torch.float64), w, b], h=H).max_rel_error, 1e-4)
        with self.assertRaises(ShapeError):
            fc(torch.randn(2, 4), torch.randn(3, 5))

        weights = torch.randn(2, 6, 6, dtype=torch.float64)
        report = grad_check(lambda t: upsample_nearest2x(t) * weights, [torch.randn(2, 3, 3, dtype=torch.float64)], h=H)
        self.assertLess(report.max_rel_error, 1e-4)

    def test_upsample_repeats(self):
        out = upsample_nearest2x(torch.arange(4.0).view(1, 2, 2))
        self.assertEqual(out[0].tolist(), [[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]])

    def test_batchnorm_modes(self):
        x = torch.randn(4, 3, 5, 5, dtype=torch.float64) * 2 + 1
        running_mean = torch.zeros(3, dtype=torch.float64)
        running_var = torch.ones(3, dtype=torch.float64)
        out = batchnorm(x, running_mean, running_var, training=True)
        self.assertLess(float(out.mean(dim=(0, 2, 3)).abs().max()), 1e-9)
        self.assertFalse(torch.equal(running_mean, torch.zeros(3, dtype=torch.float64)))

        frozen_mean, frozen_var = running_mean.clone(), running_var.clone()
        batchnorm(x, running_mean, running_var, training=False)
        self.assertTrue(torch.equal(running_mean, frozen_mean))
        self.assertTrue(torch.equal(running_var, frozen_var))

        weights = torch.randn(4, 3, 5, 5, dtype=torch.float64)
        report = grad_check(lambda t: batchnorm(t, torch.zeros(3, dtype=torch.float64),
                                                torch.ones(3, dtype=torch.float64), training=True) * weights,
                            [x], h=H, max_checks=40)
        self.assertLess(report.max_rel_error, 1e-4)

    def test_residual_block(self):
        block = init_weights(ResidualBlock(4), seed=1).double()
        x = torch.randn(4, 6, 6, dtype=torch.float64)
        self.assertEqual(residual_block(x, block).shape, x.shape)
        with torch.no_grad():
            block.conv2.weight.zero_()
            block.conv2.bias.zero_()
        self.assertTrue(torch.equal(residual_block(x, block), x))
        with self.assertRaises(ShapeError):
            residual_block(torch.randn(3, 6, 6, dtype=torch.float64), block)

    def test_residual_block_gradient(self):
        block = init_weights(ResidualBlock(2), seed=2).double()
        report = grad_check(lambda t: residual_block(t, block), [torch.randn(2, 4, 4, dtype=torch.float64)], h=H)
        self.assertLess(report.max_rel_error, 1e-3)


class TestBiLSTM(unittest.TestCase):

    def test_shapes(self):
        lstm = BiLSTM(5, 8)
        hidden, final = bilstm_forward(torch.randn(4, 5), lstm)
        self.assertEqual(tuple(hidden.shape), (4, 8))
        self.assertEqual(tuple(final.shape), (8,))

    def test_zero_weights_give_zero_outputs(self):
        lstm = BiLSTM(3, 4)
        with torch.no_grad():
            for param in lstm.parameters():
                param.zero_()
        hidden, final = bilstm_forward(torch.zeros(3, 3), lstm)
        self.assertTrue(torch.equal(hidden, torch.zeros(3, 4)))
        self.assertTrue(torch.equal(final, torch.zeros(4)))

    def test_empty_sequence(self):
        with self.assertRaises(DomainError):
            bilstm_forward(torch.zeros(0, 3), BiLSTM(3, 4))

    def test_odd_hidden_rejected(self):
        with self.assertRaises(DomainError):
            BiLSTM(3, 5)

    def test_gradient_three_steps(self):
        lstm = init_weights(BiLSTM(3, 4), seed=3).double()
        weights = torch.randn(3, 4, dtype=torch.float64)
        report = grad_check(lambda e: (bilstm_forward(e, lstm)[0] * weights).sum(),
                            [torch.randn(3, 3, dtype=torch.float64)], h=H)
        self.assertLess(report.max_rel_error, 1e-4)

    def test_padding_does_not_change_real_positions(self):
        lstm = init_weights(BiLSTM(3, 4), seed=4)
        seq = torch.randn(1, 2, 3)
        padded = torch.cat([seq, torch.randn(1, 3, 3)], dim=1)
        hidden_short, final_short = lstm(seq)
        hidden_padded, final_padded = lstm(padded, torch.tensor([2]))
        self.assertTrue(torch.allclose(hidden_short, hidden_padded[:, :2], atol=1e-6))
        self.assertTrue(torch.allclose(final_short, final_padded, atol=1e-6))


class TestGradCheck(unittest.TestCase):

    def test_linear_function(self):
        a = torch.randn(5, dtype=torch.float64)
        report = grad_check(lambda x: (a * x).sum(), [torch.randn(5, dtype=torch.float64)], h=1e-4)
        self.assertLess(report.max_rel_error, 1e-8)
        self.assertTrue(report.passed)
        self.assertEqual(report.checked, 5)

    def test_detects_wrong_gradient(self):
        class Wrong(torch.autograd.Function):
            @staticmethod
            def forward(ctx, x):
                return x ** 2

            @staticmethod
            def backward(ctx, grad):
                return grad * 0.0

        report = grad_check(Wrong.apply, [torch.ones(3, dtype=torch.float64)])
        self.assertFalse(report.passed)

    def test_small_gradients_are_compared_relatively(self):
        class SlightlyWrong(torch.autograd.Function):
            @staticmethod
            def forward(ctx, x):
                return x * 1e-6

            @staticmethod
            def backward(ctx, grad):
                return grad * 1.01e-6

        x = torch.randn(4, dtype=torch.float64)
        self.assertFalse(grad_check(SlightlyWrong.apply, [x]).passed)
        report = grad_check(lambda t: t * 1e-6, [x])
        self.assertTrue(report.passed)
        self.assertLess(report.max_rel_error, 1e-6)

    def test_non_finite_output(self):
        with self.assertRaises(NumericError):
            grad_check(lambda x: torch.log(x), [torch.tensor([-1.0], dtype=torch.float64)])

    def test_subset_selection(self):
        report = grad_check(lambda x: (x ** 2).sum(), [torch.randn(50, dtype=torch.float64)], max_checks=7)
        self.assertEqual(report.checked, 7)


class TestParamStoreAndAdam(unittest.TestCase):
    """Freezing and optimizer contracts"""

    def _store(self):
        torch.manual_seed(0)
        return ParamStore({'a': nn.Linear(3, 2), 'b': nn.Linear(2, 1)})

    def test_names_and_counts(self):
        store = self._store()
        self.assertIn('a.weight', store)
        self.assertEqual(len(store), 4)
        self.assertEqual(store.count(), 3 * 2 + 2 + 2 + 1)
        store.freeze('a')
        self.assertTrue(store.is_frozen('a.weight'))
        self.assertFalse(store['a.weight'].requires_grad)
        self.assertEqual(store.count(trainable_only=True), 3)
        store.unfreeze('a')
        self.assertTrue(store['a.weight'].requires_grad)

    def test_zero_gradient_leaves_parameters(self):
        store = self._store()
        optimizer = AdamOptimizer(store, lr=0.1)
        before = store.snapshot()
        for _, param in store.items():
            param.grad = torch.zeros_like(param)
        adam_step(store, optimizer)
        for name, value in store.snapshot().items():
            self.assertTrue(torch.equal(value, before[name]))

    def test_frozen_parameter_never_moves(self):
        store = self._store()
        optimizer = AdamOptimizer(store, lr=0.1)
        store.freeze('b')
        before = store.snapshot()
        for _, param in store.items():
            param.grad = torch.ones_like(param)
        adam_step(store, optimizer)
        for name, value in store.snapshot('b').items():
            self.assertTrue(torch.equal(value, before[name]))
        self.assertFalse(torch.equal(store['a.weight'], before['a.weight']))

    def test_non_finite_gradient_names_parameter(self):
        store = self._store()
        optimizer = AdamOptimizer(store, lr=0.1)
        store['a.bias'].grad = torch.tensor([float('nan'), 0.0])
        with self.assertRaises(NumericError) as ctx:
            optimizer.step()
        self.assertEqual(ctx.exception.parameter, 'a.bias')
        self.assertIn('a.bias', str(ctx.exception))

    def test_quadratic_converges(self):
        x = nn.Parameter(torch.zeros(1, dtype=torch.float64))
        holder = nn.Module()
        holder.x = x
        store = ParamStore({'q': holder})
        optimizer = AdamOptimizer(store, lr=0.1)
        for _ in range(500):
            optimizer.zero_grad()
            loss = ((x - 3.0) ** 2).sum()
            loss.backward()
            adam_step(store, optimizer)
        self.assertAlmostEqual(float(x), 3.0, delta=0.05)

    def test_optimizer_needs_trainable_parameters(self):
        store = self._store()
        store.freeze()
        with self.assertRaises(DomainError):
            AdamOptimizer(store, lr=0.1)

    def test_state_round_trip(self):
        store = self._store()
        state = store.state_tensors()
        other = ParamStore({'a': nn.Linear(3, 2), 'b': nn.Linear(2, 1)})
        other.load_state_tensors(state)
        for name, value in other.state_tensors().items():
            self.assertTrue(torch.equal(value, state[name]))


if __name__ == '__main__':
    unittest.main()
