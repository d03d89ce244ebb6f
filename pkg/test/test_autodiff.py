from unittest import TestCase

import numpy as np
from hypothesis import given, settings
from hypothesis.strategies import integers

from semloc import autodiff as ad
from semloc.exceptions import DetachedTensor, NumericFault, ShapeMismatch


def weighted(op, shape, seed=0):
    """
    Scalarises ``op`` with fixed random weights so every output element
    contributes to the gradient.
    """
    w = np.random.default_rng(seed + 1000).normal(size=shape)
    return lambda x: ad.sum_all(op(x) * w)


class PrimitiveGradcheckTestCase(TestCase):
    """
    Tape gradients agree with central differences for every primitive.
    """
    tolerance = 1e-5

    def assertGradcheck(self, f, x):
        self.assertLess(ad.gradcheck(f, x), self.tolerance)

    @settings(max_examples=10, deadline=None)
    @given(integers(0, 2 ** 31 - 1))
    def test_elementwise(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(3, 4))
        other = rng.normal(size=(3, 4))
        row = rng.normal(size=(4,))

        self.assertGradcheck(weighted(lambda t: ad.add(t, row), (3, 4), seed), x)
        self.assertGradcheck(weighted(lambda t: ad.sub(other, t), (3, 4), seed), x)
        self.assertGradcheck(weighted(lambda t: ad.mul(t, other), (3, 4), seed), x)
        self.assertGradcheck(weighted(lambda t: ad.mul(t, t), (3, 4), seed), x)
        self.assertGradcheck(weighted(lambda t: ad.scale(t, -2.5), (3, 4), seed), x)
        self.assertGradcheck(weighted(ad.square, (3, 4), seed), x)
        self.assertGradcheck(weighted(ad.tanh, (3, 4), seed), x)
        self.assertGradcheck(weighted(ad.elu, (3, 4), seed), x)

    @settings(max_examples=10, deadline=None)
    @given(integers(0, 2 ** 31 - 1))
    def test_positive_domain(self, seed):
        x = np.random.default_rng(seed).uniform(0.5, 2.0, size=(5,))
        self.assertGradcheck(weighted(ad.sqrt, (5,), seed), x)
        self.assertGradcheck(weighted(ad.ln, (5,), seed), x)

    @settings(max_examples=10, deadline=None)
    @given(integers(0, 2 ** 31 - 1))
    def test_piecewise_linear(self, seed):
        x = np.random.default_rng(seed).normal(size=(6,))
        # Keep clear of the kink.
        x = np.where(np.abs(x) < 1e-3, 0.5, x)
        self.assertGradcheck(weighted(ad.relu, (6,), seed), x)
        self.assertGradcheck(weighted(ad.leaky_relu, (6,), seed), x)

    @settings(max_examples=10, deadline=None)
    @given(integers(0, 2 ** 31 - 1))
    def test_linear_algebra(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(3, 4))
        b = rng.normal(size=(4, 2))
        v = rng.normal(size=(3, 4))

        self.assertGradcheck(weighted(lambda t: ad.matmul(t, b), (3, 2), seed), x)
        self.assertGradcheck(
            weighted(lambda t: ad.concat([t, ad.Tensor(v)], axis=1), (3, 8), seed), x,
        )
        self.assertGradcheck(weighted(lambda t: ad.dot(t, v), (3, 1), seed), x)
        self.assertGradcheck(weighted(lambda t: ad.reshape(t, (12,)), (12,), seed), x)
        self.assertGradcheck(lambda t: ad.mean(t), x)
        self.assertGradcheck(lambda t: ad.dot(ad.reshape(t, (12,)), v.ravel()), x)

    @settings(max_examples=10, deadline=None)
    @given(integers(0, 2 ** 31 - 1))
    def test_graph_primitives(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(5, 3))
        index = [4, 0, 0, 2]
        segments = [0, 1, 1, 0, 2]
        scores = rng.normal(size=(5, 1))

        self.assertGradcheck(weighted(lambda t: ad.gather_rows(t, index), (4, 3), seed), x)
        self.assertGradcheck(
            weighted(lambda t: ad.sum_segments(t, segments, 4), (4, 3), seed), x,
        )
        self.assertGradcheck(
            weighted(lambda t: ad.softmax_over_segments(t, segments, 3), (5, 1), seed),
            scores,
        )
        self.assertGradcheck(weighted(ad.l2_normalize, (5, 3), seed), x)

    @settings(max_examples=10, deadline=None)
    @given(integers(0, 2 ** 31 - 1))
    def test_batch_norm_training(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(6, 3))
        gamma = ad.Tensor(rng.uniform(0.5, 1.5, size=3))
        beta = ad.Tensor(rng.normal(size=3))

        def f(t):
            return ad.batch_norm(
                t, gamma, beta, np.zeros(3), np.ones(3), training=True,
                segments=[0, 0, 0, 1, 1, 1], num_segments=2,
            )

        self.assertGradcheck(weighted(f, (6, 3), seed), x)


class TensorTestCase(TestCase):
    def test_constants_record_nothing(self):
        """
        Primitives over constants compute values without a tape.
        """
        out = ad.add(ad.Tensor([1.0, 2.0]), [3.0, 4.0])
        self.assertIsNone(out.tape)
        self.assertListEqual(out.values, [4.0, 6.0])

    def test_values_are_immutable(self):
        t = ad.Tensor([1.0, 2.0])
        with self.assertRaises(ValueError):
            t.value[0] = 5.0

    def test_reflected_operators(self):
        """
        ``ndarray * Tensor`` dispatches to the tensor, not to numpy.
        """
        tape = ad.Tape()
        x = tape.watch([1.0, 2.0], 'x')
        out = np.array([3.0, 4.0]) * x
        self.assertIsInstance(out, ad.Tensor)
        grad, = ad.backward(tape, ad.sum_all(out), [x])
        np.testing.assert_array_equal(grad, [3.0, 4.0])

    def test_item_requires_single_element(self):
        with self.assertRaises(ShapeMismatch):
            ad.Tensor([1.0, 2.0]).item()


class TapeTestCase(TestCase):
    def test_shared_subexpression(self):
        """
        Gradients from every use of a node are accumulated.
        """
        tape = ad.Tape()
        x = tape.watch(3.0, 'x')
        y = x * x + x
        grads = ad.backward(tape, y)
        self.assertAlmostEqual(float(grads['x']), 7.0)

    def test_unreached_leaf_gets_zeros(self):
        tape = ad.Tape()
        x = tape.watch([1.0, 2.0], 'x')
        unused = tape.watch([[1.0, 2.0, 3.0]], 'unused')
        grads = ad.backward(tape, ad.sum_all(x))
        np.testing.assert_array_equal(grads['unused'], np.zeros((1, 3)))

    def test_backward_requires_scalar(self):
        tape = ad.Tape()
        x = tape.watch([1.0, 2.0], 'x')
        with self.assertRaises(ShapeMismatch):
            ad.backward(tape, ad.scale(x, 2.0))

    def test_detached_source(self):
        tape = ad.Tape()
        x = tape.watch([1.0], 'x')
        other = ad.Tape().watch([1.0], 'y')
        with self.assertRaises(DetachedTensor):
            ad.backward(tape, ad.sum_all(x), [other])

    def test_mixed_tapes(self):
        with self.assertRaises(DetachedTensor):
            ad.add(ad.Tape().watch(1.0), ad.Tape().watch(2.0))

    def test_shape_mismatch_context(self):
        with self.assertRaises(ShapeMismatch) as context:
            ad.matmul(ad.Tensor(np.zeros((2, 3))), ad.Tensor(np.zeros((2, 3))))

        self.assertEqual(context.exception.context['op'], 'matmul')
        self.assertListEqual(context.exception.context['shapes'], [(2, 3), (2, 3)])

    def test_non_finite_output(self):
        with self.assertRaises(NumericFault) as context:
            ad.ln(ad.Tensor([1.0, 0.0]))

        self.assertEqual(context.exception.context['nonFinite'], 1)

    def test_sqrt_gradient_at_zero(self):
        tape = ad.Tape()
        x = tape.watch([0.0, 4.0], 'x')
        grad, = ad.backward(tape, ad.sum_all(ad.sqrt(x)), [x])
        np.testing.assert_allclose(grad, [0.0, 0.25])


class L2NormalizeTestCase(TestCase):
    @settings(max_examples=50, deadline=None)
    @given(integers(0, 2 ** 31 - 1))
    def test_unit_norm(self, seed):
        x = np.random.default_rng(seed).normal(size=(4, 7))
        y = ad.l2_normalize(ad.Tensor(x)).value
        np.testing.assert_allclose(np.linalg.norm(y, axis=1), 1.0, atol=1e-12)

    def test_zero_row_passes_through(self):
        tape = ad.Tape()
        x = tape.watch([[0.0, 0.0], [3.0, 4.0]], 'x')
        with self.assertLogs('semloc.autodiff', 'DEBUG') as logs:
            y = ad.l2_normalize(x)
        self.assertIn('1 zero row', logs.output[0])
        np.testing.assert_allclose(y.value, [[0.0, 0.0], [0.6, 0.8]])

        grad, = ad.backward(tape, ad.sum_all(y), [x])
        np.testing.assert_array_equal(grad[0], [0.0, 0.0])

    def test_strict_tape_rejects_zero_rows(self):
        tape = ad.Tape(strict=True)
        x = tape.watch([[0.0, 0.0]], 'x')
        with self.assertRaises(NumericFault):
            ad.l2_normalize(x)


class SegmentTestCase(TestCase):
    def test_softmax_sums_to_one_per_segment(self):
        scores = ad.Tensor([[1.0], [2.0], [3.0], [-1.0]])
        y = ad.softmax_over_segments(scores, [0, 0, 1, 1], 2).value[:, 0]
        self.assertAlmostEqual(y[0] + y[1], 1.0)
        self.assertAlmostEqual(y[2] + y[3], 1.0)
        self.assertGreater(y[1], y[0])

    def test_empty_segment_sums_to_zero(self):
        out = ad.sum_segments(ad.Tensor([[1.0], [2.0]]), [0, 0], 3).value
        np.testing.assert_array_equal(out, [[3.0], [0.0], [0.0]])

    def test_segment_out_of_range(self):
        with self.assertRaises(ShapeMismatch):
            ad.sum_segments(ad.Tensor([[1.0]]), [2], 2)

    def test_batch_norm_updates_running_statistics(self):
        running_mean, running_var = np.zeros(1), np.ones(1)
        ad.batch_norm(
            ad.Tensor([[1.0], [3.0]]), ad.Tensor([1.0]), ad.Tensor([0.0]),
            running_mean, running_var, training=True,
        )
        np.testing.assert_allclose(running_mean, [0.2])
        # Unbiased variance of (1, 3) is 2.
        np.testing.assert_allclose(running_var, [0.9 + 0.2])
