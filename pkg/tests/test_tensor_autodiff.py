import os
import sys
import unittest

import numpy as np


ROOT_DIR = os.path.abspath(os.path.join(os.path.dirname(__file__), ".."))
SCRIPTS_DIR = os.path.join(ROOT_DIR, "scripts")
if SCRIPTS_DIR not in sys.path:
    sys.path.insert(0, SCRIPTS_DIR)

import tensor_autodiff as ad  # noqa: E402
from errors import AccumulationError, ShapeError  # noqa: E402

OP_TOLERANCE = 1e-4


def _weighted(op, out_shape, seed: int = 0):
    """Scalar reduction mean(op(x) * R) with a fixed random R so every output entry matters."""
    R = ad.Tensor(np.random.default_rng(seed + 100).normal(size=out_shape))

    def f(x):
        y = op(x)
        return ad.mean(ad.mul(y, R))

    return f


class TensorAutodiffTests(unittest.TestCase):
    def setUp(self) -> None:
        self.rng = np.random.default_rng(42)

    def _check(self, op, x: np.ndarray, out_shape) -> None:
        err = ad.grad_check(_weighted(op, out_shape), x)
        self.assertLessEqual(err, OP_TOLERANCE)

    def test_elementwise_ops_pass_grad_check(self) -> None:
        x = self.rng.normal(size=(3, 4))
        other = ad.Tensor(self.rng.normal(size=(3, 4)))
        cases = {
            "add": lambda t: ad.add(t, other),
            "sub": lambda t: ad.sub(other, t),
            "mul": lambda t: ad.mul(t, other),
            "square": lambda t: ad.mul(t, t),
            "scale": lambda t: ad.scale(t, -2.5),
            "operators": lambda t: (t * 3.0) - other + t * t,
        }
        for name, op in cases.items():
            with self.subTest(op=name):
                self._check(op, x, (3, 4))

    def test_relu_away_from_kink(self) -> None:
        x = self.rng.normal(size=(4, 5))
        x = np.where(np.abs(x) < 0.1, 0.5, x)
        self._check(ad.relu, x, (4, 5))

    def test_matmul_plain_and_batched(self) -> None:
        w = ad.Tensor(self.rng.normal(size=(4, 3)))
        self._check(lambda t: ad.matmul(t, w), self.rng.normal(size=(2, 5, 4)), (2, 5, 3))
        a = ad.Tensor(self.rng.normal(size=(2, 5, 4)))
        self._check(lambda t: ad.matmul(a, t), self.rng.normal(size=(4, 3)), (2, 5, 3))
        self._check(lambda t: ad.matmul(a, t), self.rng.normal(size=(2, 4, 3)), (2, 5, 3))

    def test_shape_ops_pass_grad_check(self) -> None:
        x = self.rng.normal(size=(2, 3, 4))
        other = ad.Tensor(self.rng.normal(size=(2, 3, 2)))
        cases = {
            "transpose": (lambda t: ad.transpose(t), (2, 4, 3)),
            "permute": (lambda t: ad.transpose(t, (2, 0, 1)), (4, 2, 3)),
            "reshape": (lambda t: ad.reshape(t, (6, 4)), (6, 4)),
            "concat": (lambda t: ad.concat([t, other], axis=-1), (2, 3, 6)),
            "roll": (lambda t: ad.roll(t, 2, axis=1), (2, 3, 4)),
            "gather": (lambda t: ad.gather(t, [3, 0, 3], axis=-1), (2, 3, 3)),
            "mean_axis": (lambda t: ad.mean(t, axis=(1, 2)), (2,)),
            "mean_last": (lambda t: ad.mean(t, axis=-1), (2, 3)),
        }
        for name, (op, shape) in cases.items():
            with self.subTest(op=name):
                self._check(op, x, shape)

    def test_broadcast_and_softmax_pass_grad_check(self) -> None:
        self._check(lambda t: ad.broadcast_to(t, (2, 3, 4)), self.rng.normal(size=(4,)), (2, 3, 4))
        self._check(lambda t: ad.broadcast_to(t, (2, 3, 4)), self.rng.normal(size=(2, 1, 4)), (2, 3, 4))
        self._check(ad.softmax, self.rng.normal(size=(3, 5)), (3, 5))

    def test_conv2d_passes_grad_check_for_every_input(self) -> None:
        x = self.rng.normal(size=(2, 3, 5, 5))
        w = self.rng.normal(size=(4, 3, 3, 3)) * 0.3
        b = self.rng.normal(size=(4,))
        out = (2, 4, 5, 5)
        self._check(lambda t: ad.conv2d(t, ad.Tensor(w), ad.Tensor(b)), x, out)
        self._check(lambda t: ad.conv2d(ad.Tensor(x), t, ad.Tensor(b)), w, out)
        self._check(lambda t: ad.conv2d(ad.Tensor(x), ad.Tensor(w), t), b, out)

    def test_conv2d_matches_direct_sum(self) -> None:
        x = self.rng.normal(size=(1, 2, 4, 4))
        w = self.rng.normal(size=(1, 2, 3, 3))
        out = ad.conv2d(ad.Tensor(x), ad.Tensor(w)).values
        padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        expected = np.zeros((4, 4))
        for y in range(4):
            for z in range(4):
                expected[y, z] = np.sum(padded[0, :, y:y + 3, z:z + 3] * w[0])
        np.testing.assert_allclose(out[0, 0], expected, atol=1e-12)

    def test_shared_subexpressions_sum_their_adjoints(self) -> None:
        x = ad.parameter([1.0, -2.0, 3.0])
        loss = ad.mean(ad.add(ad.mul(x, x), x))
        ad.backward(loss)
        np.testing.assert_allclose(x.grad, (2.0 * np.array([1.0, -2.0, 3.0]) + 1.0) / 3.0)

    def test_zero_weighted_leaf_gets_zero_gradient(self) -> None:
        x = ad.parameter(np.ones(3))
        y = ad.parameter(np.ones(3))
        loss = ad.mean(ad.add(x, ad.scale(y, 0.0)))
        ad.backward(loss)
        np.testing.assert_array_equal(y.grad, np.zeros(3))

    def test_second_backward_without_zero_grad_is_rejected(self) -> None:
        x = ad.parameter(np.ones(3), name="x")
        ad.backward(ad.mean(ad.mul(x, x)))
        with self.assertRaises(AccumulationError):
            ad.backward(ad.mean(ad.mul(x, x)))
        ad.zero_grad([x])
        ad.backward(ad.mean(ad.mul(x, x)))
        np.testing.assert_allclose(x.grad, np.full(3, 2.0 / 3.0))

    def test_grad_check_keeps_gradients_held_on_other_leaves(self) -> None:
        w = ad.parameter(np.array([2.0, -1.0, 0.5]), name="w")
        ad.backward(ad.mean(ad.mul(w, w)))
        held = w.grad.copy()
        err = ad.grad_check(lambda x: ad.mean(ad.mul(x, w)), self.rng.normal(size=3))
        self.assertLessEqual(err, OP_TOLERANCE)
        np.testing.assert_array_equal(w.grad, held)

        fresh = ad.parameter(np.ones(3), name="fresh")
        ad.grad_check(lambda x: ad.mean(ad.mul(x, fresh)), np.ones(3))
        self.assertIsNone(fresh.grad)

    def test_shape_mismatches_raise(self) -> None:
        a = ad.Tensor(np.zeros((2, 3)))
        with self.assertRaises(ShapeError):
            ad.add(a, ad.Tensor(np.zeros((3, 2))))
        with self.assertRaises(ShapeError):
            ad.matmul(a, ad.Tensor(np.zeros((2, 3))))
        with self.assertRaises(ShapeError):
            ad.broadcast_to(a, (4, 3, 3))
        with self.assertRaises(ShapeError):
            ad.reshape(a, (4, 2))
        with self.assertRaises(ShapeError):
            ad.backward(ad.mul(ad.parameter(np.ones(2)), ad.Tensor(np.ones(2))))
        with self.assertRaises(ShapeError):
            ad.conv2d(ad.Tensor(np.zeros((1, 2, 4, 4))), ad.Tensor(np.zeros((1, 2, 2, 2))))

    def test_constants_do_not_record_graph(self) -> None:
        out = ad.add(ad.Tensor(np.ones(2)), ad.Tensor(np.ones(2)))
        self.assertIsNone(out.node)
        self.assertFalse(out.requires_grad)


if __name__ == "__main__":
    unittest.main()
