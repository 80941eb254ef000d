# SPDX-FileCopyrightText: 2022 Barndollar Music, Ltd.
#
# SPDX-License-Identifier: Apache-2.0

import unittest

import numpy as np

from .check import DEFAULT_NETWORK_TOL, DEFAULT_STEP, KINK_MARGIN_STEPS, NETWORK_ERROR_FLOOR, CheckResult, check_network, default_channels_per_group, inputs_clear_of_kinks, legal_shapes, numerical_gradient, relative_error, relu_margin, tiny_stack
from .model import LayerStack, Linear, ReLU
from .norm import NormKind
from .tensor import Rng, Tensor


class TestHelpers(unittest.TestCase):
    def test_numerical_gradient_of_a_quadratic(self):
        x = np.array([[1.0, -2.0], [0.5, 3.0]])
        grad = numerical_gradient(lambda v: float(np.sum(v ** 2)), x)
        np.testing.assert_allclose(grad, 2 * x, atol=1e-8)

    def test_numerical_gradient_leaves_input_alone(self):
        x = np.array([1.0, 2.0])
        numerical_gradient(lambda v: float(np.sum(v)), x)
        self.assertEqual(x.tolist(), [1.0, 2.0])

    def test_relative_error(self):
        self.assertEqual(relative_error(np.array([2.0, 4.0]), np.array([2.0, 3.0])), 0.25)
        self.assertEqual(relative_error(np.zeros(3), np.zeros(3)), 0.0)
        # Both sides tiny: the 1e-8 floor keeps the ratio finite.
        self.assertAlmostEqual(relative_error(np.array([1e-12]), np.array([0.0])), 1e-4)
        # Roundoff around an exact-zero network gradient stays far under tolerance.
        self.assertLess(relative_error(np.array([0.0]), np.array([1.1e-11]), NETWORK_ERROR_FLOOR),
                        DEFAULT_NETWORK_TOL)

    def test_default_channels_per_group(self):
        self.assertEqual(default_channels_per_group(3), 3)
        self.assertEqual(default_channels_per_group(4), 2)
        self.assertEqual(default_channels_per_group(9), 3)

    def test_legal_shapes(self):
        self.assertEqual(legal_shapes(NormKind.GN), [(4, 3, 2, 2)])
        self.assertEqual(legal_shapes(NormKind.INBN), [(4, 3, 2, 2)])
        self.assertEqual(legal_shapes(NormKind.L2BN), [(6, 4), (4, 3, 2, 2)])

    def test_result_passes_only_under_tolerance(self):
        result = CheckResult("x", 1e-5)
        result.errors = {"a": 1e-7, "b": 2e-6}
        self.assertTrue(result.passed())
        self.assertEqual(result.max_error(), 2e-6)
        result.errors["c"] = 1e-3
        self.assertFalse(result.passed())


class TestNetworkGradients(unittest.TestCase):
    def test_every_kind_end_to_end(self):
        for kind in NormKind:
            for seed in range(4):
                with self.subTest(kind=str(kind), seed=seed):
                    result = check_network(kind, seed=seed)
                    self.assertTrue(result.passed(),
                                    f"{result.name}: max relative error {result.max_error():.3e}")

    def test_bias_feeding_batch_norm_passes(self):
        # The bias cancels in the batch mean: its true gradient is exactly 0.
        for kind, keys in ((NormKind.BN, ["0.bias"]), (NormKind.INBN, ["0.bias", "3.bias"])):
            result = check_network(kind, seed=0)
            for key in keys:
                with self.subTest(kind=str(kind), key=key):
                    self.assertLessEqual(result.errors[key], DEFAULT_NETWORK_TOL)

    def test_relu_margin(self):
        rng = Rng(0)
        first = Linear(2, 2, rng)
        first.weight = Tensor(np.eye(2))
        stack = LayerStack("mlp", (2,), [first, ReLU(), Linear(2, 2, rng, is_classifier=True)])
        self.assertEqual(relu_margin(stack, Tensor([[0.5, -0.25], [2.0, 3.0]])), 0.25)

    def test_network_inputs_stay_off_relu_kinks(self):
        for kind in (NormKind.IN, NormKind.GN, NormKind.L2BN):
            with self.subTest(kind=str(kind)):
                stack = tiny_stack(kind, Rng(2))
                x = inputs_clear_of_kinks(stack, Rng(1), 6, DEFAULT_STEP)
                self.assertEqual(x.shape, (6,) + stack.input_shape)
                self.assertGreaterEqual(relu_margin(stack, x), KINK_MARGIN_STEPS * DEFAULT_STEP)

    def test_mixed_kinds_in_one_stack(self):
        stack = tiny_stack(NormKind.GN, Rng(3))
        stack.norm_layers()[1].set_kind(NormKind.L2BN)
        result = check_network(NormKind.GN, seed=3, stack=stack)
        self.assertEqual(result.name, "network gn/l2bn")
        self.assertLessEqual(result.max_error(), DEFAULT_NETWORK_TOL)

    def test_tiny_stack_matches_kind_rank(self):
        self.assertEqual(tiny_stack(NormKind.PN, Rng(0)).arch, "cnn")
        mlp = tiny_stack(NormKind.LNBN, Rng(0))
        self.assertEqual(mlp.arch, "mlp")
        self.assertEqual(mlp.norm_kinds(), [NormKind.LNBN])


if __name__ == "__main__":
    unittest.main()
