# SPDX-FileCopyrightText: 2022 Barndollar Music, Ltd.
#
# SPDX-License-Identifier: Apache-2.0

"""Finite-difference verification of analytic backward passes."""

from typing import Callable, Optional

import numpy as np

from .errors import NormLabError
from .model import LayerStack, ReLU, backward, build_cnn, build_mlp, cross_entropy, forward, set_norm_kinds
from .norm import Mode, NormKind, NormSpec, NormState, norm_backward, norm_forward
from .tensor import Rng, Tensor

DEFAULT_STEP = 1e-5
DEFAULT_LAYER_TOL = 1e-5
DEFAULT_NETWORK_TOL = 1e-4

# Error scale floors. Whole-network gradients include exact zeros (a bias
# feeding BN), where central differences leave only roundoff.
LAYER_ERROR_FLOOR = 1e-8
NETWORK_ERROR_FLOOR = 1e-3

# Network inputs are redrawn until every pre-ReLU value is this many steps
# away from the kink.
KINK_MARGIN_STEPS = 100
_MAX_INPUT_DRAWS = 200

# Shapes every layer kind is checked on (rank-2 only where the kind allows it).
RANK2_SHAPE = (6, 4)
RANK4_SHAPE = (4, 3, 2, 2)


def relative_error(analytic: np.ndarray, numeric: np.ndarray,
                   floor: float = LAYER_ERROR_FLOOR) -> float:
    """max|a - n| / max(max|a|, max|n|, floor) over the whole tensor."""
    scale = max(float(np.max(np.abs(analytic))), float(np.max(np.abs(numeric))), floor)
    return float(np.max(np.abs(analytic - numeric))) / scale


def numerical_gradient(f: Callable[[np.ndarray], float], x: np.ndarray,
                       step: float = DEFAULT_STEP) -> np.ndarray:
    """Central differences of scalar f at x."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, grad_flat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        plus = f(x)
        flat[i] = orig - step
        minus = f(x)
        flat[i] = orig
        grad_flat[i] = (plus - minus) / (2 * step)
    return grad


class CheckResult:
    """Max relative error per gradient for one checked configuration."""
    name: str
    errors: dict[str, float]
    tol: float

    def __init__(self, name: str, tol: float):
        self.name = name
        self.errors = {}
        self.tol = tol

    def passed(self) -> bool:
        return all(err <= self.tol for err in self.errors.values())

    def max_error(self) -> float:
        return max(self.errors.values())


def default_channels_per_group(channels: int) -> int:
    """Smallest divisor of channels above 1 (channels itself if prime)."""
    for g in range(2, channels):
        if channels % g == 0:
            return g
    return channels


def legal_shapes(kind: NormKind) -> list[tuple[int, ...]]:
    if kind.requires_rank4():
        return [RANK4_SHAPE]
    return [RANK2_SHAPE, RANK4_SHAPE]


def check_norm_layer(kind: NormKind, shape: tuple[int, ...], seed: int,
                     tol: float = DEFAULT_LAYER_TOL, step: float = DEFAULT_STEP) -> CheckResult:
    """Compares grad_in, grad_gamma and grad_beta with central differences.

    The loss is sum(y * w) for a fixed random weighting w, so grad_out = w.
    """
    if len(shape) not in (2, 4):
        raise NormLabError(f"gradcheck shape must be rank 2 or 4, got {list(shape)}")
    channels = shape[1]
    spec = NormSpec(kind, channels_per_group=default_channels_per_group(channels))
    rng = Rng(seed)
    x = rng.normal(shape)
    weights = rng.normal(shape)
    gamma = rng.normal((channels,), 1.0, 0.5)
    beta = rng.normal((channels,))

    def loss(x_in: np.ndarray, gamma_in: np.ndarray, beta_in: np.ndarray) -> float:
        state = NormState(spec, channels)
        state.gamma, state.beta = Tensor(gamma_in), Tensor(beta_in)
        y, _ = norm_forward(Tensor(x_in), spec, state)
        return float(np.sum(y.data * weights))

    state = NormState(spec, channels)
    state.gamma, state.beta = Tensor(gamma), Tensor(beta)
    _, cache = norm_forward(Tensor(x), spec, state)
    grad_in, grad_gamma, grad_beta = norm_backward(Tensor(weights), cache, state)

    result = CheckResult(f"{kind} {list(shape)}", tol)
    result.errors["grad_in"] = relative_error(
        grad_in.data, numerical_gradient(lambda v: loss(v, gamma, beta), x, step))
    result.errors["grad_gamma"] = relative_error(
        grad_gamma.data, numerical_gradient(lambda v: loss(x, v, beta), gamma, step))
    result.errors["grad_beta"] = relative_error(
        grad_beta.data, numerical_gradient(lambda v: loss(x, gamma, v), beta, step))
    return result


def tiny_stack(kind: NormKind, rng: Rng) -> LayerStack:
    """Smallest stack that holds kind at every norm position."""
    spec = NormSpec(kind, channels_per_group=2)
    if kind.requires_rank4():
        stack = build_cnn((1, 4, 4), 3, spec, rng)
    else:
        stack = build_mlp((4,), [5], 3, spec, rng)
    return set_norm_kinds(stack, [kind] * len(stack.norm_layers()))


def relu_margin(stack: LayerStack, x: Tensor) -> float:
    """Smallest |value| entering any ReLU during a train-mode forward of x."""
    margin = float("inf")
    for layer in stack.layers:
        if isinstance(layer, ReLU):
            margin = min(margin, float(np.min(np.abs(x.data))))
        x, _ = layer.forward(x, True)
    return margin


def inputs_clear_of_kinks(stack: LayerStack, rng: Rng, batch: int, step: float) -> Tensor:
    """Draws network inputs whose pre-ReLU values all sit well off zero."""
    for _ in range(_MAX_INPUT_DRAWS):
        x = Tensor(rng.normal((batch,) + stack.input_shape))
        if relu_margin(stack, x) >= KINK_MARGIN_STEPS * step:
            return x
    raise NormLabError(
        f"no input draw kept every pre-ReLU value {KINK_MARGIN_STEPS * step} away from 0")


def check_network(kind: NormKind, seed: int, tol: float = DEFAULT_NETWORK_TOL,
                  step: float = DEFAULT_STEP, stack: Optional[LayerStack] = None) -> CheckResult:
    """End-to-end check of every parameter gradient under cross-entropy."""
    rng = Rng(seed)
    stack = stack or tiny_stack(kind, rng.spawn(1))
    batch = 6
    x = inputs_clear_of_kinks(stack, rng, batch, step)
    labels = np.arange(batch) % stack.num_classes

    logits, cache = forward(stack, x, Mode.TRAIN)
    _, grad_logits = cross_entropy(logits, labels)
    analytic = backward(stack, grad_logits, cache)

    result = CheckResult(f"network {'/'.join(str(k) for k in stack.norm_kinds())}", tol)
    for key, value in stack.parameters().items():
        def loss(v: np.ndarray, key=key) -> float:
            original = stack.parameters()[key]
            stack.set_parameters({key: Tensor(v)})
            out, _ = forward(stack, x, Mode.TRAIN)
            stack.set_parameters({key: original})
            return cross_entropy(out, labels)[0]

        result.errors[key] = relative_error(analytic[key].data,
                                            numerical_gradient(loss, value.data, step),
                                            NETWORK_ERROR_FLOOR)
    return result
