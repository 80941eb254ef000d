# SPDX-FileCopyrightText: 2022 Barndollar Music, Ltd.
#
# SPDX-License-Identifier: Apache-2.0

"""Desk-scale classifiers with pluggable normalization, SGD and training."""

import enum
import math
import time
from typing import Optional

import numpy as np

from .data import Context, Dataset, EpochRecord, NormPolicy, TrainConfig
from .errors import NormLabError
from .metrics import LabeledFeatures, angle_report
from .norm import Mode, NormKind, NormSpec, NormState, norm_backward, norm_forward, parse_norm_kind
from .tensor import Rng, Tensor, slice_rows, take_rows

# Rows per eval-mode forward when scoring a whole split.
_EVAL_CHUNK = 500


@enum.unique
class Placement(str, enum.Enum):
    NONE = "none"
    CLASSIFIER_ONLY = "classifier_only"
    EARLY_STAGES = "early_stages"
    LATE_STAGES = "late_stages"
    ALL = "all"

    def selected_positions(self, num_positions: int) -> set[int]:
        """Norm positions (0-based, input side first) that get the composite."""
        k = num_positions
        if self == Placement.NONE:
            return set()
        if self == Placement.CLASSIFIER_ONLY:
            return {k - 1}
        if self == Placement.EARLY_STAGES:
            return set(range(k // 2))
        if self == Placement.LATE_STAGES:
            return set(range(k // 2, k))
        return set(range(k))


def parse_placement(s: str) -> Placement:
    try:
        return Placement(s.strip().lower())
    except ValueError:
        choices = ", ".join(p.value for p in Placement)
        raise NormLabError(f"unknown placement '{s}' (choose from {choices})")


# --- Layers -----------------------------------------------------------------


class Layer:
    """Base layer: forward caches what backward needs, backward returns param grads."""

    def forward(self, x: Tensor, train: bool):
        raise NotImplementedError

    def backward(self, grad_out: Tensor, cache) -> tuple[Tensor, dict[str, Tensor]]:
        raise NotImplementedError

    def params(self) -> dict[str, Tensor]:
        return {}

    def set_param(self, name: str, value: Tensor):
        raise NormLabError(f"{type(self).__name__} has no parameter '{name}'")

    def describe(self) -> dict:
        raise NotImplementedError


def _he_normal(rng: Rng, shape: tuple[int, ...], fan_in: int) -> Tensor:
    return Tensor(rng.normal(shape, 0.0, math.sqrt(2.0 / fan_in)))


class Linear(Layer):
    """y = x W + b, with W of shape [in, out]."""
    in_features: int
    out_features: int
    is_classifier: bool
    weight: Tensor
    bias: Tensor

    def __init__(self, in_features: int, out_features: int, rng: Rng, is_classifier: bool = False):
        self.in_features = in_features
        self.out_features = out_features
        self.is_classifier = is_classifier
        self.weight = _he_normal(rng, (in_features, out_features), in_features)
        self.bias = Tensor(np.zeros(out_features))

    def forward(self, x: Tensor, train: bool):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise NormLabError(
                f"linear expects [b, {self.in_features}], got {list(x.shape)}")
        return Tensor(x.data @ self.weight.data + self.bias.data), x.data

    def backward(self, grad_out: Tensor, cache):
        g = grad_out.data
        grads = {"weight": Tensor(cache.T @ g), "bias": Tensor(np.sum(g, axis=0))}
        return Tensor(g @ self.weight.data.T), grads

    def params(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}

    def set_param(self, name: str, value: Tensor):
        if name not in ("weight", "bias") or value.shape != getattr(self, name).shape:
            super().set_param(name, value)
        setattr(self, name, value)

    def describe(self) -> dict:
        kind = "classifier_linear" if self.is_classifier else "linear"
        return {"type": kind, "in": self.in_features, "out": self.out_features}


class Conv3x3(Layer):
    """3x3 convolution, zero padding 1, weight [out_ch, in_ch, 3, 3]."""
    in_channels: int
    out_channels: int
    stride: int
    weight: Tensor
    bias: Tensor

    def __init__(self, in_channels: int, out_channels: int, stride: int, rng: Rng):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.stride = stride
        self.weight = _he_normal(rng, (out_channels, in_channels, 3, 3), in_channels * 9)
        self.bias = Tensor(np.zeros(out_channels))

    def _windows(self, h: int, w: int):
        s = self.stride
        ho, wo = (h - 1) // s + 1, (w - 1) // s + 1
        for ki in range(3):
            for kj in range(3):
                yield ki, kj, (slice(ki, ki + s * (ho - 1) + 1, s),
                               slice(kj, kj + s * (wo - 1) + 1, s))

    def forward(self, x: Tensor, train: bool):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise NormLabError(
                f"conv3x3 expects [b, {self.in_channels}, H, W], got {list(x.shape)}")
        b, _, h, w = x.shape
        s = self.stride
        padded = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
        out = np.zeros((b, self.out_channels, (h - 1) // s + 1, (w - 1) // s + 1))
        for ki, kj, (rows, cols) in self._windows(h, w):
            out += np.einsum("bchw,oc->bohw", padded[:, :, rows, cols], self.weight.data[:, :, ki, kj])
        out += self.bias.data.reshape(1, -1, 1, 1)
        return Tensor(out), padded

    def backward(self, grad_out: Tensor, cache):
        g = grad_out.data
        padded = cache
        h, w = padded.shape[2] - 2, padded.shape[3] - 2
        grad_weight = np.zeros(self.weight.shape)
        grad_padded = np.zeros(padded.shape)
        for ki, kj, (rows, cols) in self._windows(h, w):
            grad_weight[:, :, ki, kj] = np.einsum("bohw,bchw->oc", g, padded[:, :, rows, cols])
            grad_padded[:, :, rows, cols] += np.einsum("bohw,oc->bchw", g, self.weight.data[:, :, ki, kj])
        grads = {"weight": Tensor(grad_weight), "bias": Tensor(np.sum(g, axis=(0, 2, 3)))}
        return Tensor(grad_padded[:, :, 1:-1, 1:-1]), grads

    def params(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}

    def set_param(self, name: str, value: Tensor):
        if name not in ("weight", "bias") or value.shape != getattr(self, name).shape:
            super().set_param(name, value)
        setattr(self, name, value)

    def describe(self) -> dict:
        return {"type": "conv3x3", "in": self.in_channels, "out": self.out_channels,
                "stride": self.stride}


class ReLU(Layer):
    def forward(self, x: Tensor, train: bool):
        mask = x.data > 0
        return Tensor(x.data * mask), mask

    def backward(self, grad_out: Tensor, cache):
        return Tensor(grad_out.data * cache), {}

    def describe(self) -> dict:
        return {"type": "relu"}


class GlobalAvgPool(Layer):
    """[b, C, H, W] -> [b, C]."""

    def forward(self, x: Tensor, train: bool):
        if x.ndim != 4:
            raise NormLabError(f"global_avg_pool expects rank 4, got {list(x.shape)}")
        return Tensor(np.mean(x.data, axis=(2, 3))), x.shape

    def backward(self, grad_out: Tensor, cache):
        _, _, h, w = cache
        grad = np.broadcast_to(grad_out.data[:, :, None, None] / (h * w), cache)
        return Tensor(grad), {}

    def describe(self) -> dict:
        return {"type": "global_avg_pool"}


class Flatten(Layer):
    def forward(self, x: Tensor, train: bool):
        return Tensor(x.data.reshape(x.shape[0], -1)), x.shape

    def backward(self, grad_out: Tensor, cache):
        return Tensor(grad_out.data.reshape(cache)), {}

    def describe(self) -> dict:
        return {"type": "flatten"}


class Norm(Layer):
    """A normalization position; its kind is what placement policies rewrite."""
    spec: NormSpec
    state: NormState

    def __init__(self, spec: NormSpec, num_features: int):
        self.spec = spec
        self.state = NormState(spec, num_features)

    def forward(self, x: Tensor, train: bool):
        self.state.mode = Mode.TRAIN if train else Mode.EVAL
        return norm_forward(x, self.spec, self.state)

    def backward(self, grad_out: Tensor, cache):
        grad_in, grad_gamma, grad_beta = norm_backward(grad_out, cache, self.state)
        grads = {}
        if grad_gamma is not None:
            grads = {"gamma": grad_gamma, "beta": grad_beta}
        return grad_in, grads

    def params(self) -> dict[str, Tensor]:
        if self.state.gamma is None:
            return {}
        return {"gamma": self.state.gamma, "beta": self.state.beta}

    def set_param(self, name: str, value: Tensor):
        if name not in self.params() or value.shape != (self.state.num_features,):
            super().set_param(name, value)
        setattr(self.state, name, value)

    def set_kind(self, kind: NormKind):
        """Switches kind, keeping gamma/beta and resetting running statistics."""
        gamma, beta = self.state.gamma, self.state.beta
        self.spec = self.spec.with_kind(kind)
        self.state = NormState(self.spec, self.state.num_features)
        if gamma is not None:
            self.state.gamma, self.state.beta = gamma, beta

    def describe(self) -> dict:
        return {"type": "norm", "num_features": self.state.num_features, "spec": self.spec.describe()}


# --- Stack ------------------------------------------------------------------


class LayerStack:
    """Ordered layers ending in exactly one classifier linear layer."""
    arch: str
    input_shape: tuple[int, ...]  # Per-sample shape.
    layers: list[Layer]
    placement: Optional[Placement]

    def __init__(self, arch: str, input_shape: tuple[int, ...], layers: list[Layer],
                 placement: Optional[Placement] = None):
        classifiers = [i for i, layer in enumerate(layers)
                       if isinstance(layer, Linear) and layer.is_classifier]
        if classifiers != [len(layers) - 1]:
            raise NormLabError("a stack needs exactly one classifier layer, in last position")
        self.arch = arch
        self.input_shape = tuple(input_shape)
        self.layers = layers
        self.placement = placement

    @property
    def num_classes(self) -> int:
        return self.layers[-1].out_features

    def norm_layers(self) -> list[Norm]:
        return [layer for layer in self.layers if isinstance(layer, Norm)]

    def norm_kinds(self) -> list[NormKind]:
        return [layer.spec.kind for layer in self.norm_layers()]

    def parameters(self) -> dict[str, Tensor]:
        """All learnable tensors, keyed "<layer index>.<name>"."""
        result = {}
        for i, layer in enumerate(self.layers):
            for name, value in layer.params().items():
                result[f"{i}.{name}"] = value
        return result

    def set_parameters(self, values: dict[str, Tensor]):
        for key, value in values.items():
            i, name = key.split(".", 1)
            self.layers[int(i)].set_param(name, value)

    def describe(self) -> dict:
        """Architecture descriptor (no tensor values)."""
        return {
            "arch": self.arch,
            "input_shape": list(self.input_shape),
            "layers": [layer.describe() for layer in self.layers],
        }

    def state_arrays(self) -> list[tuple[str, np.ndarray]]:
        """Every tensor a checkpoint stores, in declaration order."""
        result = []
        for i, layer in enumerate(self.layers):
            for name, value in layer.params().items():
                result.append((f"{i}.{name}", value.data))
            if isinstance(layer, Norm) and layer.state.running_mean is not None:
                result.append((f"{i}.running_mean", layer.state.running_mean.data))
                result.append((f"{i}.running_var", layer.state.running_var.data))
                result.append((f"{i}.num_batches_tracked",
                               np.array([float(layer.state.num_batches_tracked)])))
        return result

    def load_state_arrays(self, arrays: dict[str, np.ndarray]):
        for key, _ in self.state_arrays():
            if key not in arrays:
                raise NormLabError(f"checkpoint is missing tensor '{key}'")
            i, name = key.split(".", 1)
            layer = self.layers[int(i)]
            value = arrays[key]
            if name == "num_batches_tracked":
                layer.state.num_batches_tracked = int(value[0])
            elif name in ("running_mean", "running_var"):
                setattr(layer.state, name, Tensor(value))
            else:
                layer.set_param(name, Tensor(value))


class StackCache:
    """Per-layer caches of one forward, plus the classifier-input features."""
    layer_caches: Optional[list]
    features: Tensor

    def __init__(self, layer_caches: Optional[list], features: Tensor):
        self.layer_caches = layer_caches
        self.features = features


def forward(stack: LayerStack, x: Tensor, mode: Mode):
    """Returns (logits [b, num_classes], StackCache)."""
    if tuple(x.shape[1:]) != stack.input_shape:
        raise NormLabError(
            f"input shape {list(x.shape)} does not match stack input {list(stack.input_shape)}")
    train = mode == Mode.TRAIN
    caches = [] if train else None
    features = x
    for k, layer in enumerate(stack.layers):
        if k == len(stack.layers) - 1:
            features = x
        try:
            x, cache = layer.forward(x, train)
        except NormLabError as e:
            raise NormLabError(f"layer {k} ({layer.describe()['type']}): {e}") from e
        if train:
            caches.append(cache)
    return x, StackCache(caches, features)


def backward(stack: LayerStack, grad_logits: Tensor, cache: StackCache) -> dict[str, Tensor]:
    """Chain rule through every layer; returns grads keyed like stack.parameters()."""
    if cache.layer_caches is None:
        raise NormLabError("backward needs a train-mode forward")
    grads = {}
    g = grad_logits
    for k in reversed(range(len(stack.layers))):
        g, layer_grads = stack.layers[k].backward(g, cache.layer_caches[k])
        for name, value in layer_grads.items():
            grads[f"{k}.{name}"] = value
    return grads


def cross_entropy(logits: Tensor, labels) -> tuple[float, Tensor]:
    """Mean negative log-softmax likelihood and its gradient w.r.t. logits."""
    labels = np.asarray(labels, dtype=np.int64)
    b, c = logits.shape
    if len(labels) != b or labels.min() < 0 or labels.max() >= c:
        raise NormLabError(f"labels must be {b} values in [0, {c})")
    shifted = logits.data - np.max(logits.data, axis=1, keepdims=True)
    log_norm = np.log(np.sum(np.exp(shifted), axis=1))
    rows = np.arange(b)
    loss = float(np.mean(log_norm - shifted[rows, labels]))

    probs = np.exp(shifted - log_norm[:, None])
    probs[rows, labels] -= 1.0
    return loss, Tensor(probs / b)


def sgd_step(params: dict[str, Tensor], grads: dict[str, Tensor], velocities: dict[str, np.ndarray],
             lr: float, momentum: float, weight_decay: float):
    """v <- momentum * v + grad + wd * param; param <- param - lr * v.

    Returns (new params, new velocities); inputs are not modified.
    """
    new_params, new_velocities = {}, {}
    for key, param in params.items():
        if key not in grads:
            raise NormLabError(f"no gradient for parameter '{key}'")
        v = velocities.get(key, np.zeros(param.shape))
        v = momentum * v + grads[key].data + weight_decay * param.data
        new_velocities[key] = v
        new_params[key] = Tensor(param.data - lr * v)
    return new_params, new_velocities


class Sgd:
    """SGD with momentum and weight decay over a stack's parameters."""
    lr: float
    momentum: float
    weight_decay: float
    velocities: dict[str, np.ndarray]

    def __init__(self, lr: float, momentum: float, weight_decay: float):
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocities = {}

    def step(self, stack: LayerStack, grads: dict[str, Tensor]):
        params, self.velocities = sgd_step(stack.parameters(), grads, self.velocities,
                                           self.lr, self.momentum, self.weight_decay)
        stack.set_parameters(params)


# --- Builders ---------------------------------------------------------------


def base_norm_spec(policy: NormPolicy) -> NormSpec:
    return NormSpec(parse_norm_kind(policy.base), policy.eps_l2, policy.eps_var,
                    policy.momentum, policy.affine, policy.scale_by_sqrt_numel,
                    policy.channels_per_group)


def build_mlp(input_shape: tuple[int, ...], hidden: list[int], num_classes: int,
              spec: NormSpec, rng: Rng) -> LayerStack:
    """[flatten] -> (linear -> norm -> relu) per hidden width -> classifier."""
    layers: list[Layer] = []
    if len(input_shape) > 1:
        layers.append(Flatten())
    width = math.prod(input_shape)
    for h in hidden:
        layers += [Linear(width, h, rng), Norm(spec, h), ReLU()]
        width = h
    layers.append(Linear(width, num_classes, rng, is_classifier=True))
    return LayerStack("mlp", input_shape, layers)


def build_cnn(input_shape: tuple[int, ...], num_classes: int, spec: NormSpec, rng: Rng) -> LayerStack:
    """conv3x3(C->8)-norm-relu-conv3x3(8->16, stride 2)-norm-relu-GAP-classifier."""
    if len(input_shape) != 3:
        raise NormLabError(f"cnn needs [C, H, W] inputs, got {list(input_shape)}")
    layers: list[Layer] = [
        Conv3x3(input_shape[0], 8, 1, rng), Norm(spec, 8), ReLU(),
        Conv3x3(8, 16, 2, rng), Norm(spec, 16), ReLU(),
        GlobalAvgPool(),
        Linear(16, num_classes, rng, is_classifier=True),
    ]
    return LayerStack("cnn", input_shape, layers)


def apply_placement(stack: LayerStack, placement: Placement,
                    composite: NormKind = NormKind.L2BN,
                    base: NormKind = NormKind.BN) -> LayerStack:
    """Sets each norm position to composite (if selected) or base."""
    norms = stack.norm_layers()
    selected = placement.selected_positions(len(norms))
    for position, layer in enumerate(norms):
        layer.set_kind(composite if position in selected else base)
    stack.placement = placement
    return stack


def set_norm_kinds(stack: LayerStack, kinds: list[NormKind]) -> LayerStack:
    norms = stack.norm_layers()
    if len(kinds) != len(norms):
        raise NormLabError(f"{len(kinds)} norm kinds given for {len(norms)} norm positions")
    for layer, kind in zip(norms, kinds):
        layer.set_kind(kind)
    stack.placement = None
    return stack


def stack_from_config(config: TrainConfig, input_shape: tuple[int, ...], num_classes: int,
                      rng: Rng) -> LayerStack:
    spec = base_norm_spec(config.norm)
    if config.arch == "cnn":
        stack = build_cnn(input_shape, num_classes, spec, rng)
    else:
        stack = build_mlp(input_shape, config.hidden, num_classes, spec, rng)

    if config.norm.kinds is not None:
        set_norm_kinds(stack, [parse_norm_kind(k) for k in config.norm.kinds])
    else:
        apply_placement(stack, parse_placement(config.norm.placement),
                        parse_norm_kind(config.norm.composite), spec.kind)

    if stack.arch == "mlp":
        for kind in stack.norm_kinds():
            if kind.requires_rank4():
                raise NormLabError(f"{kind} needs rank-4 activations; use arch: cnn")
    return stack


def stack_from_description(desc: dict) -> LayerStack:
    """Rebuilds a stack (with placeholder tensors) from describe() output."""
    rng = Rng(0)
    layers: list[Layer] = []
    for layer_desc in desc["layers"]:
        kind = layer_desc["type"]
        if kind in ("linear", "classifier_linear"):
            layers.append(Linear(layer_desc["in"], layer_desc["out"], rng,
                                 is_classifier=kind == "classifier_linear"))
        elif kind == "conv3x3":
            layers.append(Conv3x3(layer_desc["in"], layer_desc["out"], layer_desc["stride"], rng))
        elif kind == "norm":
            layers.append(Norm(NormSpec.from_description(layer_desc["spec"]),
                               layer_desc["num_features"]))
        elif kind == "relu":
            layers.append(ReLU())
        elif kind == "global_avg_pool":
            layers.append(GlobalAvgPool())
        elif kind == "flatten":
            layers.append(Flatten())
        else:
            raise NormLabError(f"unknown layer type '{kind}' in descriptor")
    return LayerStack(desc["arch"], tuple(desc["input_shape"]), layers)


# --- Training ---------------------------------------------------------------


def predict(stack: LayerStack, x: Tensor) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode logits and classifier-input features for a whole split."""
    logits, features = [], []
    for start in range(0, x.shape[0], _EVAL_CHUNK):
        chunk = slice_rows(x, start, min(start + _EVAL_CHUNK, x.shape[0]))
        out, cache = forward(stack, chunk, Mode.EVAL)
        logits.append(out.data)
        features.append(cache.features.data)
    return np.concatenate(logits), np.concatenate(features)


def _accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def _labeled(features: np.ndarray, labels: np.ndarray, num_classes: int,
             ctx: Context, split: str) -> LabeledFeatures:
    data, dropped = LabeledFeatures(Tensor(features), labels, num_classes).without_zero_rows()
    if dropped:
        ctx.maybe_print_verbose(f"  {split}: ignoring {dropped} zero-norm feature rows for angles")
    return data


def train(config: TrainConfig, dataset: Dataset, ctx: Optional[Context] = None):
    """Trains one stack. Returns (list of EpochRecord, trained LayerStack)."""
    config.validate()
    ctx = ctx or Context()
    rng = Rng(config.seed)
    stack = stack_from_config(config, tuple(dataset.x_train.shape[1:]), dataset.num_classes,
                              rng.spawn(1))
    shuffle_rng = rng.spawn(2)
    optimizer = Sgd(config.learning_rate, config.momentum_sgd, config.weight_decay)

    x_train, y_train = dataset.x_train, dataset.y_train
    n = x_train.shape[0]
    if n < 2:
        raise NormLabError("training needs at least 2 samples")
    # Angle metrics need a center for every class.
    empty = np.flatnonzero(np.bincount(y_train, minlength=dataset.num_classes) == 0)
    if len(empty) > 0:
        raise NormLabError(f"class {int(empty[0])} has no training samples")
    records = []

    for epoch in range(1, config.epochs + 1):
        started = time.perf_counter()
        order = shuffle_rng.permutation(n)
        loss_sum, correct, seen = 0.0, 0, 0

        for step, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            if len(idx) < 2:
                continue  # BN cannot train on a single sample.
            try:
                logits, cache = forward(stack, take_rows(x_train, idx), Mode.TRAIN)
                loss, grad_logits = cross_entropy(logits, y_train[idx])
                if not math.isfinite(loss):
                    raise NormLabError(f"loss is {loss}")
                optimizer.step(stack, backward(stack, grad_logits, cache))
            except NormLabError as e:
                raise NormLabError(f"training diverged at epoch {epoch} step {step}: {e}") from e

            loss_sum += loss * len(idx)
            correct += int(np.sum(np.argmax(logits.data, axis=1) == y_train[idx]))
            seen += len(idx)

        train_logits, train_features = predict(stack, x_train)
        train_split = _labeled(train_features, y_train, dataset.num_classes, ctx, "train")
        test_acc, test_split = None, None
        if dataset.has_test():
            test_logits, test_features = predict(stack, dataset.x_test)
            test_acc = _accuracy(test_logits, dataset.y_test)
            if config.test_angles:
                test_split = _labeled(test_features, dataset.y_test, dataset.num_classes, ctx, "test")

        record = EpochRecord(epoch, loss_sum / seen, correct / seen, test_acc,
                             angle_report(train_split, test_split),
                             (time.perf_counter() - started) * 1000.0)
        records.append(record)
        ctx.maybe_print_verbose(
            f"epoch {epoch}: loss={record.train_loss:.4f} train_acc={record.train_acc:.4f} "
            f"test_acc={'-' if test_acc is None else f'{test_acc:.4f}'} "
            f"iir_train={record.angle_report.iir_train:.4f}")

    return records, stack
