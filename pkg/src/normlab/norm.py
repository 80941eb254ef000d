# SPDX-FileCopyrightText: 2022 Barndollar Music, Ltd.
#
# SPDX-License-Identifier: Apache-2.0

"""Normalization layers: L2, BN, LN, IN, PN, GN and the composites.

Every layer works on a Tensor of shape [b, d] or [b, C, H, W]. Channel-wise
parameters and statistics live on axis 1. Composites (L2BN, LNBN, INBN, PNBN)
apply a per-sample normalizer without any affine of its own, then BN.
"""

import enum
import math
from typing import Optional

import numpy as np

from .errors import NormLabError
from .tensor import Tensor


@enum.unique
class NormKind(str, enum.Enum):
    L2 = "l2"
    BN = "bn"
    LN = "ln"
    IN = "in"
    PN = "pn"
    GN = "gn"
    L2BN = "l2bn"
    LNBN = "lnbn"
    INBN = "inbn"
    PNBN = "pnbn"

    def is_composite(self) -> bool:
        return self in _COMPOSITE_INNER

    def inner(self) -> "NormKind":
        """The per-sample stage of a composite kind."""
        return _COMPOSITE_INNER[self]

    def tracks_running_stats(self) -> bool:
        return self == NormKind.BN or self.is_composite()

    def requires_rank4(self) -> bool:
        kind = self.inner() if self.is_composite() else self
        return kind in (NormKind.IN, NormKind.PN, NormKind.GN)

    def __str__(self) -> str:
        return self.value


_COMPOSITE_INNER: dict[NormKind, NormKind] = {
    NormKind.L2BN: NormKind.L2,
    NormKind.LNBN: NormKind.LN,
    NormKind.INBN: NormKind.IN,
    NormKind.PNBN: NormKind.PN,
}


def parse_norm_kind(s: str) -> NormKind:
    try:
        return NormKind(s.strip().lower())
    except ValueError:
        choices = ", ".join(k.value for k in NormKind)
        raise NormLabError(f"unknown normalization kind '{s}' (choose from {choices})")


@enum.unique
class Mode(enum.Enum):
    TRAIN = 1
    EVAL = 2


# Defaults; the l2 floor and variance eps are not given by the method itself.
DEFAULT_EPS_L2 = 1e-12
DEFAULT_EPS_VAR = 1e-5
DEFAULT_MOMENTUM = 0.1


class NormSpec:
    """Configuration of one normalization layer."""
    kind: NormKind
    eps_l2: float
    eps_var: float
    momentum: float
    affine: bool

    # None means: true for rank-4 inputs, false for rank-2 inputs.
    scale_by_sqrt_numel: Optional[bool]

    # Only used by GN.
    channels_per_group: int

    def __init__(self, kind: NormKind, eps_l2: float = DEFAULT_EPS_L2,
                 eps_var: float = DEFAULT_EPS_VAR, momentum: float = DEFAULT_MOMENTUM,
                 affine: bool = True, scale_by_sqrt_numel: Optional[bool] = None,
                 channels_per_group: int = 2):
        if not eps_l2 > 0:
            raise NormLabError(f"eps_l2 must be > 0, got {eps_l2}")
        if not eps_var > 0:
            raise NormLabError(f"eps_var must be > 0, got {eps_var}")
        if not 0 < momentum <= 1:
            raise NormLabError(f"momentum must be in (0, 1], got {momentum}")
        if channels_per_group < 1:
            raise NormLabError(f"channels_per_group must be >= 1, got {channels_per_group}")

        self.kind = NormKind(kind)
        self.eps_l2 = float(eps_l2)
        self.eps_var = float(eps_var)
        self.momentum = float(momentum)
        self.affine = bool(affine)
        self.scale_by_sqrt_numel = scale_by_sqrt_numel
        self.channels_per_group = int(channels_per_group)

    def with_kind(self, kind: NormKind) -> "NormSpec":
        return NormSpec(kind, self.eps_l2, self.eps_var, self.momentum, self.affine,
                        self.scale_by_sqrt_numel, self.channels_per_group)

    def uses_sqrt_numel(self, rank: int) -> bool:
        if self.scale_by_sqrt_numel is None:
            return rank == 4
        return self.scale_by_sqrt_numel

    def describe(self) -> dict:
        return {
            "kind": self.kind.value,
            "eps_l2": self.eps_l2,
            "eps_var": self.eps_var,
            "momentum": self.momentum,
            "affine": self.affine,
            "scale_by_sqrt_numel": self.scale_by_sqrt_numel,
            "channels_per_group": self.channels_per_group,
        }

    @staticmethod
    def from_description(desc: dict) -> "NormSpec":
        return NormSpec(parse_norm_kind(desc["kind"]), desc["eps_l2"], desc["eps_var"],
                        desc["momentum"], desc["affine"], desc["scale_by_sqrt_numel"],
                        desc["channels_per_group"])

    def __eq__(self, other) -> bool:
        return isinstance(other, NormSpec) and self.describe() == other.describe()


class NormState:
    """Learnable affine parameters and running statistics of one layer."""
    num_features: int
    gamma: Optional[Tensor]
    beta: Optional[Tensor]
    running_mean: Optional[Tensor]
    running_var: Optional[Tensor]
    num_batches_tracked: int
    mode: Mode

    def __init__(self, spec: NormSpec, num_features: int):
        if num_features < 1:
            raise NormLabError(f"num_features must be >= 1, got {num_features}")
        self.num_features = num_features
        self.gamma = Tensor(np.ones(num_features)) if spec.affine else None
        self.beta = Tensor(np.zeros(num_features)) if spec.affine else None
        if spec.kind.tracks_running_stats():
            self.running_mean = Tensor(np.zeros(num_features))
            self.running_var = Tensor(np.ones(num_features))
        else:
            self.running_mean = None
            self.running_var = None
        self.num_batches_tracked = 0
        self.mode = Mode.TRAIN


class BackwardCache:
    """Intermediates saved by a train-mode forward for exactly one backward."""
    kind: NormKind
    input: np.ndarray

    # Pre-affine output of the normalization.
    normalized: np.ndarray

    # L2: raw per-sample norms and the sqrt(numel) factor (1 if unused).
    norms: Optional[np.ndarray]
    scale: float
    eps_l2: float

    # Standardizing layers: reduction axes, statistics, optional group view.
    axes: tuple[int, ...]
    mean: Optional[np.ndarray]
    inv_std: Optional[np.ndarray]
    group_shape: Optional[tuple[int, ...]]

    # Composites: the per-sample stage and the BN stage.
    inner: Optional["BackwardCache"]
    outer: Optional["BackwardCache"]

    consumed: bool

    def __init__(self, kind: NormKind, x: np.ndarray):
        self.kind = kind
        self.input = x
        self.normalized = None
        self.norms = None
        self.scale = 1.0
        self.eps_l2 = DEFAULT_EPS_L2
        self.axes = ()
        self.mean = None
        self.inv_std = None
        self.group_shape = None
        self.inner = None
        self.outer = None
        self.consumed = False

    def consume(self, kind: NormKind):
        if self.consumed:
            raise NormLabError(f"{kind} backward: cache was already consumed")
        if self.kind != kind:
            raise NormLabError(f"{kind} backward: cache belongs to a {self.kind} forward")
        self.consumed = True


def _check_input(x: Tensor, kind: NormKind, state: Optional[NormState] = None):
    if x.ndim not in (2, 4):
        raise NormLabError(f"{kind}: expected rank 2 or 4 input, got shape {list(x.shape)}")
    if x.ndim == 2 and kind.requires_rank4():
        raise NormLabError(f"{kind}: requires a rank-4 input, got shape {list(x.shape)}")
    if state is not None and x.shape[1] != state.num_features:
        raise NormLabError(
            f"{kind}: input shape {list(x.shape)} does not match {state.num_features} features")


def _channel_view(rank: int) -> tuple[int, ...]:
    """Shape that broadcasts a per-channel vector against a rank-N input."""
    return (1, -1) if rank == 2 else (1, -1, 1, 1)


def _non_channel_axes(rank: int) -> tuple[int, ...]:
    return (0,) if rank == 2 else (0, 2, 3)


def standardize(x: np.ndarray, axes: tuple[int, ...], eps: float):
    """Centers and scales x over axes: (x - mean) / sqrt(var + eps).

    Returns (x_hat, mean, inv_std, var) with statistics kept as broadcastable
    arrays. Groups whose var + eps is exactly 0 map to 0.
    """
    mean = np.mean(x, axis=axes, keepdims=True)
    var = np.mean((x - mean) ** 2, axis=axes, keepdims=True)
    denom = np.sqrt(var + eps)
    inv_std = np.divide(1.0, denom, out=np.zeros_like(denom), where=denom > 0)
    return (x - mean) * inv_std, mean, inv_std, var


def standardize_backward(g_hat: np.ndarray, x_hat: np.ndarray, inv_std: np.ndarray,
                         axes: tuple[int, ...]) -> np.ndarray:
    """Exact gradient of standardize() with respect to its input."""
    g_mean = np.mean(g_hat, axis=axes, keepdims=True)
    gx_mean = np.mean(g_hat * x_hat, axis=axes, keepdims=True)
    return inv_std * (g_hat - g_mean - x_hat * gx_mean)


def _apply_affine(x_hat: np.ndarray, state: Optional[NormState]) -> np.ndarray:
    if state is None or state.gamma is None:
        return x_hat
    view = _channel_view(x_hat.ndim)
    return state.gamma.data.reshape(view) * x_hat + state.beta.data.reshape(view)


def _affine_backward(grad_out: np.ndarray, x_hat: np.ndarray, state: Optional[NormState]):
    """Returns (grad_x_hat, grad_gamma, grad_beta)."""
    if state is None or state.gamma is None:
        return grad_out, None, None
    axes = _non_channel_axes(grad_out.ndim)
    grad_gamma = np.sum(grad_out * x_hat, axis=axes)
    grad_beta = np.sum(grad_out, axis=axes)
    return grad_out * state.gamma.data.reshape(_channel_view(grad_out.ndim)), grad_gamma, grad_beta


def _as_tensor(arr: Optional[np.ndarray]) -> Optional[Tensor]:
    return None if arr is None else Tensor(arr)


# --- L2 ---------------------------------------------------------------------


def l2_forward(x: Tensor, spec: NormSpec):
    """Divides each sample (its whole flattened feature map) by max(||x||, eps).

    With the sqrt(numel) variant the result is also multiplied by
    sqrt(C * H * W) (or sqrt(d)).
    """
    _check_input(x, NormKind.L2)
    b = x.shape[0]
    flat = x.data.reshape(b, -1)
    norms = np.sqrt(np.sum(flat * flat, axis=1))
    scale = math.sqrt(flat.shape[1]) if spec.uses_sqrt_numel(x.ndim) else 1.0

    y = scale * flat / np.maximum(norms, spec.eps_l2)[:, None]

    cache = BackwardCache(NormKind.L2, x.data)
    cache.norms = norms
    cache.scale = scale
    cache.eps_l2 = spec.eps_l2
    cache.normalized = y.reshape(x.shape)
    return Tensor(cache.normalized), cache


def l2_backward(grad_out: Tensor, cache: BackwardCache) -> Tensor:
    cache.consume(NormKind.L2)
    b = grad_out.shape[0]
    g = grad_out.data.reshape(b, -1)
    x = cache.input.reshape(b, -1)
    norms = cache.norms[:, None]

    # Above the floor: project out the radial part. Below it the map is x / eps.
    above = norms > cache.eps_l2
    safe = np.where(above, norms, 1.0)
    u = x / safe
    tangential = (g - np.sum(g * u, axis=1, keepdims=True) * u) / safe
    grad_in = cache.scale * np.where(above, tangential, g / cache.eps_l2)
    return Tensor(grad_in.reshape(grad_out.shape))


# --- BN ---------------------------------------------------------------------


def bn_forward(x: Tensor, spec: NormSpec, state: NormState):
    """Batch normalization over axis 0 (and H, W for rank-4 inputs)."""
    _check_input(x, NormKind.BN, state)
    axes = _non_channel_axes(x.ndim)
    view = _channel_view(x.ndim)

    if state.mode == Mode.EVAL:
        if state.num_batches_tracked == 0:
            raise NormLabError("bn: eval-mode forward before any train-mode batch")
        mean = state.running_mean.data.reshape(view)
        inv_std = 1.0 / np.sqrt(state.running_var.data.reshape(view) + spec.eps_var)
        return Tensor(_apply_affine((x.data - mean) * inv_std, state)), None

    if x.shape[0] < 2:
        raise NormLabError(f"bn: train-mode batch needs >= 2 samples, got shape {list(x.shape)}")

    x_hat, mean, inv_std, var = standardize(x.data, axes, spec.eps_var)

    m = spec.momentum
    state.running_mean = Tensor((1 - m) * state.running_mean.data + m * mean.reshape(-1))
    state.running_var = Tensor((1 - m) * state.running_var.data + m * var.reshape(-1))
    state.num_batches_tracked += 1

    cache = BackwardCache(NormKind.BN, x.data)
    cache.axes = axes
    cache.normalized = x_hat
    cache.mean = mean
    cache.inv_std = inv_std
    return Tensor(_apply_affine(x_hat, state)), cache


def bn_backward(grad_out: Tensor, cache: BackwardCache, state: NormState):
    """Returns (grad_in, grad_gamma, grad_beta); gamma/beta grads are None without affine."""
    cache.consume(NormKind.BN)
    g_hat, grad_gamma, grad_beta = _affine_backward(grad_out.data, cache.normalized, state)
    grad_in = standardize_backward(g_hat, cache.normalized, cache.inv_std, cache.axes)
    return Tensor(grad_in), _as_tensor(grad_gamma), _as_tensor(grad_beta)


# --- Per-sample standardizers (LN, IN, PN, GN) ------------------------------


def _per_sample_forward(x: Tensor, spec: NormSpec, state: Optional[NormState],
                        kind: NormKind, axes: tuple[int, ...],
                        group_shape: Optional[tuple[int, ...]] = None):
    data = x.data if group_shape is None else x.data.reshape(group_shape)
    x_hat, mean, inv_std, _ = standardize(data, axes, spec.eps_var)
    x_hat = x_hat.reshape(x.shape)
    y = _apply_affine(x_hat, state)

    if state is not None and state.mode == Mode.EVAL:
        return Tensor(y), None

    cache = BackwardCache(kind, x.data)
    cache.axes = axes
    cache.normalized = x_hat
    cache.mean = mean
    cache.inv_std = inv_std
    cache.group_shape = group_shape
    return Tensor(y), cache


def ln_forward(x: Tensor, spec: NormSpec, state: Optional[NormState] = None):
    """Per-sample standardization over all features (and positions)."""
    _check_input(x, NormKind.LN, state)
    axes = (1,) if x.ndim == 2 else (1, 2, 3)
    return _per_sample_forward(x, spec, state, NormKind.LN, axes)


def in_forward(x: Tensor, spec: NormSpec, state: Optional[NormState] = None):
    """Per-sample, per-channel standardization over H and W."""
    _check_input(x, NormKind.IN, state)
    return _per_sample_forward(x, spec, state, NormKind.IN, (2, 3))


def pn_forward(x: Tensor, spec: NormSpec, state: Optional[NormState] = None):
    """Per-sample, per-position standardization across channels."""
    _check_input(x, NormKind.PN, state)
    return _per_sample_forward(x, spec, state, NormKind.PN, (1,))


def gn_forward(x: Tensor, spec: NormSpec, state: Optional[NormState] = None):
    """Per-sample standardization over groups of channels_per_group channels."""
    _check_input(x, NormKind.GN, state)
    b, c, h, w = x.shape
    if c % spec.channels_per_group != 0:
        raise NormLabError(
            f"gn: {c} channels not divisible by channels_per_group={spec.channels_per_group}")
    group_shape = (b, c // spec.channels_per_group, spec.channels_per_group, h, w)
    return _per_sample_forward(x, spec, state, NormKind.GN, (2, 3, 4), group_shape)


def per_sample_backward(grad_out: Tensor, cache: BackwardCache, state: Optional[NormState] = None):
    """Backward for LN, IN, PN and GN. Returns (grad_in, grad_gamma, grad_beta)."""
    cache.consume(cache.kind)
    g_hat, grad_gamma, grad_beta = _affine_backward(grad_out.data, cache.normalized, state)
    x_hat = cache.normalized
    if cache.group_shape is not None:
        g_hat = g_hat.reshape(cache.group_shape)
        x_hat = x_hat.reshape(cache.group_shape)
    grad_in = standardize_backward(g_hat, x_hat, cache.inv_std, cache.axes)
    return Tensor(grad_in.reshape(grad_out.shape)), _as_tensor(grad_gamma), _as_tensor(grad_beta)


_PER_SAMPLE_FORWARD = {
    NormKind.LN: ln_forward,
    NormKind.IN: in_forward,
    NormKind.PN: pn_forward,
    NormKind.GN: gn_forward,
}


# --- Composites -------------------------------------------------------------


def _inner_forward(x: Tensor, spec: NormSpec, kind: NormKind):
    if kind == NormKind.L2:
        return l2_forward(x, spec)
    return _PER_SAMPLE_FORWARD[kind](x, spec, None)


def composite_forward(x: Tensor, spec: NormSpec, state: NormState):
    """Per-sample normalizer (no affine) followed by BN (with the only affine).

    Running statistics are those of the inner-normalized activations.
    """
    kind = spec.kind
    if not kind.is_composite():
        raise NormLabError(f"composite_forward: {kind} is not a composite kind")
    _check_input(x, kind, state)

    inner_y, inner_cache = _inner_forward(x, spec, kind.inner())
    y, bn_cache = bn_forward(inner_y, spec, state)
    if bn_cache is None:
        return y, None

    cache = BackwardCache(kind, x.data)
    cache.normalized = inner_y.data
    cache.inner = inner_cache
    cache.outer = bn_cache
    return y, cache


def composite_backward(grad_out: Tensor, cache: BackwardCache, state: NormState):
    cache.consume(cache.kind)
    grad_inner, grad_gamma, grad_beta = bn_backward(grad_out, cache.outer, state)
    if cache.inner.kind == NormKind.L2:
        grad_in = l2_backward(grad_inner, cache.inner)
    else:
        grad_in, _, _ = per_sample_backward(grad_inner, cache.inner)
    return grad_in, grad_gamma, grad_beta


# --- Dispatch ---------------------------------------------------------------


def norm_forward(x: Tensor, spec: NormSpec, state: NormState):
    """Runs the layer described by spec. Returns (y, cache); cache is None in eval mode."""
    kind = spec.kind
    if kind.is_composite():
        return composite_forward(x, spec, state)
    if kind == NormKind.BN:
        return bn_forward(x, spec, state)
    if kind == NormKind.L2:
        _check_input(x, kind, state)
        y, cache = l2_forward(x, spec)
        out = Tensor(_apply_affine(y.data, state))
        return out, (None if state.mode == Mode.EVAL else cache)
    return _PER_SAMPLE_FORWARD[kind](x, spec, state)


def norm_backward(grad_out: Tensor, cache: BackwardCache, state: NormState):
    """Returns (grad_in, grad_gamma, grad_beta) for any kind."""
    if cache is None:
        raise NormLabError("backward needs the cache of a train-mode forward")
    kind = cache.kind
    if kind.is_composite():
        return composite_backward(grad_out, cache, state)
    if kind == NormKind.BN:
        return bn_backward(grad_out, cache, state)
    if kind == NormKind.L2:
        g_hat, grad_gamma, grad_beta = _affine_backward(grad_out.data, cache.normalized, state)
        return l2_backward(Tensor(g_hat), cache), _as_tensor(grad_gamma), _as_tensor(grad_beta)
    return per_sample_backward(grad_out, cache, state)
