# SPDX-FileCopyrightText: 2022 Barndollar Music, Ltd.
#
# SPDX-License-Identifier: Apache-2.0

"""Iterated identity-mapping + normalization dynamics over class centers.

Every "layer" is an identity map followed by BN (gamma = 1, beta = 0) or by
L2BN, and the batch is the set of class centers itself. BN freezes the
configuration after one step; L2BN keeps spreading the centers until the
minimum pairwise angle saturates.
"""

import enum
import math
from typing import Optional

import numpy as np

from .errors import NormLabError
from .metrics import min_pairwise_angle
from .norm import NormKind, standardize
from .tensor import Tensor

# Consecutive small changes needed to declare convergence.
_CONVERGENCE_STREAK = 3


@enum.unique
class SamplePoint(enum.Enum):
    # Record each center set after the BN stage of a step.
    AFTER_BN = 1

    # Record each center set after the l2 stage of the next step (unit rows).
    AFTER_L2 = 2


class CenterConfig:
    """Initial centers and run settings for one simulation."""
    centers: Tensor
    norm_kind: NormKind
    max_iters: int
    convergence_tol: float  # Degrees.
    stop_on_convergence: bool
    sample_point: SamplePoint
    record_centers: bool
    eps_var: float
    eps_l2: float

    def __init__(self, centers: Tensor, norm_kind: NormKind, max_iters: int = 200,
                 convergence_tol: float = 1e-4, stop_on_convergence: bool = True,
                 sample_point: SamplePoint = SamplePoint.AFTER_BN,
                 record_centers: bool = False, eps_var: float = 0.0, eps_l2: float = 1e-12):
        if norm_kind not in (NormKind.BN, NormKind.L2BN):
            raise NormLabError(f"simulation supports bn and l2bn, got {norm_kind}")
        if centers.ndim != 2 or centers.shape[0] < 2 or centers.shape[1] < 2:
            raise NormLabError(
                f"centers must be [C, d] with C >= 2 and d >= 2, got {list(centers.shape)}")
        zero = np.flatnonzero(np.linalg.norm(centers.data, axis=1) == 0)
        if len(zero) > 0:
            raise NormLabError(f"initial center {int(zero[0])} is a zero vector")
        if max_iters < 1:
            raise NormLabError(f"max_iters must be >= 1, got {max_iters}")
        if eps_var < 0:
            raise NormLabError(f"eps_var must be >= 0, got {eps_var}")

        self.centers = centers
        self.norm_kind = norm_kind
        self.max_iters = max_iters
        self.convergence_tol = convergence_tol
        self.stop_on_convergence = stop_on_convergence
        self.sample_point = sample_point
        self.record_centers = record_centers
        self.eps_var = eps_var
        self.eps_l2 = eps_l2


class Trajectory:
    """Per-iteration minimum pairwise angle (and optionally the centers)."""
    initial_min_angle: float
    min_angle_per_iter: list[float]
    centers_per_iter: Optional[list[Tensor]]
    converged_at: Optional[int]
    degenerate_start: bool

    def __init__(self, initial_min_angle: float, record_centers: bool, degenerate_start: bool):
        self.initial_min_angle = initial_min_angle
        self.min_angle_per_iter = []
        self.centers_per_iter = [] if record_centers else None
        self.converged_at = None
        self.degenerate_start = degenerate_start

    def final_min_angle(self) -> float:
        return self.min_angle_per_iter[-1]


def is_degenerate_start(centers: np.ndarray, rel_tol: float = 1e-9) -> bool:
    """True if the centered rows span fewer than min(C - 1, d) dimensions.

    For three 2-D centers this means they lie on one line.
    """
    c, d = centers.shape
    centered = centers - centers.mean(axis=0, keepdims=True)
    singular = np.linalg.svd(centered, compute_uv=False)
    if singular[0] == 0:
        return True
    rank = int(np.count_nonzero(singular > rel_tol * singular[0]))
    return rank < min(c - 1, d)


def _l2_rows(x: np.ndarray, eps_l2: float) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.maximum(norms, eps_l2)


def _bn_rows(x: np.ndarray, eps_var: float) -> np.ndarray:
    x_hat, _, _, _ = standardize(x, (0,), eps_var)
    return x_hat


def _check_collapse(x: np.ndarray, iteration: int):
    zero = np.flatnonzero(np.linalg.norm(x, axis=1) == 0)
    if len(zero) > 0:
        raise NormLabError(f"center {int(zero[0])} collapsed to a zero vector at iteration {iteration}")


def iterate(config: CenterConfig) -> Trajectory:
    """Applies the chosen normalization repeatedly and tracks the minimum angle."""
    x = np.array(config.centers.data)
    trajectory = Trajectory(min_pairwise_angle(x), config.record_centers,
                            is_degenerate_start(x))
    streak = 0

    for iteration in range(1, config.max_iters + 1):
        if config.norm_kind == NormKind.L2BN:
            x = _l2_rows(x, config.eps_l2)
        x = _bn_rows(x, config.eps_var)
        _check_collapse(x, iteration)

        recorded = x
        if config.sample_point == SamplePoint.AFTER_L2 and config.norm_kind == NormKind.L2BN:
            recorded = _l2_rows(x, config.eps_l2)

        angle = min_pairwise_angle(recorded)
        previous = (trajectory.min_angle_per_iter[-1] if trajectory.min_angle_per_iter
                    else trajectory.initial_min_angle)
        trajectory.min_angle_per_iter.append(angle)
        if trajectory.centers_per_iter is not None:
            trajectory.centers_per_iter.append(Tensor(recorded))

        streak = streak + 1 if abs(angle - previous) < config.convergence_tol else 0
        if streak >= _CONVERGENCE_STREAK and trajectory.converged_at is None:
            trajectory.converged_at = iteration
            if config.stop_on_convergence:
                break

    return trajectory


class ThetaProbe:
    """Post-centering angle theta for one direction at several norms."""
    mu: Tensor
    phi: float  # Degrees.
    norms: list[float]
    thetas: list[float]  # Degrees, raw x.
    thetas_l2: list[float]  # Degrees, x l2-normalized before centering.

    def __init__(self, mu: Tensor, phi: float, norms: list[float]):
        self.mu = mu
        self.phi = phi
        self.norms = norms
        self.thetas = []
        self.thetas_l2 = []

    def spread(self) -> float:
        return max(self.thetas) - min(self.thetas)

    def spread_l2(self) -> float:
        return max(self.thetas_l2) - min(self.thetas_l2)


def _reference_axes(mu: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unit reference direction (mu, or the first axis if mu is 0) and a unit normal."""
    d = mu.shape[0]
    length = np.linalg.norm(mu)
    ref = mu / length if length > 0 else np.eye(d)[0]

    # Standard basis vector least aligned with ref, made orthogonal to it.
    basis = np.eye(d)[int(np.argmin(np.abs(ref)))]
    normal = basis - np.dot(basis, ref) * ref
    return ref, normal / np.linalg.norm(normal)


def _angle_between(a: np.ndarray, b: np.ndarray) -> float:
    cos = np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b))
    return math.degrees(math.acos(min(1.0, max(-1.0, cos))))


def theta_probe(mu: Tensor, phi_deg: float, norms: list[float]) -> ThetaProbe:
    """For x at angle phi to mu with each given length, measures the angle of x - mu.

    Angles are measured from the direction of mu (the first axis when mu is
    zero). The same is repeated with x l2-normalized before centering.
    """
    if mu.ndim != 1 or mu.shape[0] < 2:
        raise NormLabError(f"mu must be a vector of length >= 2, got shape {list(mu.shape)}")
    if len(norms) == 0 or min(norms) <= 0:
        raise NormLabError("norms must be a non-empty list of positive values")

    ref, normal = _reference_axes(mu.data)
    phi = math.radians(phi_deg)
    direction = math.cos(phi) * ref + math.sin(phi) * normal

    result = ThetaProbe(mu, phi_deg, list(norms))
    for r in norms:
        x = r * direction
        for v, out in ((x, result.thetas), (x / np.linalg.norm(x), result.thetas_l2)):
            centered = v - mu.data
            if np.linalg.norm(centered) == 0:
                raise NormLabError(f"x - mu is zero for norm {r}; theta is undefined")
            out.append(_angle_between(centered, ref))
    return result
